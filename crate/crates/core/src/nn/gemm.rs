//! Thin safe wrapper over `matrixmultiply::sgemm` for row-major operands.

/// Row-major matrix view: `(data, rows, cols)` with an optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of this view, without copying.
    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let row = self.cols as isize;
        if self.transposed {
            (1, row)
        } else {
            (row, 1)
        }
    }
}

/// `out = beta * out + a * b`, where `out` is row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f32], beta: f32) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert!(out.len() >= m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index the kernel touches given
    // the row-major strides derived from each view's shape.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
