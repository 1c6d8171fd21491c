//! Binary PPM (`P6`, maxval 255) images as `[3, H, W]` tensors in `[0, 1]`.

use rsaforge_core::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PpmError {
    #[error("not a binary PPM (magic {0:?}, expected \"P6\")")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    BadHeader(&'static str),
    #[error("maxval {0} is not supported, only 255")]
    UnsupportedMaxval(u32),
    #[error("truncated raster: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("image must be [3, H, W], got {0:?}")]
    BadShape(Vec<usize>),
}

/// Header fields are separated by whitespace; `#` starts a comment that
/// runs to the end of the line.
fn next_field<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<u32, PpmError> {
    let field = next_field(bytes, pos).ok_or(PpmError::BadHeader(what))?;
    std::str::from_utf8(field)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PpmError::BadHeader(what))
}

pub fn load_ppm(bytes: &[u8]) -> Result<Tensor, PpmError> {
    let mut pos = 0;
    let magic = next_field(bytes, &mut pos).unwrap_or_default();
    if magic != b"P6" {
        return Err(PpmError::BadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let w = number(bytes, &mut pos, "width")? as usize;
    let h = number(bytes, &mut pos, "height")? as usize;
    let maxval = number(bytes, &mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(PpmError::BadHeader("zero image dimension"));
    }
    if maxval != 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PpmError::Truncated {
            expected: pos + 1 + 3 * w * h,
            actual: bytes.len(),
        });
    }
    let raster = &bytes[pos + 1..];
    let need = 3 * w * h;
    if raster.len() < need {
        return Err(PpmError::Truncated {
            expected: pos + 1 + need,
            actual: bytes.len(),
        });
    }
    let mut data = vec![0.0f32; need];
    for (p, px) in raster[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("finite by construction"))
}

/// Encodes a `[3, H, W]` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn write_ppm(img: &Tensor) -> Result<Vec<u8>, PpmError> {
    let &[3, h, w] = img.shape() else {
        return Err(PpmError::BadShape(img.shape().to_vec()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = img.data()[c * h * w + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}
