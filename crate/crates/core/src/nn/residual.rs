use crate::{Result, Tensor};

/// Elementwise sum of a block output and its skip branch.
pub fn residual_add(block_out: &Tensor, skip: &Tensor) -> Result<Tensor> {
    block_out.same_shape(skip, "residual_add")?;
    let data = block_out
        .data()
        .iter()
        .zip(skip.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Tensor::from_parts(block_out.shape().to_vec(), data))
}

/// The upstream gradient flows unchanged into both branches:
/// returns `(grad_block_out, grad_skip)`.
pub fn residual_add_backward(grad_output: &Tensor) -> (Tensor, Tensor) {
    (grad_output.clone(), grad_output.clone())
}
