use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    input.expect_ndim(4, "global_avg_pool input")?;
    let (n, c, plane) = (input.dim(0), input.dim(1), input.dim(2) * input.dim(3));
    if plane == 0 {
        return dim_err("global_avg_pool: empty spatial extent");
    }
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    grad_out.expect_ndim(2, "global_avg_pool grad")?;
    let plane = height * width;
    if plane == 0 {
        return dim_err("global_avg_pool: empty spatial extent");
    }
    let scale = 1.0 / plane as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
        .collect();
    Tensor::new(vec![grad_out.dim(0), grad_out.dim(1), height, width], data)
}
