use super::gemm;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `input[N,D] · weight[O,D]ᵀ + bias[O]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_ndim(2, "linear input")?;
    weight.expect_ndim(2, "linear weight")?;
    let (n, d, o) = (input.dim(0), input.dim(1), weight.dim(0));
    if weight.dim(1) != d {
        return dim_err(format!(
            "linear: input width {d}, weight expects {}",
            weight.dim(1)
        ));
    }
    bias.expect_shape(&[o], "linear bias")?;
    let mut out = Tensor::zeros(&[n, o]);
    gemm(n, d, o, input.data(), false, weight.data(), true, out.data_mut(), false);
    for row in out.data_mut().chunks_mut(o) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<LinearGrads> {
    input.expect_ndim(2, "linear input")?;
    weight.expect_ndim(2, "linear weight")?;
    let (n, d, o) = (input.dim(0), input.dim(1), weight.dim(0));
    if weight.dim(1) != d {
        return dim_err(format!(
            "linear: input width {d}, weight expects {}",
            weight.dim(1)
        ));
    }
    grad_out.expect_shape(&[n, o], "linear grad_out")?;
    let mut gin = Tensor::zeros(&[n, d]);
    gemm(n, o, d, grad_out.data(), false, weight.data(), false, gin.data_mut(), false);
    let mut gw = Tensor::zeros(&[o, d]);
    gemm(o, n, d, grad_out.data(), true, input.data(), false, gw.data_mut(), false);
    let mut gb = Tensor::zeros(&[o]);
    for row in grad_out.data().chunks(o) {
        for (acc, g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}
