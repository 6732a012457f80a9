//! Threshold-dependent batch normalization.
//!
//! Statistics are taken per channel jointly over time, batch and space, and
//! the normalized value is scaled by the first firing threshold so that the
//! pre-activation is distributed as `N(0, V_th1²)` at initialization.

use crate::error::{Error, Result};
use crate::tensor::{ParamRole, ParamTensor, Tensor};

pub const TDBN_EPSILON: f64 = 1e-5;
pub const TDBN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct TdbnParams {
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl TdbnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: ParamTensor::new(Tensor::full(&[channels], 1.0), ParamRole::Bias),
            beta: ParamTensor::new(Tensor::zeros(&[channels]), ParamRole::Bias),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: TDBN_EPSILON,
            momentum: TDBN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values kept from the forward pass for [`tdbn_backward`].
#[derive(Clone, Debug)]
pub struct TdbnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    v_th1: f64,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct TdbnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if x.ndim() < 2 || x.dim(1) != channels {
        return Err(Error::Dimension(format!(
            "tdBN over {channels} channels got input {:?}",
            x.shape()
        )));
    }
    let plane: usize = x.shape()[2..].iter().product();
    Ok((x.dim(0), plane))
}

/// Normalizes `x` laid out as `[T·N, C, ..]`.
pub fn tdbn_forward(
    x: &Tensor,
    params: &mut TdbnParams,
    v_th1: f64,
    mode: Mode,
) -> Result<(Tensor, TdbnCache)> {
    let channels = params.channels();
    let (rows, plane) = layout(x, channels)?;
    let count = rows * plane;
    let data = x.data();
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Statistics(format!(
                    "tdBN needs at least two values per channel in train mode, got {count}"
                )));
            }
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for r in 0..rows {
                for c in 0..channels {
                    let s = &data[(r * channels + c) * plane..][..plane];
                    mean[c] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for r in 0..rows {
                for c in 0..channels {
                    let s = &data[(r * channels + c) * plane..][..plane];
                    var[c] += s.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbias = count as f64 / (count - 1) as f64;
            let m = params.momentum;
            for c in 0..channels {
                params.running_mean[c] = (1.0 - m) * params.running_mean[c] + m * mean[c];
                params.running_var[c] = (1.0 - m) * params.running_var[c] + m * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (params.running_mean.clone(), params.running_var.clone()),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + params.epsilon).sqrt())
        .collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for r in 0..rows {
        for c in 0..channels {
            let off = (r * channels + c) * plane;
            let scale = v_th1 * params.gamma.value.data()[c];
            let shift = params.beta.value.data()[c];
            for i in off..off + plane {
                let n = (data[i] - mean[c]) * inv_std[c];
                normalized.data_mut()[i] = n;
                out.data_mut()[i] = scale * n + shift;
            }
        }
    }
    Ok((
        out,
        TdbnCache {
            normalized,
            inv_std,
            v_th1,
            mode,
        },
    ))
}

/// Adjoint of [`tdbn_forward`]; in train mode it includes the dependence of
/// the batch statistics on the input.
pub fn tdbn_backward(
    grad_out: &Tensor,
    cache: Option<&TdbnCache>,
    params: &TdbnParams,
) -> Result<TdbnGrads> {
    let cache = cache.ok_or_else(|| {
        Error::Sequencing("tdBN backward called without a forward cache".into())
    })?;
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::Dimension(format!(
            "tdBN grad {:?} vs cached {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let channels = params.channels();
    let (rows, plane) = layout(grad_out, channels)?;
    let count = (rows * plane) as f64;
    let g = grad_out.data();
    let xn = cache.normalized.data();
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for r in 0..rows {
        for c in 0..channels {
            let off = (r * channels + c) * plane;
            for i in off..off + plane {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xn[i];
            }
        }
    }
    let mut grad_x = Tensor::zeros(grad_out.shape());
    for r in 0..rows {
        for c in 0..channels {
            let off = (r * channels + c) * plane;
            let k = cache.v_th1 * params.gamma.value.data()[c] * cache.inv_std[c];
            for i in off..off + plane {
                grad_x.data_mut()[i] = match cache.mode {
                    Mode::Train => k * (g[i] - sum_g[c] / count - xn[i] * sum_gx[c] / count),
                    Mode::Eval => k * g[i],
                };
            }
        }
    }
    Ok(TdbnGrads {
        input: grad_x,
        gamma: Tensor::new(
            vec![channels],
            sum_gx.iter().map(|v| v * cache.v_th1).collect(),
        )?,
        beta: Tensor::new(vec![channels], sum_g)?,
    })
}
