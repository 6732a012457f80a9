use super::gemm;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    height: usize,
    width: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn resolve(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        input.expect_ndim(4, "conv2d input")?;
        kernel.expect_ndim(4, "conv2d kernel")?;
        let [batch, cin, height, width] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
        let [cout, kcin, kh, kw] = [kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3)];
        if kcin != cin {
            return dim_err(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if kh != kw {
            return dim_err(format!("conv2d: non-square kernel {kh}x{kw}"));
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(height, kh, stride, padding),
            conv_output_size(width, kw, stride, padding),
        ) else {
            return dim_err(format!(
                "conv2d: {height}x{width} input too small for kernel {kh} (stride {stride}, padding {padding})"
            ));
        };
        Ok(Self {
            batch,
            cin,
            height,
            width,
            cout,
            k: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.cin * self.height * self.width
    }

    /// Source offset within one input sample for every (patch row, output pixel),
    /// `None` where the window falls into the zero padding.
    fn gather_index(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.patch() * self.out_plane());
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - self.padding as isize;
                            let inside = y >= 0
                                && x >= 0
                                && (y as usize) < self.height
                                && (x as usize) < self.width;
                            idx.push(inside.then(|| {
                                (c * self.height + y as usize) * self.width + x as usize
                            }));
                        }
                    }
                }
            }
        }
        idx
    }
}

fn im2col(sample: &[f64], gather: &[Option<usize>], cols: &mut [f64]) {
    for (dst, src) in cols.iter_mut().zip(gather) {
        *dst = src.map_or(0.0, |i| sample[i]);
    }
}

/// Cross-correlation of `input[N,Cin,H,W]` with `kernel[Cout,Cin,k,k]` plus an
/// optional per-output-channel bias.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::resolve(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        b.expect_shape(&[g.cout], "conv2d bias")?;
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let gather = g.gather_index();
    let mut cols = vec![0.0; patch * plane];
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.out_h, g.out_w]);
    let out_data = out.data_mut();
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        im2col(sample, &gather, &mut cols);
        let dst = &mut out_data[n * g.cout * plane..(n + 1) * g.cout * plane];
        gemm(g.cout, patch, plane, kernel.data(), false, &cols, false, dst, false);
        if let Some(b) = bias {
            for (c, row) in dst.chunks_mut(plane).enumerate() {
                let bc = b.data()[c];
                row.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Adjoint of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let g = Geometry::resolve(input, kernel, stride, padding)?;
    grad_out.expect_shape(&[g.batch, g.cout, g.out_h, g.out_w], "conv2d grad_out")?;
    let plane = g.out_plane();
    let patch = g.patch();
    let gather = g.gather_index();
    let mut cols = vec![0.0; patch * plane];
    let mut grad_cols = vec![0.0; patch * plane];
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_bias = Tensor::zeros(&[g.cout]);
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let gout = &grad_out.data()[n * g.cout * plane..(n + 1) * g.cout * plane];
        for (c, row) in gout.chunks(plane).enumerate() {
            grad_bias.data_mut()[c] += row.iter().sum::<f64>();
        }
        im2col(sample, &gather, &mut cols);
        gemm(g.cout, plane, patch, gout, false, &cols, true, grad_kernel.data_mut(), true);
        gemm(patch, g.cout, plane, kernel.data(), true, gout, false, &mut grad_cols, false);
        let gin = &mut grad_input.data_mut()[n * g.in_sample()..(n + 1) * g.in_sample()];
        for (src, dst) in grad_cols.iter().zip(&gather) {
            if let Some(i) = dst {
                gin[*i] += src;
            }
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}
