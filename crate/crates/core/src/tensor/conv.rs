//! im2col convolution kernels over up to three spatial axes.
//!
//! Every convolution is treated as 3-D: a 2-D convolution has a unit depth
//! axis and a 1-D convolution has unit height and width.

use super::gemm::gemm;
use super::Float;
use crate::error::{dim_err, Result};

/// Output length of one convolved axis, or `None` if the (dilated) kernel
/// does not fit in the padded input.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Resolved shapes of one convolution call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        dilation: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = conv_output_len(
                input[axis],
                kernel[axis],
                stride[axis],
                padding[axis],
                dilation[axis],
            )
            .ok_or_else(|| {
                dim_err!(
                    "spatial axis {axis}: input {} with padding {} cannot fit kernel {} (stride {}, dilation {})",
                    input[axis],
                    padding[axis],
                    kernel[axis],
                    stride[axis],
                    dilation[axis]
                )
            })?;
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            padding,
            dilation,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    /// Input coordinate along `axis` for output index `o` and kernel tap `k`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k * self.dilation[axis]) as isize
            - self.padding[axis] as isize;
        if pos >= 0 && (pos as usize) < self.input[axis] {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Lays out input patches as a `patch_len × (batch·out_positions)` matrix.
    pub(crate) fn im2col<F: Float>(&self, input: &[F]) -> Vec<F> {
        let cols = self.batch * self.out_positions();
        let mut col = vec![F::zero(); self.patch_len() * cols];
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let in_plane = id * ih * iw;
        let p = self.out_positions();
        let mut row = 0;
        for ci in 0..self.in_channels {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let dst_row = &mut col[row * cols..(row + 1) * cols];
                        for n in 0..self.batch {
                            let src = &input[(n * self.in_channels + ci) * in_plane..][..in_plane];
                            let dst = &mut dst_row[n * p..(n + 1) * p];
                            for z in 0..od {
                                let Some(sz) = self.source(0, z, a) else { continue };
                                for y in 0..oh {
                                    let Some(sy) = self.source(1, y, b) else { continue };
                                    let base_out = (z * oh + y) * ow;
                                    let base_in = (sz * ih + sy) * iw;
                                    for x in 0..ow {
                                        if let Some(sx) = self.source(2, x, c) {
                                            dst[base_out + x] = src[base_in + sx];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a patch matrix back onto an input-shaped buffer.
    pub(crate) fn col2im<F: Float>(&self, col: &[F], grad_input: &mut [F]) {
        let cols = self.batch * self.out_positions();
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let in_plane = id * ih * iw;
        let p = self.out_positions();
        let mut row = 0;
        for ci in 0..self.in_channels {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let src_row = &col[row * cols..(row + 1) * cols];
                        for n in 0..self.batch {
                            let dst = &mut grad_input[(n * self.in_channels + ci) * in_plane..][..in_plane];
                            let src = &src_row[n * p..(n + 1) * p];
                            for z in 0..od {
                                let Some(sz) = self.source(0, z, a) else { continue };
                                for y in 0..oh {
                                    let Some(sy) = self.source(1, y, b) else { continue };
                                    let base_out = (z * oh + y) * ow;
                                    let base_in = (sz * ih + sy) * iw;
                                    for x in 0..ow {
                                        if let Some(sx) = self.source(2, x, c) {
                                            dst[base_in + sx] += src[base_out + x];
                                        }
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Forward convolution; `input` is `[N, C_in, D, H, W]`, `weight` is
    /// `[C_out, C_in, kd, kh, kw]`, output is `[N, C_out, D', H', W']`.
    pub(crate) fn forward<F: Float>(&self, input: &[F], weight: &[F], bias: Option<&[F]>) -> Vec<F> {
        let col = self.im2col(input);
        let p = self.out_positions();
        let cols = self.batch * p;
        let mut tmp = vec![F::zero(); self.out_channels * cols];
        gemm(
            self.out_channels,
            self.patch_len(),
            cols,
            weight,
            false,
            &col,
            false,
            &mut tmp,
            F::zero(),
        );
        let mut out = vec![F::zero(); self.batch * self.out_channels * p];
        for co in 0..self.out_channels {
            let b = bias.map_or(F::zero(), |b| b[co]);
            let src = &tmp[co * cols..(co + 1) * cols];
            for n in 0..self.batch {
                let dst = &mut out[(n * self.out_channels + co) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(&src[n * p..(n + 1) * p]) {
                    *d = s + b;
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_weight, grad_bias)` for an output gradient.
    pub(crate) fn backward<F: Float>(
        &self,
        input: &[F],
        weight: &[F],
        grad_out: &[F],
        need_input: bool,
    ) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
        let p = self.out_positions();
        let cols = self.batch * p;
        let k = self.patch_len();
        let mut dtmp = vec![F::zero(); self.out_channels * cols];
        let mut grad_bias = vec![F::zero(); self.out_channels];
        for co in 0..self.out_channels {
            let dst = &mut dtmp[co * cols..(co + 1) * cols];
            for n in 0..self.batch {
                let src = &grad_out[(n * self.out_channels + co) * p..][..p];
                dst[n * p..(n + 1) * p].copy_from_slice(src);
                grad_bias[co] += src.iter().copied().sum::<F>();
            }
        }
        let col = self.im2col(input);
        let mut grad_weight = vec![F::zero(); self.out_channels * k];
        gemm(self.out_channels, cols, k, &dtmp, false, &col, true, &mut grad_weight, F::zero());
        let grad_input = need_input.then(|| {
            let mut dcol = col;
            gemm(k, self.out_channels, cols, weight, true, &dtmp, false, &mut dcol, F::zero());
            let mut gi = vec![F::zero(); self.batch * self.in_channels * self.in_positions()];
            self.col2im(&dcol, &mut gi);
            gi
        });
        (grad_input, grad_weight, grad_bias)
    }
}
