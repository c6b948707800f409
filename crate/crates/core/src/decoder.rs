//! Multi-scale temporal convolutional decoder and classification head.

use crate::config::{TCN_DILATIONS, TCN_KERNELS};
use crate::error::{dim_err, Result};
use crate::nn::{apply_time_mask, BatchNorm, Linear};
use crate::tensor::{Float, Graph, Init, ParamId, ParamStore, Var};

/// One dilated conv1d → batch norm → relu branch.
#[derive(Debug, Clone)]
pub struct TcnBranch {
    /// `[w, C_in, k]`.
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub kernel: usize,
}

/// Three parallel branches (kernels 3, 5, 7) sharing one dilation, a 1×1
/// convolution back to the input width, and a residual connection.
#[derive(Debug, Clone)]
pub struct MsTcnLayer {
    pub branches: Vec<TcnBranch>,
    /// `[C_in, 3w, 1]`.
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub dilation: usize,
}

impl MsTcnLayer {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, channels: usize, width: usize, dilation: usize) -> Self {
        let branches = TCN_KERNELS
            .iter()
            .map(|&k| TcnBranch {
                weight: ps.param(
                    &format!("{name}.k{k}.weight"),
                    &[width, channels, k],
                    Init::KaimingUniform { fan_in: channels * k },
                ),
                bn: BatchNorm::new(ps, &format!("{name}.k{k}.bn"), width),
                kernel: k,
            })
            .collect();
        let cat = width * TCN_KERNELS.len();
        MsTcnLayer {
            branches,
            proj_weight: ps.param(
                &format!("{name}.proj.weight"),
                &[channels, cat, 1],
                Init::Uniform(1.0 / (cat as f64).sqrt()),
            ),
            proj_bias: ps.param(&format!("{name}.proj.bias"), &[channels], Init::Zeros),
            dilation,
        }
    }

    /// Temporal extent of the widest branch: `(k - 1) * dilation + 1`.
    pub fn span(&self) -> usize {
        self.branches.iter().map(|b| (b.kernel - 1) * self.dilation + 1).max().unwrap_or(1)
    }

    /// `[B, C_in, T] -> [B, 3w, T]`.
    pub fn branches_forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let w = g.param(ps, b.weight);
            let pad = self.dilation * (b.kernel - 1) / 2;
            let y = g.conv1d(x, w, None, self.dilation, pad)?;
            let y = b.bn.forward(g, ps, y)?;
            outs.push(g.relu(y));
        }
        g.concat(&outs, 1)
    }

    /// `[B, C_in, T] -> [B, C_in, T]`, padded steps zeroed.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var, lengths: &[usize]) -> Result<Var> {
        let cat = self.branches_forward(g, ps, x)?;
        let w = g.param(ps, self.proj_weight);
        let b = g.param(ps, self.proj_bias);
        let y = g.conv1d(cat, w, Some(b), 1, 0)?;
        let y = g.add(y, x)?;
        apply_time_mask(g, y, lengths, 2)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<MsTcnLayer>,
    pub head: Linear,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[B, T, C_in]` before temporal pooling.
    pub features: Var,
    /// `[B, classes]`.
    pub logits: Var,
}

impl Decoder {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, channels: usize, width: usize, classes: usize) -> Self {
        let layers = TCN_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| MsTcnLayer::new(ps, &format!("{name}.layer{}", i + 1), channels, width, d))
            .collect();
        Decoder {
            layers,
            head: Linear::new(ps, &format!("{name}.head"), channels, classes, true),
            channels,
        }
    }

    /// Half-width of the stack's receptive field.
    pub fn receptive_half_span(&self) -> usize {
        self.layers.iter().map(|l| (l.span() - 1) / 2).sum()
    }

    /// `x`: `[B, T, C_in]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var, lengths: &[usize]) -> Result<DecoderOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.channels || lengths.len() != s[0] {
            return Err(dim_err!(
                "decoder expects [B, T, {}] with B lengths, got {s:?} and {} lengths",
                self.channels,
                lengths.len()
            ));
        }
        let h = g.permute(x, &[0, 2, 1])?;
        let mut h = apply_time_mask(g, h, lengths, 2)?;
        for layer in &self.layers {
            h = layer.forward(g, ps, h, lengths)?;
        }
        let features = g.permute(h, &[0, 2, 1])?;
        let pooled = g.masked_time_mean(features, lengths)?;
        let logits = self.head.forward(g, ps, pooled)?;
        Ok(DecoderOutput { features, logits })
    }
}
