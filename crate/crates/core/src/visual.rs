//! Visual frontend: a 3-D convolutional stem followed by a per-frame
//! ResNet-18 trunk and global average pooling.

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::BatchNorm;
use crate::tensor::{Float, Graph, Init, ParamId, ParamStore, Var};

pub const STEM_KERNEL: [usize; 3] = [5, 7, 7];
pub const STEM_STRIDE: [usize; 3] = [1, 2, 2];
pub const STEM_PADDING: [usize; 3] = [2, 3, 3];
pub const POOL_KERNEL: [usize; 3] = [1, 3, 3];
pub const POOL_STRIDE: [usize; 3] = [1, 2, 2];
pub const POOL_PADDING: [usize; 3] = [0, 1, 1];

/// conv3d → batch norm → relu → spatial max pool.
#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: ParamId,
    pub bn: BatchNorm,
}

impl Stem {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let fan_in = STEM_KERNEL.iter().product();
        let mut shape = vec![channels, 1];
        shape.extend(STEM_KERNEL);
        Stem {
            conv: ps.param(&format!("{name}.conv.weight"), &shape, Init::KaimingUniform { fan_in }),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), channels),
        }
    }

    /// `[B, 1, T, H, W] -> [B, C, T, H/4, W/4]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.conv);
        let y = g.conv(x, w, None, STEM_STRIDE, STEM_PADDING, [1, 1, 1])?;
        let y = self.bn.forward(g, ps, y)?;
        let y = g.relu(y);
        g.max_pool3d(y, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)
    }
}

/// Two 3×3 convolutions with an additive shortcut, projected by a strided
/// 1×1 convolution when the shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ParamId,
    pub bn1: BatchNorm,
    pub conv2: ParamId,
    pub bn2: BatchNorm,
    pub shortcut: Option<(ParamId, BatchNorm)>,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let conv = |ps: &mut ParamStore<F>, n: &str, cin: usize, k: usize| {
            ps.param(
                &format!("{name}.{n}.weight"),
                &[out_ch, cin, k, k],
                Init::KaimingUniform { fan_in: cin * k * k },
            )
        };
        let conv1 = conv(ps, "conv1", in_ch, 3);
        let bn1 = BatchNorm::new(ps, &format!("{name}.bn1"), out_ch);
        let conv2 = conv(ps, "conv2", out_ch, 3);
        let bn2 = BatchNorm::new(ps, &format!("{name}.bn2"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let w = conv(ps, "shortcut.conv", in_ch, 1);
            (w, BatchNorm::new(ps, &format!("{name}.shortcut.bn"), out_ch))
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            stride,
        }
    }

    /// `[N, C_in, H, W] -> [N, C_out, H/stride, W/stride]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var) -> Result<Var> {
        let w1 = g.param(ps, self.conv1);
        let h = g.conv2d(x, w1, None, self.stride, 1)?;
        let h = self.bn1.forward(g, ps, h)?;
        let h = g.relu(h);
        let w2 = g.param(ps, self.conv2);
        let h = g.conv2d(h, w2, None, 1, 1)?;
        let h = self.bn2.forward(g, ps, h)?;
        let skip = match &self.shortcut {
            Some((w, bn)) => {
                let w = g.param(ps, *w);
                let s = g.conv2d(x, w, None, self.stride, 0)?;
                bn.forward(g, ps, s)?
            }
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct VisualFrontend {
    pub stem: Stem,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub crop: usize,
    pub dim: usize,
}

/// Intermediate and final visual activations.
#[derive(Debug, Clone, Copy)]
pub struct VisualOutput {
    /// `[B, C0, T, H/4, W/4]`.
    pub stem: Var,
    /// `[B, T, d]`.
    pub features: Var,
}

impl VisualFrontend {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, cfg: &ModelConfig) -> Self {
        let widths = cfg.stage_widths;
        let stem = Stem::new(ps, &format!("{name}.stem"), widths[0]);
        let mut stages = Vec::new();
        let mut in_ch = widths[0];
        for (s, &out_ch) in widths.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block = ResidualBlock::new(
                        ps,
                        &format!("{name}.stage{}.block{}", s + 1, b + 1),
                        in_ch,
                        out_ch,
                        stride,
                    );
                    in_ch = out_ch;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        VisualFrontend {
            stem,
            stages,
            crop: cfg.crop,
            dim: widths[3],
        }
    }

    /// `frames` is `[B, 1, T, crop, crop]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, frames: Var) -> Result<VisualOutput> {
        let xs = g.shape(frames).to_vec();
        if xs.len() != 5 || xs[1] != 1 || xs[3] != self.crop || xs[4] != self.crop {
            return Err(dim_err!(
                "visual frontend expects [B, 1, T, {c}, {c}] frames, got {xs:?}",
                c = self.crop
            ));
        }
        let (b, t) = (xs[0], xs[2]);
        let stem = self.stem.forward(g, ps, frames)?;
        let ss = g.shape(stem).to_vec();
        let x = g.permute(stem, &[0, 2, 1, 3, 4])?;
        let mut x = g.reshape(x, &[b * t, ss[1], ss[3], ss[4]])?;
        for block in self.stages.iter().flatten() {
            x = block.forward(g, ps, x)?;
        }
        let pooled = g.adaptive_avg_pool2d(x)?;
        let features = g.reshape(pooled, &[b, t, self.dim])?;
        Ok(VisualOutput { stem, features })
    }
}
