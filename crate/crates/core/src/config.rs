//! Architecture hyperparameters in one validated record.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::preprocess::LandmarkSubset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Landmarks only.
    Lo,
    /// Visual only.
    Vo,
    /// Visual and landmarks, fused.
    Vl,
}

impl Modality {
    pub fn uses_visual(self) -> bool {
        matches!(self, Modality::Vo | Modality::Vl)
    }

    pub fn uses_landmarks(self) -> bool {
        matches!(self, Modality::Lo | Modality::Vl)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Lo => "lo",
            Modality::Vo => "vo",
            Modality::Vl => "vl",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lo" => Ok(Modality::Lo),
            "vo" => Ok(Modality::Vo),
            "vl" => Ok(Modality::Vl),
            other => Err(Error::Config(format!("unknown modality `{other}` (expected lo, vo or vl)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Concat,
    SingleAtt,
    FusionNet,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::SingleAtt => "single_att",
            FusionStrategy::FusionNet => "fusionnet",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(FusionStrategy::Concat),
            "single_att" | "singleatt" => Ok(FusionStrategy::SingleAtt),
            "fusionnet" => Ok(FusionStrategy::FusionNet),
            other => Err(Error::Config(format!(
                "unknown fusion strategy `{other}` (expected concat, single_att or fusionnet)"
            ))),
        }
    }
}

/// How per-node GAT features become one vector per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeReduction {
    /// Flatten nodes in landmark-index order.
    Flatten,
    MeanPool,
}

impl fmt::Display for NodeReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeReduction::Flatten => "flatten",
            NodeReduction::MeanPool => "mean",
        })
    }
}

impl FromStr for NodeReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flatten" => Ok(NodeReduction::Flatten),
            "mean" => Ok(NodeReduction::MeanPool),
            other => Err(Error::Config(format!("unknown node reduction `{other}` (expected flatten or mean)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub modality: Modality,
    pub fusion: FusionStrategy,
    pub fusion_heads: usize,
    pub subset: LandmarkSubset,

    /// Side of the aligned mouth patch.
    pub canvas: usize,
    /// Side of the network input crop.
    pub crop: usize,
    /// ResNet stage widths; the stem emits `stage_widths[0]` channels and
    /// the frontend emits `stage_widths[3] == dim`.
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: usize,

    pub knn: usize,
    pub gat_channels: [usize; 2],
    pub gat_slope: f64,
    pub node_reduction: NodeReduction,
    pub encoder_heads: usize,
    pub encoder_ffn: usize,
    pub dropout: f64,

    /// Per-frontend feature width `d`.
    pub dim: usize,
    pub tcn_branch_width: usize,
}

pub const TCN_KERNELS: [usize; 3] = [3, 5, 7];
pub const TCN_DILATIONS: [usize; 4] = [1, 2, 4, 8];

impl ModelConfig {
    /// Full-size network.
    pub fn paper(classes: usize) -> Self {
        ModelConfig {
            classes,
            modality: Modality::Vl,
            fusion: FusionStrategy::FusionNet,
            fusion_heads: 8,
            subset: LandmarkSubset::Lower33,
            canvas: 96,
            crop: 88,
            stage_widths: [64, 128, 256, 512],
            blocks_per_stage: 2,
            knn: 5,
            gat_channels: [16, 64],
            gat_slope: 0.2,
            node_reduction: NodeReduction::Flatten,
            encoder_heads: 8,
            encoder_ffn: 1024,
            dropout: 0.1,
            dim: 512,
            tcn_branch_width: 256,
        }
    }

    /// Same topology with narrow layers and small frames, sized for
    /// single-core training runs.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            canvas: 28,
            crop: 24,
            stage_widths: [4, 8, 16, 32],
            encoder_ffn: 64,
            dim: 32,
            tcn_branch_width: 16,
            ..ModelConfig::paper(classes)
        }
    }

    /// Decoder input width: `2d` when fused, `d` otherwise.
    pub fn fused_dim(&self) -> usize {
        match self.modality {
            Modality::Vl => 2 * self.dim,
            _ => self.dim,
        }
    }

    pub fn nodes(&self) -> usize {
        self.subset.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.crop == 0 || self.crop > self.canvas {
            return fail(format!("crop {} must be in 1..={}", self.crop, self.canvas));
        }
        if self.stage_widths[3] != self.dim {
            return fail(format!(
                "last stage width {} must equal feature width {}",
                self.stage_widths[3], self.dim
            ));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage == 0 {
            return fail("empty ResNet stage".into());
        }
        if self.fusion_heads == 0 || self.dim % self.fusion_heads != 0 {
            return fail(format!("fusion heads {} must divide d = {}", self.fusion_heads, self.dim));
        }
        if self.encoder_heads == 0 || self.dim % self.encoder_heads != 0 {
            return fail(format!("encoder heads {} must divide d = {}", self.encoder_heads, self.dim));
        }
        if self.knn == 0 || self.knn >= self.nodes() {
            return fail(format!("k = {} needs more than k of {} nodes", self.knn, self.nodes()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.gat_channels.contains(&0) || self.encoder_ffn == 0 || self.tcn_branch_width == 0 {
            return fail("zero layer width".into());
        }
        Ok(())
    }

    /// Applies one `key=value` override; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a valid number")))
        }
        match key {
            "classes" => self.classes = num(key, value)?,
            "modality" => self.modality = value.parse()?,
            "fusion" | "fusion.strategy" => self.fusion = value.parse()?,
            "heads" | "fusion.heads" => self.fusion_heads = num(key, value)?,
            "subset" => self.subset = value.parse()?,
            "canvas" => self.canvas = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "stage_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.stage_widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("`stage_widths` needs 4 comma-separated values".into()))?;
            }
            "gat_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.gat_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("`gat_channels` needs 2 comma-separated values".into()))?;
            }
            "gat_slope" => self.gat_slope = num(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = num(key, value)?,
            "knn" => self.knn = num(key, value)?,
            "node_reduction" => self.node_reduction = value.parse()?,
            "encoder_heads" => self.encoder_heads = num(key, value)?,
            "encoder_ffn" => self.encoder_ffn = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "tcn_branch_width" => self.tcn_branch_width = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines accepted back by [`ModelConfig::set`].
    pub fn to_text(&self) -> String {
        let w = self.stage_widths;
        format!(
            "classes={}\nmodality={}\nfusion={}\nheads={}\nsubset={}\ncanvas={}\ncrop={}\n\
             stage_widths={},{},{},{}\ngat_channels={},{}\ngat_slope={}\nblocks_per_stage={}\nknn={}\nnode_reduction={}\n\
             encoder_heads={}\nencoder_ffn={}\ndropout={}\ndim={}\ntcn_branch_width={}\n",
            self.classes,
            self.modality,
            self.fusion,
            self.fusion_heads,
            self.subset,
            self.canvas,
            self.crop,
            w[0],
            w[1],
            w[2],
            w[3],
            self.gat_channels[0],
            self.gat_channels[1],
            self.gat_slope,
            self.blocks_per_stage,
            self.knn,
            self.node_reduction,
            self.encoder_heads,
            self.encoder_ffn,
            self.dropout,
            self.dim,
            self.tcn_branch_width
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper(100).validate().unwrap();
        ModelConfig::desk(10).validate().unwrap();
        assert_eq!(ModelConfig::paper(100).fused_dim(), 1024);
    }

    #[test]
    fn rejects_bad_heads_and_k() {
        let mut c = ModelConfig::paper(10);
        c.fusion_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::paper(10);
        c.subset = LandmarkSubset::Mouth20;
        c.knn = 20;
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::desk(7);
        c.modality = Modality::Lo;
        c.fusion = FusionStrategy::SingleAtt;
        c.node_reduction = NodeReduction::MeanPool;
        let mut back = ModelConfig::paper(2);
        for line in c.to_text().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap(), "{k}");
        }
        assert_eq!(back, c);
        assert!(!back.set("nonsense", "1").unwrap());
    }
}
