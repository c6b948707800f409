//! The full network: frontends, fusion and decoder wired per modality.

use crate::config::{Modality, ModelConfig};
use crate::decoder::Decoder;
use crate::error::{dim_err, Result};
use crate::fusion::Fusion;
use crate::geo::{GeoFrontend, GraphInputs};
use crate::nn::apply_time_mask;
use crate::preprocess::Clip;
use crate::tensor::{lit, Float, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct LipModel {
    pub config: ModelConfig,
    pub visual: Option<crate::visual::VisualFrontend>,
    pub geo: Option<GeoFrontend>,
    pub fusion: Option<Fusion>,
    pub decoder: Decoder,
}

/// A zero-padded batch of clips.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// `[B, 1, T, crop, crop]` when the visual branch is active.
    pub frames: Option<Tensor<F>>,
    pub graph: Option<GraphInputs<F>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl<F> Batch<F> {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Handles to the activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub stem: Option<Var>,
    pub visual: Option<Var>,
    pub geometric: Option<Var>,
    /// Decoder input, `[B, T, fused_dim]`.
    pub fused: Var,
    /// Fusion attention maps, if any.
    pub attention: Vec<Var>,
    /// Pre-pooling decoder features.
    pub features: Var,
    pub logits: Var,
}

impl LipModel {
    pub fn new<F: Float>(config: ModelConfig, ps: &mut ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let m = config.modality;
        let visual = m
            .uses_visual()
            .then(|| crate::visual::VisualFrontend::new(ps, "visual", &config));
        let geo = if m.uses_landmarks() {
            Some(GeoFrontend::new(ps, "geo", &config)?)
        } else {
            None
        };
        let fusion = if m == Modality::Vl {
            Some(Fusion::new(ps, "fusion", config.fusion, config.dim, config.fusion_heads)?)
        } else {
            None
        };
        let decoder = Decoder::new(
            ps,
            "decoder",
            config.fused_dim(),
            config.tcn_branch_width,
            config.classes,
        );
        Ok(LipModel {
            config,
            visual,
            geo,
            fusion,
            decoder,
        })
    }

    /// Pads clips to the longest one. Padded frames are zero; padded
    /// landmark frames repeat the last valid frame.
    pub fn batch<F: Float>(&self, clips: &[&Clip]) -> Result<Batch<F>> {
        if clips.is_empty() {
            return Err(dim_err!("empty batch"));
        }
        let cfg = &self.config;
        let (crop, nodes) = (cfg.crop, cfg.nodes());
        for c in clips {
            if c.crop != crop || c.nodes != nodes || c.is_empty() {
                return Err(dim_err!(
                    "clip with crop {} and {} nodes does not fit a model with crop {crop} and {nodes} nodes",
                    c.crop,
                    c.nodes
                ));
            }
        }
        let lengths: Vec<usize> = clips.iter().map(|c| c.len()).collect();
        let t = lengths.iter().copied().max().unwrap_or(1);
        let b = clips.len();
        let px = crop * crop;

        let frames = if cfg.modality.uses_visual() {
            let mut data = vec![F::zero(); b * t * px];
            for (i, c) in clips.iter().enumerate() {
                for (o, &v) in data[i * t * px..].iter_mut().zip(&c.frames) {
                    *o = lit(f64::from(v));
                }
            }
            Some(Tensor::new(&[b, 1, t, crop, crop], data)?)
        } else {
            None
        };
        let graph = match &self.geo {
            Some(geo) => {
                let mut pts = Vec::with_capacity(b * t * nodes);
                for c in clips {
                    pts.extend_from_slice(&c.landmarks);
                    let last = &c.landmarks[c.landmarks.len() - nodes..];
                    for _ in c.len()..t {
                        pts.extend_from_slice(last);
                    }
                }
                Some(geo.graph_inputs(&pts, b, t)?)
            }
            None => None,
        };
        Ok(Batch {
            frames,
            graph,
            lengths,
            labels: clips.iter().map(|c| c.label).collect(),
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, batch: &Batch<F>) -> Result<ForwardTrace> {
        let lengths = &batch.lengths;
        let (mut stem, mut visual, mut geometric) = (None, None, None);
        if let Some(v) = &self.visual {
            let frames = batch
                .frames
                .clone()
                .ok_or_else(|| dim_err!("batch has no frames for the visual branch"))?;
            let x = g.constant(frames);
            let out = v.forward(g, ps, x)?;
            stem = Some(out.stem);
            visual = Some(apply_time_mask(g, out.features, lengths, 1)?);
        }
        if let Some(geo) = &self.geo {
            let gi = batch
                .graph
                .as_ref()
                .ok_or_else(|| dim_err!("batch has no landmarks for the geometric branch"))?;
            let x = g.constant(gi.points.clone());
            let out = geo.forward(g, ps, x, &gi.adjacency, lengths)?;
            geometric = Some(apply_time_mask(g, out.features, lengths, 1)?);
        }
        let (fused, attention) = match (&self.fusion, visual, geometric) {
            (Some(f), Some(v), Some(gm)) => {
                let out = f.forward(g, ps, v, gm, Some(lengths))?;
                (out.fused, out.attention)
            }
            (None, Some(v), None) => (v, Vec::new()),
            (None, None, Some(gm)) => (gm, Vec::new()),
            _ => return Err(dim_err!("model branches inconsistent with modality {}", self.config.modality)),
        };
        let dec = self.decoder.forward(g, ps, fused, lengths)?;
        Ok(ForwardTrace {
            stem,
            visual,
            geometric,
            fused,
            attention,
            features: dec.features,
            logits: dec.logits,
        })
    }
}

/// Row-wise softmax of `[B, C]` logits, in `f64`.
pub fn probabilities<F: Float>(logits: &[F], classes: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(classes)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            e.into_iter().map(|v| v / total).collect()
        })
        .collect()
}
