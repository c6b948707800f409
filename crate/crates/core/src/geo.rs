//! Geometric frontend: per-frame kNN landmark graphs, two graph attention
//! layers, a per-graph embedding, sinusoidal positions and a transformer
//! encoder layer.

use crate::config::{ModelConfig, NodeReduction};
use crate::error::{cfg_err, dim_err, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{lit, Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Directed landmark graph. Edge `(src, dst)` lets `dst` attend to `src`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameGraph {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl FrameGraph {
    /// `N * N` mask with `mask[i * N + j]` set for an edge `j -> i`.
    pub fn adjacency(&self) -> Vec<bool> {
        let mut m = vec![false; self.nodes * self.nodes];
        for &(src, dst) in &self.edges {
            m[dst * self.nodes + src] = true;
        }
        m
    }

    pub fn in_neighbors(&self, node: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.edges.iter().filter(|e| e.1 == node).map(|e| e.0).collect();
        v.sort_unstable();
        v
    }
}

/// `k` nearest neighbours of every point (ties to the lower index) as
/// incoming edges, plus a self-loop per node.
pub fn build_knn_graph(points: &[[f64; 2]], k: usize) -> Result<FrameGraph> {
    let n = points.len();
    if n <= k {
        return Err(cfg_err!("kNN graph with k = {k} needs more than {k} points, got {n}"));
    }
    let mut edges = Vec::with_capacity(n * (k + 1));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        order.clear();
        order.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2), j)),
        );
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(order[..k].iter().map(|&(_, j)| (j, i)));
        edges.push((i, i));
    }
    Ok(FrameGraph { nodes: n, edges })
}

/// Graph attention: `e_ij = leaky_relu(a_dst·Wh_i + a_src·Wh_j)` softmaxed
/// over the in-neighbourhood of `i`, then `h'_i = elu(Σ_j α_ij Wh_j)`.
#[derive(Debug, Clone)]
pub struct GatLayer {
    /// `[F_out, F_in]`.
    pub weight: ParamId,
    /// `[2 * F_out]`: destination half, then source half.
    pub attention: ParamId,
    pub out_features: usize,
    pub slope: f64,
}

/// Node features `[M, N, F_out]` with attention weights `[M, N, N]`.
pub struct GatOutput {
    pub features: Var,
    pub attention: Var,
}

impl GatLayer {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, slope: f64) -> Self {
        GatLayer {
            weight: ps.param(
                &format!("{name}.weight"),
                &[fan_out, fan_in],
                Init::XavierUniform { fan_in, fan_out },
            ),
            attention: ps.param(
                &format!("{name}.attention"),
                &[2 * fan_out],
                Init::XavierUniform {
                    fan_in: 2 * fan_out,
                    fan_out: 1,
                },
            ),
            out_features: fan_out,
            slope,
        }
    }

    /// `h` is `[M, N, F_in]` (M independent graphs); `adjacency` holds `M`
    /// row-major `N * N` masks from [`FrameGraph::adjacency`].
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, h: Var, adjacency: &[bool]) -> Result<GatOutput> {
        let hs = g.shape(h).to_vec();
        if hs.len() != 3 || adjacency.len() != hs[0] * hs[1] * hs[1] {
            return Err(dim_err!(
                "gat: features {hs:?} with an adjacency of {} entries",
                adjacency.len()
            ));
        }
        let (m, n, f) = (hs[0], hs[1], self.out_features);
        let w = g.param(ps, self.weight);
        let wh = g.linear(h, w, None)?;
        let a = g.param(ps, self.attention);
        let a_dst = g.narrow(a, 0, 0, f)?;
        let a_dst = g.reshape(a_dst, &[1, f])?;
        let a_src = g.narrow(a, 0, f, f)?;
        let a_src = g.reshape(a_src, &[1, f])?;
        let s_dst = g.linear(wh, a_dst, None)?;
        let s_dst = g.reshape(s_dst, &[m, n])?;
        let s_src = g.linear(wh, a_src, None)?;
        let s_src = g.reshape(s_src, &[m, n])?;
        let e = g.outer_add(s_dst, s_src)?;
        let e = g.leaky_relu(e, self.slope);
        let attention = g.masked_softmax(e, adjacency)?;
        let agg = g.matmul(attention, wh, false, false)?;
        Ok(GatOutput {
            features: g.elu(agg),
            attention,
        })
    }
}

/// Sinusoidal table: `PE(t, 2i) = sin(t / 10000^(2i/d))`,
/// `PE(t, 2i+1) = cos(t / 10000^(2i/d))`.
pub fn positional_encoding<F: Float>(steps: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(steps * dim);
    for t in 0..steps {
        for c in 0..dim {
            let i2 = (c - c % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / dim as f64);
            data.push(lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[steps.max(1), dim.max(1)], data).unwrap_or_else(|_| Tensor::zeros(&[1, 1]))
}

/// Post-norm transformer encoder layer with a ReLU feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<F: Float>(
        ps: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, ffn, true),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ffn, dim, true),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    /// `[B, T, d] -> [B, T, d]`; keys past `lengths[b]` are ignored.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var, lengths: Option<&[usize]>) -> Result<Var> {
        let a = self.attention.forward(g, ps, x, x, x, lengths)?.output;
        let a = g.dropout(a, self.dropout)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, ps, x)?;
        let h = self.ff1.forward(g, ps, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        let h = self.ff2.forward(g, ps, h)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        self.norm2.forward(g, ps, x)
    }
}

#[derive(Debug, Clone)]
pub struct GeoFrontend {
    pub gat1: GatLayer,
    pub gat2: GatLayer,
    pub embed: Linear,
    pub encoder: EncoderLayer,
    pub nodes: usize,
    pub knn: usize,
    pub crop: usize,
    pub reduction: NodeReduction,
    pub dim: usize,
}

/// Network-ready landmark inputs for a batch.
#[derive(Debug, Clone)]
pub struct GraphInputs<F> {
    /// `[B, T, N, 2]`, centred and scaled by half the crop side.
    pub points: Tensor<F>,
    /// `B * T` row-major `N * N` masks.
    pub adjacency: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct GeoOutput {
    /// `[B, T, d]` per-frame graph embeddings.
    pub frame_embeddings: Var,
    /// `[B, T, d]` encoder output.
    pub features: Var,
}

impl GeoFrontend {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let [c1, c2] = cfg.gat_channels;
        let nodes = cfg.nodes();
        let embed_in = match cfg.node_reduction {
            NodeReduction::Flatten => nodes * c2,
            NodeReduction::MeanPool => c2,
        };
        Ok(GeoFrontend {
            gat1: GatLayer::new(ps, &format!("{name}.gat1"), 2, c1, cfg.gat_slope),
            gat2: GatLayer::new(ps, &format!("{name}.gat2"), c1, c2, cfg.gat_slope),
            embed: Linear::new(ps, &format!("{name}.embed"), embed_in, cfg.dim, true),
            encoder: EncoderLayer::new(
                ps,
                &format!("{name}.encoder"),
                cfg.dim,
                cfg.encoder_heads,
                cfg.encoder_ffn,
                cfg.dropout,
            )?,
            nodes,
            knn: cfg.knn,
            crop: cfg.crop,
            reduction: cfg.node_reduction,
            dim: cfg.dim,
        })
    }

    /// Normalizes crop-coordinate landmarks (`B * T * N` points, frame-major)
    /// and builds one kNN graph per frame.
    pub fn graph_inputs<F: Float>(&self, points: &[[f32; 2]], batch: usize, steps: usize) -> Result<GraphInputs<F>> {
        let n = self.nodes;
        if points.len() != batch * steps * n {
            return Err(dim_err!(
                "{} landmark points for batch {batch} x {steps} frames x {n} nodes",
                points.len()
            ));
        }
        let half = self.crop as f64 / 2.0;
        let mut adjacency = Vec::with_capacity(batch * steps * n * n);
        let mut norm = Vec::with_capacity(points.len() * 2);
        let mut frame = Vec::with_capacity(n);
        for chunk in points.chunks(n) {
            frame.clear();
            frame.extend(chunk.iter().map(|p| {
                [(f64::from(p[0]) - half) / half, (f64::from(p[1]) - half) / half]
            }));
            adjacency.extend(build_knn_graph(&frame, self.knn)?.adjacency());
            norm.extend(frame.iter().flat_map(|p| [lit::<F>(p[0]), lit::<F>(p[1])]));
        }
        Ok(GraphInputs {
            points: Tensor::new(&[batch, steps, n, 2], norm)?,
            adjacency,
        })
    }

    /// `[M, N, 2]` node coordinates to `[M, d]` frame embeddings.
    pub fn embed_frames<F: Float>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, nodes: Var, adjacency: &[bool]) -> Result<Var> {
        let s = g.shape(nodes).to_vec();
        if s.len() != 3 || s[1] != self.nodes || s[2] != 2 {
            return Err(dim_err!("geo frontend expects [M, {}, 2] nodes, got {s:?}", self.nodes));
        }
        let m = s[0];
        let h = self.gat1.forward(g, ps, nodes, adjacency)?.features;
        let h = self.gat2.forward(g, ps, h, adjacency)?.features;
        let c = self.gat2.out_features;
        let flat = match self.reduction {
            NodeReduction::Flatten => g.reshape(h, &[m, self.nodes * c])?,
            NodeReduction::MeanPool => {
                let t = g.permute(h, &[0, 2, 1])?;
                g.mean_trailing(t, 1)?
            }
        };
        self.embed.forward(g, ps, flat)
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        points: Var,
        adjacency: &[bool],
        lengths: &[usize],
    ) -> Result<GeoOutput> {
        let s = g.shape(points).to_vec();
        if s.len() != 4 || s[2] != self.nodes || s[3] != 2 {
            return Err(dim_err!(
                "geo frontend expects [B, T, {}, 2] landmarks, got {s:?}",
                self.nodes
            ));
        }
        let (b, t) = (s[0], s[1]);
        let nodes = g.reshape(points, &[b * t, self.nodes, 2])?;
        let e = self.embed_frames(g, ps, nodes, adjacency)?;
        let frame_embeddings = g.reshape(e, &[b, t, self.dim])?;
        let pe = positional_encoding::<F>(t, self.dim);
        let tiled: Vec<F> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
        let pe = g.constant(Tensor::new(&[b, t, self.dim], tiled)?);
        let x = g.add(frame_embeddings, pe)?;
        let features = self.encoder.forward(g, ps, x, Some(lengths))?;
        Ok(GeoOutput {
            frame_embeddings,
            features,
        })
    }
}
