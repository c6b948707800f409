//! Fusion of the visual and geometric sequences into one `[B, T, 2d]`
//! sequence.

use crate::config::FusionStrategy;
use crate::error::{dim_err, Result};
use crate::nn::MultiHeadAttention;
use crate::tensor::{Float, Graph, ParamStore, Var};

#[derive(Debug, Clone)]
pub enum Fusion {
    /// `[X_v ‖ X_g]`, no parameters.
    Concat,
    /// Self-attention within each modality, then concatenation.
    SingleAtt {
        visual: MultiHeadAttention,
        geometric: MultiHeadAttention,
    },
    /// Cross-attention with exchanged keys: the visual half takes queries and
    /// values from `X_v` and keys from `X_g`; the geometric half the reverse.
    FusionNet {
        attend_v: MultiHeadAttention,
        attend_g: MultiHeadAttention,
    },
}

/// Fused sequence plus the `[B, h, T, T]` attention maps (visual half first).
pub struct FusionOutput {
    pub fused: Var,
    pub attention: Vec<Var>,
}

impl Fusion {
    pub fn new<F: Float>(
        ps: &mut ParamStore<F>,
        name: &str,
        strategy: FusionStrategy,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(match strategy {
            FusionStrategy::Concat => Fusion::Concat,
            FusionStrategy::SingleAtt => Fusion::SingleAtt {
                visual: MultiHeadAttention::new(ps, &format!("{name}.visual"), dim, heads)?,
                geometric: MultiHeadAttention::new(ps, &format!("{name}.geometric"), dim, heads)?,
            },
            FusionStrategy::FusionNet => Fusion::FusionNet {
                attend_v: MultiHeadAttention::new(ps, &format!("{name}.attend_v"), dim, heads)?,
                attend_g: MultiHeadAttention::new(ps, &format!("{name}.attend_g"), dim, heads)?,
            },
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Fusion::Concat => FusionStrategy::Concat,
            Fusion::SingleAtt { .. } => FusionStrategy::SingleAtt,
            Fusion::FusionNet { .. } => FusionStrategy::FusionNet,
        }
    }

    /// `xv`, `xg`: `[B, T, d]` with matching shapes.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        xv: Var,
        xg: Var,
        lengths: Option<&[usize]>,
    ) -> Result<FusionOutput> {
        let (sv, sg) = (g.shape(xv).to_vec(), g.shape(xg).to_vec());
        if sv.len() != 3 || sv != sg {
            return Err(dim_err!("fusion: visual {sv:?} and geometric {sg:?} sequences differ"));
        }
        let (left, right, attention) = match self {
            Fusion::Concat => (xv, xg, Vec::new()),
            Fusion::SingleAtt { visual, geometric } => {
                let a = visual.forward(g, ps, xv, xv, xv, lengths)?;
                let b = geometric.forward(g, ps, xg, xg, xg, lengths)?;
                (a.output, b.output, vec![a.weights, b.weights])
            }
            Fusion::FusionNet { attend_v, attend_g } => {
                let a = attend_v.forward(g, ps, xv, xg, xv, lengths)?;
                let b = attend_g.forward(g, ps, xg, xv, xg, lengths)?;
                (a.output, b.output, vec![a.weights, b.weights])
            }
        };
        Ok(FusionOutput {
            fused: g.concat(&[left, right], 2)?,
            attention,
        })
    }
}
