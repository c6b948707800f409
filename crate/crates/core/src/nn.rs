//! Parameterized layers shared by the frontends, fusion and decoder.

use crate::error::{cfg_err, dim_err, Result};
use crate::tensor::{Float, Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Normalization epsilon for batch norm and layer norm.
pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight, zero bias.
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(ps, name, fan_in, fan_out, bias, Init::Uniform(bound))
    }

    pub fn xavier<F: Float>(ps: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(ps, name, fan_in, fan_out, true, Init::XavierUniform { fan_in, fan_out })
    }

    fn with_init<F: Float>(
        ps: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Linear {
            weight: ps.param(&format!("{name}.weight"), &[fan_out, fan_in], init),
            bias: bias.then(|| ps.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }
}

/// Batch norm over axis 1 with running statistics kept as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: ps.param(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: ps.param(&format!("{name}.beta"), &[channels], Init::Zeros),
            running_mean: ps.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros),
            running_var: ps.buffer(&format!("{name}.running_var"), &[channels], Init::Ones),
        }
    }

    /// Batch statistics (and a running-estimate update) in train mode,
    /// running statistics in eval mode.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &mut ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if g.is_train() {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, NORM_EPS)?;
            if let Some((mean, var)) = stats {
                let m: F = crate::tensor::lit(BN_MOMENTUM);
                let keep = F::one() - m;
                for (r, &b) in ps.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * b;
                }
                for (r, &b) in ps.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * b;
                }
            }
            Ok(y)
        } else {
            let mean = ps.get(self.running_mean).data().to_vec();
            let var = ps.get(self.running_var).data().to_vec();
            Ok(g.batch_norm(x, gamma, beta, Some((&mean, &var)), NORM_EPS)?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: ps.param(&format!("{name}.gamma"), &[width], Init::Ones),
            beta: ps.param(&format!("{name}.beta"), &[width], Init::Zeros),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with learned Q/K/V/output
/// projections (Xavier-initialized).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of an attention call together with its `[B, h, T_q, T_k]` weights.
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<F: Float>(ps: &mut ParamStore<F>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(cfg_err!("attention width {dim} is not divisible by {heads} heads"));
        }
        Ok(MultiHeadAttention {
            query: Linear::xavier(ps, &format!("{name}.q"), dim, dim),
            key: Linear::xavier(ps, &format!("{name}.k"), dim, dim),
            value: Linear::xavier(ps, &format!("{name}.v"), dim, dim),
            output: Linear::xavier(ps, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        })
    }

    /// `query` is `[B, T_q, d]`; `key` and `value` are `[B, T_k, d]`. Keys at
    /// or beyond `key_lengths[b]` are masked out.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        query: Var,
        key: Var,
        value: Var,
        key_lengths: Option<&[usize]>,
    ) -> Result<Attended> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(key).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(dim_err!(
                "attention: query {qs:?} / key {ks:?} incompatible with width {}",
                self.dim
            ));
        }
        if g.shape(value) != ks.as_slice() {
            return Err(dim_err!("attention: value {:?} must match key {ks:?}", g.shape(value)));
        }
        let (batch, tq, tk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);

        let split = |g: &mut Graph<F>, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[batch, t, h, dh])?;
            g.permute(x, &[0, 2, 1, 3])
        };
        let q = self.query.forward(g, ps, query)?;
        let q = split(g, q, tq)?;
        let k = self.key.forward(g, ps, key)?;
        let k = split(g, k, tk)?;
        let v = self.value.forward(g, ps, value)?;
        let v = split(g, v, tk)?;

        let scores = g.matmul(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = match key_lengths {
            Some(lengths) if lengths.iter().any(|&l| l < tk) => {
                if lengths.len() != batch {
                    return Err(dim_err!("attention: {} key lengths for batch {batch}", lengths.len()));
                }
                let keep: Vec<bool> = (0..batch * h * tq * tk)
                    .map(|i| i % tk < lengths[i / (h * tq * tk)])
                    .collect();
                g.masked_softmax(scores, &keep)?
            }
            _ => g.softmax(scores),
        };
        let ctx = g.matmul(weights, v, false, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, tq, self.dim])?;
        let output = self.output.forward(g, ps, ctx)?;
        Ok(Attended { output, weights })
    }
}

/// `[B, T, ...]` constant mask with ones on valid steps.
pub fn time_mask<F: Float>(shape: &[usize], lengths: &[usize], time_axis: usize) -> Tensor<F> {
    let outer: usize = shape[..time_axis].iter().product();
    let t = shape[time_axis];
    let inner: usize = shape[time_axis + 1..].iter().product();
    let batch = shape[0];
    let per_batch = outer / batch;
    let mut data = Vec::with_capacity(outer * t * inner);
    for o in 0..outer {
        let len = lengths[o / per_batch];
        for step in 0..t {
            let v = if step < len { F::one() } else { F::zero() };
            data.extend(std::iter::repeat_n(v, inner));
        }
    }
    Tensor::new(shape, data).expect("mask shape")
}

/// Zeroes padded time steps when any clip is shorter than the batch length.
pub fn apply_time_mask<F: Float>(g: &mut Graph<F>, x: Var, lengths: &[usize], time_axis: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if lengths.iter().all(|&l| l >= shape[time_axis]) {
        return Ok(x);
    }
    let mask = g.constant(time_mask(&shape, lengths, time_axis));
    g.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut ps = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let x = Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new(Mode::Train);
        let xv = g.constant(x.clone());
        bn.forward(&mut g, &mut ps, xv).unwrap();
        assert!((ps.get(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3 folded with momentum 0.1
        assert!((ps.get(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let mut g = Graph::new(Mode::Eval);
        let xv = g.constant(x);
        bn.forward(&mut g, &mut ps, xv).unwrap();
        assert!((ps.get(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut ps = ParamStore::<f64>::new(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut ps, "a", 6, 4),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn time_mask_layout() {
        let m = time_mask::<f64>(&[2, 3, 2], &[1, 3], 1);
        assert_eq!(m.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let m = time_mask::<f64>(&[2, 2, 3], &[2, 1], 2);
        assert_eq!(m.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
