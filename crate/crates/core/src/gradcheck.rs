//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use crate::config::FusionStrategy;
use crate::decoder::MsTcnLayer;
use crate::error::Result;
use crate::fusion::Fusion;
use crate::geo::{build_knn_graph, EncoderLayer, GatLayer};
use crate::nn::Linear;
use crate::rng;
use crate::tensor::{Graph, Init, Mode, ParamId, ParamStore, Tensor, Var};

/// Relative error with the floor used throughout: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name, flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` for selected coordinates.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares backward against central differences on `samples` randomly
/// chosen learnable scalars of `store` (all of them if there are fewer).
///
/// `build` must run a deterministic forward pass and return the scalar loss.
pub fn check_params<B>(
    name: &str,
    store: &mut ParamStore<f64>,
    mut build: B,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (mut g, loss) = build(store)?;
    let grads = g.backward(loss)?;

    let entries: Vec<(ParamId, usize)> = store
        .learnable()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let mut rng = rng::stream(seed, "gradcheck");
    let chosen: Vec<usize> = if entries.len() <= samples {
        (0..entries.len()).collect()
    } else {
        sample(&mut rng, entries.len(), samples).into_vec()
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let (g, loss) = build(store)?;
        Ok(g.value(loss)[0])
    };
    for &e in &chosen {
        let (id, i) = entries[e];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - step;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.param(id).map_or(0.0, |g| g[i]);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            if err >= report.max_rel_err {
                report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Scale of the random loss weights. Keeps the roundoff of structurally
/// zero gradients (attention key biases) below the `1e-8` floor.
pub const SUITE_LOSS_SCALE: f64 = 1e-3;
pub const SUITE_MODULES: [&str; 9] = [
    "stem3d",
    "residual_block",
    "gat_layer",
    "transformer_encoder",
    "fusion_concat",
    "fusion_single_att",
    "fusion_fusionnet",
    "ms_tcn",
    "classifier_head",
];

fn gaussian(rng: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Moves every learnable tensor off its structured initialisation (unit
/// gains, zero biases) so no entry sits at a symmetric point.
fn jitter(ps: &mut ParamStore<f64>, rng: &mut rng::Rng) -> Result<()> {
    let ids: Vec<ParamId> = ps.learnable().collect();
    for id in ids {
        let noise = gaussian(rng, ps.get(id).numel(), 0.1);
        let data: Vec<f64> = ps.get(id).data().iter().zip(&noise).map(|(a, b)| a + b).collect();
        ps.set_data(id, &data)?;
    }
    Ok(())
}

/// `loss = sum(out * R)` for a fixed random `R`.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.clone());
    let y = g.mul(out, r)?;
    Ok(g.sum(y))
}

/// Runs the finite-difference check on one module. The module inputs are
/// registered as learnable tensors so input gradients are sampled too.
fn check_module<M>(
    name: &str,
    seed: u64,
    samples: usize,
    setup: impl FnOnce(&mut ParamStore<f64>) -> Result<M>,
    input_shapes: &[&[usize]],
    out_shape: &[usize],
    forward: impl Fn(&M, &mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rng = rng::stream(seed, &format!("gradcheck/{name}"));
    let mut store = ParamStore::<f64>::new(seed);
    let module = setup(&mut store)?;
    jitter(&mut store, &mut rng)?;
    let inputs = input_shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let id = store.param(&format!("input{i}"), shape, Init::Zeros);
            let n = store.get(id).numel();
            store.set_data(id, &gaussian(&mut rng, n, 1.0))?;
            Ok(id)
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = out_shape.iter().product();
    let weights = Tensor::from_f64(out_shape, &gaussian(&mut rng, n, SUITE_LOSS_SCALE))?;
    check_params(
        name,
        &mut store,
        |ps| {
            let mut g = Graph::new(Mode::Train);
            let xs: Vec<Var> = inputs.iter().map(|&id| g.param(ps, id)).collect();
            let out = forward(&module, &mut g, ps, &xs)?;
            let loss = weighted_sum(&mut g, out, &weights)?;
            Ok((g, loss))
        },
        samples,
        SUITE_STEP,
        seed,
    )
}

/// Finite-difference check of one named module of the network; see
/// [`SUITE_MODULES`]. Modules with batch norm run in training mode (batch
/// statistics); dropout is disabled.
pub fn check_named_module(name: &str, samples: usize, seed: u64) -> Result<GradCheckReport> {
    match name {
        "stem3d" => check_module(
            name,
            seed,
            samples,
            |ps| Ok(crate::visual::Stem::new(ps, "stem", 2)),
            &[&[2, 1, 3, 12, 12]],
            &[2, 2, 3, 3, 3],
            |m, g, ps, x| m.forward(g, ps, x[0]),
        ),
        "residual_block" => check_module(
            name,
            seed,
            samples,
            |ps| Ok(crate::visual::ResidualBlock::new(ps, "block", 4, 8, 2)),
            &[&[3, 4, 6, 6]],
            &[3, 8, 3, 3],
            |m, g, ps, x| m.forward(g, ps, x[0]),
        ),
        "gat_layer" => {
            let nodes = 10;
            let mut rng = rng::stream(seed, "gradcheck/gat_points");
            let mut adjacency = Vec::new();
            for _ in 0..2 {
                let pts: Vec<[f64; 2]> = (0..nodes)
                    .map(|_| {
                        let v = gaussian(&mut rng, 2, 1.0);
                        [v[0], v[1]]
                    })
                    .collect();
                adjacency.extend(build_knn_graph(&pts, 5)?.adjacency());
            }
            check_module(
                name,
                seed,
                samples,
                |ps| Ok(GatLayer::new(ps, "gat", 16, 64, 0.2)),
                &[&[2, nodes, 16]],
                &[2, nodes, 64],
                move |m, g, ps, x| Ok(m.forward(g, ps, x[0], &adjacency)?.features),
            )
        }
        "transformer_encoder" => check_module(
            name,
            seed,
            samples,
            |ps| EncoderLayer::new(ps, "enc", 8, 2, 16, 0.0),
            &[&[2, 5, 8]],
            &[2, 5, 8],
            |m, g, ps, x| m.forward(g, ps, x[0], Some(&[5, 3])),
        ),
        "fusion_concat" | "fusion_single_att" | "fusion_fusionnet" => {
            let strategy = match name {
                "fusion_concat" => FusionStrategy::Concat,
                "fusion_single_att" => FusionStrategy::SingleAtt,
                _ => FusionStrategy::FusionNet,
            };
            check_module(
                name,
                seed,
                samples,
                |ps| Fusion::new(ps, "fusion", strategy, 8, 2),
                &[&[2, 8, 8], &[2, 8, 8]],
                &[2, 8, 16],
                |m, g, ps, x| Ok(m.forward(g, ps, x[0], x[1], Some(&[8, 6]))?.fused),
            )
        }
        "ms_tcn" => check_module(
            name,
            seed,
            samples,
            |ps| Ok(MsTcnLayer::new(ps, "tcn", 4, 3, 2)),
            &[&[2, 4, 12]],
            &[2, 4, 12],
            |m, g, ps, x| m.forward(g, ps, x[0], &[12, 9]),
        ),
        "classifier_head" => check_module(
            name,
            seed,
            samples,
            |ps| Ok(Linear::new(ps, "head", 16, 12, true)),
            &[&[2, 6, 16]],
            &[2, 12],
            |m, g, ps, x| {
                let pooled = g.masked_time_mean(x[0], &[6, 4])?;
                m.forward(g, ps, pooled)
            },
        ),
        other => Err(crate::Error::Config(format!(
            "unknown gradcheck module `{other}`; expected one of {}",
            SUITE_MODULES.join(", ")
        ))),
    }
}

/// Every module of [`SUITE_MODULES`], in order.
pub fn module_suite(samples: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    SUITE_MODULES.iter().map(|m| check_named_module(m, samples, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], &[0, 1], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }

    #[test]
    #[ignore = "slow; the acceptance suite runs it"]
    fn suite_smoke() {
        for r in module_suite(200, 0).unwrap() {
            println!("{} {} {:.3e} {:?}", r.name, r.checked, r.max_rel_err, r.worst);
        }
    }
}
