mod common;

use common::{attention_gap, gat_gap, perturbation_reach, uniform, ATTENTION_CASES};
use lipfuse::config::FusionStrategy;
use lipfuse::fusion::Fusion;
use lipfuse::geo::{build_knn_graph, positional_encoding, GatLayer};
use lipfuse::tensor::{Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn attention_matches_dense_oracle() {
    for case in 0..ATTENTION_CASES.len() {
        let gap = attention_gap(case);
        assert!(gap < 1e-8, "case {case}: {gap}");
    }
}

#[test]
fn gat_matches_dense_oracle() {
    let gap = gat_gap(3);
    assert!(gap < 1e-8, "{gap}");
}

#[test]
fn gat_ignores_non_neighbours() {
    let n = 8;
    let mut ps = ParamStore::<f64>::new(4);
    let gat = GatLayer::new(&mut ps, "gat", 2, 4, 0.2);
    let pts: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, 0.0]).collect();
    let graph = build_knn_graph(&pts, 2).unwrap();
    let x = uniform(10, n * 2);
    let run = |x: &[f64]| {
        let mut g = Graph::new(Mode::Eval);
        let h = g.constant(Tensor::from_f64(&[1, n, 2], x).unwrap());
        let out = gat.forward(&mut g, &ps, h, &graph.adjacency()).unwrap();
        g.value(out.features).to_vec()
    };
    let base = run(&x);
    let mut moved = x.clone();
    moved[7 * 2] += 3.0;
    let after = run(&moved);
    // node 0 hears from 0, 1, 2 only
    assert_eq!(&base[..4], &after[..4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_graph_has_k_plus_self_in_edges(seed in 0u64..10_000, n in 6usize..40, k in 1usize..6) {
        prop_assume!(k < n);
        let pts: Vec<[f64; 2]> = uniform(seed, 2 * n).chunks(2).map(|c| [c[0], c[1]]).collect();
        let g = build_knn_graph(&pts, k).unwrap();
        for i in 0..n {
            let nb = g.in_neighbors(i);
            prop_assert_eq!(nb.len(), k + 1);
            prop_assert!(nb.contains(&i));
            let d = |j: usize| (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
            let worst_in = nb.iter().filter(|&&j| j != i).map(|&j| d(j)).fold(0.0, f64::max);
            for j in (0..n).filter(|j| !nb.contains(j)) {
                prop_assert!(d(j) >= worst_in);
            }
        }
    }

    #[test]
    fn knn_graph_is_invariant_to_similarity_transforms(
        seed in 0u64..10_000,
        angle in -3.1f64..3.1,
        scale in 0.2f64..5.0,
        dx in -10.0f64..10.0,
    ) {
        let pts: Vec<[f64; 2]> = uniform(seed, 40).chunks(2).map(|c| [c[0], c[1]]).collect();
        let (s, c) = angle.sin_cos();
        let moved: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| [scale * (c * p[0] - s * p[1]) + dx, scale * (s * p[0] + c * p[1]) - dx])
            .collect();
        prop_assert_eq!(
            build_knn_graph(&pts, 5).unwrap().edges,
            build_knn_graph(&moved, 5).unwrap().edges
        );
    }
}

#[test]
fn knn_ties_prefer_lower_index() {
    let pts = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
    let g = build_knn_graph(&pts, 2).unwrap();
    assert_eq!(g.in_neighbors(0), vec![0, 1, 2]);
}

#[test]
fn positional_encoding_table() {
    let pe = positional_encoding::<f64>(50, 16);
    let v = pe.data();
    assert_eq!(v[0], 0.0);
    assert_eq!(v[1], 1.0);
    let t = 7.0f64;
    let expect = (t / 10000f64.powf(4.0 / 16.0)).sin();
    assert!((v[7 * 16 + 4] - expect).abs() < 1e-12);
    for row in v.chunks(16) {
        for pair in row.chunks(2) {
            assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
        }
    }
}

fn cross_gradient(strategy: FusionStrategy) -> f64 {
    let (t, d) = (5, 8);
    let mut ps = ParamStore::<f64>::new(9);
    let fusion = Fusion::new(&mut ps, "f", strategy, d, 2).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(Tensor::from_f64(&[1, t, d], &uniform(1, t * d)).unwrap(), true);
    let xg = g.input(Tensor::from_f64(&[1, t, d], &uniform(2, t * d)).unwrap(), true);
    let out = fusion.forward(&mut g, &ps, xv, xg, None).unwrap();
    let left = g.narrow(out.fused, 2, 0, d).unwrap();
    let loss = g.sum(left);
    let grads = g.backward(loss).unwrap();
    grads.input(xg).map_or(0.0, |v| v.iter().map(|x| x.abs()).sum())
}

#[test]
fn only_cross_attention_couples_the_halves() {
    assert_eq!(cross_gradient(FusionStrategy::Concat), 0.0);
    assert_eq!(cross_gradient(FusionStrategy::SingleAtt), 0.0);
    assert!(cross_gradient(FusionStrategy::FusionNet) > 1e-6);
}

#[test]
fn fusion_attention_rows_are_stochastic() {
    let (t, d) = (6, 8);
    let mut ps = ParamStore::<f64>::new(2);
    let fusion = Fusion::new(&mut ps, "f", FusionStrategy::FusionNet, d, 4).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(Tensor::from_f64(&[2, t, d], &uniform(3, 2 * t * d)).unwrap());
    let xg = g.constant(Tensor::from_f64(&[2, t, d], &uniform(4, 2 * t * d)).unwrap());
    let out = fusion.forward(&mut g, &ps, xv, xg, Some(&[6, 3])).unwrap();
    for a in out.attention {
        assert_eq!(g.shape(a), &[2, 4, t, t]);
        let w = g.value(a);
        for (r, row) in w.chunks(t).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if r >= 4 * t {
                assert!(row[3..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn decoder_perturbation_stays_within_45_steps() {
    let (back, ahead) = perturbation_reach(false);
    assert!(back <= 45 && ahead <= 45, "{back} {ahead}");
    assert_eq!(perturbation_reach(true), (45, 45));
}
