//! Brute-force oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use lipfuse::decoder::Decoder;
use lipfuse::geo::{build_knn_graph, GatLayer};
use lipfuse::nn::{Linear, MultiHeadAttention};
use lipfuse::rng;
use lipfuse::tensor::{Graph, Mode, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "test-data");
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn integer_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f64::from(rng.random_range(-4i32..=4))).collect()).unwrap()
}

/// Nested-loop 3-d convolution over `[N, C, D, H, W]`.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> (Vec<usize>, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let out: Vec<usize> = (0..3)
        .map(|a| (xs[a + 2] + 2 * pad[a] - dil[a] * (ws[a + 2] - 1) - 1) / stride[a] + 1)
        .collect();
    let mut y = Vec::new();
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..xs[1] {
                            for a in 0..ws[2] {
                                for b in 0..ws[3] {
                                    for c in 0..ws[4] {
                                        let z = (od * stride[0] + a * dil[0]) as isize - pad[0] as isize;
                                        let yy = (oh * stride[1] + b * dil[1]) as isize - pad[1] as isize;
                                        let xx = (ow * stride[2] + c * dil[2]) as isize - pad[2] as isize;
                                        if z < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                        if z >= xs[2] || yy >= xs[3] || xx >= xs[4] {
                                            continue;
                                        }
                                        acc += x.at(&[n, ci, z, yy, xx]) * w.at(&[co, ci, a, b, c]);
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    (vec![xs[0], ws[0], out[0], out[1], out[2]], y)
}

/// One random conv3d instance; true when shape and values match exactly.
pub fn conv3d_case(rng: &mut ChaCha8Rng) -> bool {
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
    let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
    let pad = [rng.random_range(0..=2), rng.random_range(0..=2), rng.random_range(0..=2)];
    let dims = [rng.random_range(3..=6), rng.random_range(3..=7), rng.random_range(3..=7)];
    let x = integer_tensor(rng, &[2, cin, dims[0], dims[1], dims[2]]);
    let w = integer_tensor(rng, &[cout, cin, k[0], k[1], k[2]]);
    let b = integer_tensor(rng, &[cout]);
    let (shape, expected) = naive_conv(&x, &w, Some(b.data()), stride, pad, [1, 1, 1]);
    let mut g = Graph::new(Mode::Eval);
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.conv(xv, wv, Some(bv), stride, pad, [1, 1, 1]).unwrap();
    g.shape(y) == shape.as_slice() && g.value(y) == expected.as_slice()
}

pub fn conv2d_case(rng: &mut ChaCha8Rng) -> bool {
    let cin = rng.random_range(1..=4);
    let cout = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let stride = rng.random_range(1..=3);
    let pad = rng.random_range(0..=3);
    let (h, w) = (rng.random_range(k..=9), rng.random_range(k..=9));
    let x = integer_tensor(rng, &[2, cin, h, w]);
    let wt = integer_tensor(rng, &[cout, cin, k, k]);
    let x5 = x.clone().reshape(&[2, cin, 1, h, w]).unwrap();
    let w5 = wt.clone().reshape(&[cout, cin, 1, k, k]).unwrap();
    let (shape, expected) = naive_conv(&x5, &w5, None, [1, stride, stride], [0, pad, pad], [1, 1, 1]);
    let mut g = Graph::new(Mode::Eval);
    let (xv, wv) = (g.constant(x), g.constant(wt));
    let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
    g.shape(y) == [shape[0], shape[1], shape[3], shape[4]] && g.value(y) == expected.as_slice()
}

/// Length-preserving dilated conv1d instance.
pub fn conv1d_case(rng: &mut ChaCha8Rng) -> bool {
    let cin = rng.random_range(1..=4);
    let cout = rng.random_range(1..=4);
    let k = [3, 5, 7][rng.random_range(0..3)];
    let dil = [1, 2, 4, 8][rng.random_range(0..4)];
    let pad = dil * (k - 1) / 2;
    let t = rng.random_range(1..=40);
    let x = integer_tensor(rng, &[2, cin, t]);
    let wt = integer_tensor(rng, &[cout, cin, k]);
    let x5 = x.clone().reshape(&[2, cin, t, 1, 1]).unwrap();
    let w5 = wt.clone().reshape(&[cout, cin, k, 1, 1]).unwrap();
    let (shape, expected) = naive_conv(&x5, &w5, None, [1, 1, 1], [pad, 0, 0], [dil, 1, 1]);
    let mut g = Graph::new(Mode::Eval);
    let (xv, wv) = (g.constant(x), g.constant(wt));
    let y = g.conv1d(xv, wv, None, dil, pad).unwrap();
    shape[2] == t && g.shape(y) == [2, cout, t] && g.value(y) == expected.as_slice()
}

pub fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|o| b.map_or(0.0, |b| b[o]) + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

/// Brute-force multi-head attention for one batch element.
fn dense_attention(
    ps: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    key_len: usize,
) -> Vec<Vec<f64>> {
    let d = mha.dim;
    let dh = d / mha.heads;
    let proj = |l: &Linear, x: &Vec<f64>| affine(ps.get(l.weight).data(), l.bias.map(|b| ps.get(b).data()), x, d);
    let qp: Vec<Vec<f64>> = q.iter().map(|x| proj(&mha.query, x)).collect();
    let kp: Vec<Vec<f64>> = k.iter().map(|x| proj(&mha.key, x)).collect();
    let vp: Vec<Vec<f64>> = v.iter().map(|x| proj(&mha.value, x)).collect();
    qp.iter()
        .map(|qi| {
            let mut ctx = vec![0.0; d];
            for h in 0..mha.heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..key_len)
                    .map(|j| {
                        qi[r.clone()].iter().zip(&kp[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        ctx[c] += ej / z * vp[j][c];
                    }
                }
            }
            proj(&mha.output, &ctx)
        })
        .collect()
}

fn rows(v: &[f64], t: usize, d: usize, b: usize) -> Vec<Vec<f64>> {
    (0..t).map(|i| v[(b * t + i) * d..(b * t + i + 1) * d].to_vec()).collect()
}

/// Attention settings `(heads, dim, T_q, T_k, key lengths for a batch of 2)`.
pub const ATTENTION_CASES: [(usize, usize, usize, usize, [usize; 2]); 4] =
    [(1, 4, 3, 3, [3, 3]), (2, 8, 4, 5, [5, 2]), (4, 8, 5, 5, [4, 1]), (8, 16, 2, 6, [6, 6])];

/// Largest absolute gap between the layer and the dense oracle.
pub fn attention_gap(case: usize) -> f64 {
    let (heads, dim, tq, tk, lengths) = ATTENTION_CASES[case];
    let mut ps = ParamStore::<f64>::new(case as u64);
    let mha = MultiHeadAttention::new(&mut ps, "a", dim, heads).unwrap();
    for (i, id) in ps.learnable().collect::<Vec<_>>().into_iter().enumerate() {
        let n = ps.get(id).numel();
        ps.set_data(id, &uniform(100 + i as u64, n)).unwrap();
    }
    let qv = uniform(1, 2 * tq * dim);
    let kv = uniform(2, 2 * tk * dim);
    let vv = uniform(3, 2 * tk * dim);
    let mut g = Graph::new(Mode::Eval);
    let q = g.constant(Tensor::from_f64(&[2, tq, dim], &qv).unwrap());
    let k = g.constant(Tensor::from_f64(&[2, tk, dim], &kv).unwrap());
    let v = g.constant(Tensor::from_f64(&[2, tk, dim], &vv).unwrap());
    let out = mha.forward(&mut g, &ps, q, k, v, Some(&lengths)).unwrap();
    let got = g.value(out.output);
    let mut gap = 0f64;
    for b in 0..2 {
        let want = dense_attention(
            &ps,
            &mha,
            &rows(&qv, tq, dim, b),
            &rows(&kv, tk, dim, b),
            &rows(&vv, tk, dim, b),
            lengths[b],
        );
        for (i, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                gap = gap.max((got[(b * tq + i) * dim + c] - w).abs());
            }
        }
    }
    gap
}

/// Largest absolute gap between a GAT layer on a random kNN graph and the
/// dense per-node formula.
pub fn gat_gap(seed: u64) -> f64 {
    let (n, fin, fout, slope) = (9, 3, 5, 0.2);
    let mut ps = ParamStore::<f64>::new(seed);
    let gat = GatLayer::new(&mut ps, "gat", fin, fout, slope);
    let att = uniform(seed + 7, 2 * fout);
    ps.set_data(gat.attention, &att).unwrap();
    let w = ps.get(gat.weight).data().to_vec();
    let pts: Vec<[f64; 2]> = uniform(seed + 8, 2 * n).chunks(2).map(|c| [c[0], c[1]]).collect();
    let graph = build_knn_graph(&pts, 4).unwrap();
    let x = uniform(seed + 9, n * fin);

    let mut g = Graph::new(Mode::Eval);
    let h = g.constant(Tensor::from_f64(&[1, n, fin], &x).unwrap());
    let out = gat.forward(&mut g, &ps, h, &graph.adjacency()).unwrap();
    let got = g.value(out.features);

    let wh: Vec<Vec<f64>> = (0..n).map(|i| affine(&w, None, &x[i * fin..(i + 1) * fin], fout)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let leaky = |v: f64| if v > 0.0 { v } else { slope * v };
    let mut gap = 0f64;
    for i in 0..n {
        let nbrs = graph.in_neighbors(i);
        assert!(nbrs.contains(&i));
        let e: Vec<f64> = nbrs
            .iter()
            .map(|&j| leaky(dot(&att[..fout], &wh[i]) + dot(&att[fout..], &wh[j])))
            .collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
        for c in 0..fout {
            let agg: f64 = nbrs.iter().zip(&e).map(|(&j, ej)| (ej - m).exp() / z * wh[j][c]).sum();
            let want = if agg > 0.0 { agg } else { agg.exp() - 1.0 };
            gap = gap.max((got[i * fout + c] - want).abs());
        }
    }
    gap
}

/// Steps before and after a bumped input frame where pre-pooling decoder
/// features change. `active` lifts every batch-norm shift so no ReLU is dead.
pub fn perturbation_reach(active: bool) -> (usize, usize) {
    let (t, c, at) = (120, 3, 60);
    let mut ps = ParamStore::<f64>::new(5);
    let dec = Decoder::new(&mut ps, "d", c, 2, 4);
    assert_eq!(dec.receptive_half_span(), 45);
    if active {
        for id in ps.learnable().collect::<Vec<_>>() {
            if ps.name(id).ends_with("bn.beta") {
                let n = ps.get(id).numel();
                ps.set_data(id, &vec![50.0; n]).unwrap();
            }
        }
    }
    let base = uniform(11, t * c);
    let run = |x: &[f64], ps: &mut ParamStore<f64>| {
        let mut g = Graph::new(Mode::Eval);
        let v = g.constant(Tensor::from_f64(&[1, t, c], x).unwrap());
        let out = dec.forward(&mut g, ps, v, &[t]).unwrap();
        g.value(out.features).to_vec()
    };
    let a = run(&base, &mut ps);
    let mut bumped = base.clone();
    bumped[at * c + 1] += 1.0;
    let b = run(&bumped, &mut ps);
    let changed: Vec<usize> = (0..t).filter(|&s| (0..c).any(|k| a[s * c + k] != b[s * c + k])).collect();
    (at - changed[0], changed[changed.len() - 1] - at)
}
