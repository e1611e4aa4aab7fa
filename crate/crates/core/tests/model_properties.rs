use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractgraph::autodiff::{grad_check, sigmoid, Coordinates, NeighborLists, ParamSet, Tape};
use tractgraph::features::SubjectFeatures;
use tractgraph::graph::{ClusterGraph, GraphKind};
use tractgraph::model::{
    classify_head, forward, fuse, gated_attention, graph_stream, init_params, tokenize, transformer_layer,
    Baseline, Model, ModelConfig, Streams, LEAKY_SLOPE,
};

/// Narrow layers so exhaustive checks stay fast.
fn small(n: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_clusters: n,
        edgeconv_dims: [4, 5],
        stream_dim: 6,
        attention_hidden: 3,
        head_hidden: 5,
        ffn_hidden: 7,
        seed,
        ..ModelConfig::default()
    }
}

fn random_neighbors(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| (0..n).filter(|&j| j != i && rng.random_bool(0.5)).collect())
        .collect()
}

fn graph_of(neighbors: Vec<Vec<usize>>) -> ClusterGraph {
    ClusterGraph {
        kind: GraphKind::Cmg,
        n_nodes: neighbors.len(),
        k: Some(neighbors.len()),
        metric_tag: None,
        neighbors,
    }
}

fn random_x(rng: &mut ChaCha8Rng, rows: usize) -> Vec<f64> {
    (0..rows * 3).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Randomize every parameter (including biases, gains and fusion weights).
fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (_, a) in ps.iter_mut() {
        for v in a.values_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn set(ps: &mut ParamSet, name: &str, f: impl Fn(usize, usize) -> f64) {
    let a = ps.get_mut(name).unwrap();
    let cols = a.cols();
    for (idx, v) in a.values_mut().iter_mut().enumerate() {
        *v = f(idx / cols, idx % cols);
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn dense(x: &[f64], w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + o]).sum::<f64>())
        .collect()
}

/// One EdgeConv layer computed edge by edge.
fn edge_conv_oracle(x: &[Vec<f64>], w: &[f64], b: &[f64], d_out: usize, nbrs: &[Vec<usize>]) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|i| {
            let js: Vec<usize> = if nbrs[i].is_empty() { vec![i] } else { nbrs[i].clone() };
            let mut h = vec![f64::NEG_INFINITY; d_out];
            for j in js {
                let mut input = x[i].clone();
                input.extend(x[j].iter().zip(&x[i]).map(|(a, c)| a - c));
                let e: Vec<f64> = dense(&input, w, b, d_out).into_iter().map(leaky).collect();
                for (hv, ev) in h.iter_mut().zip(e) {
                    *hv = hv.max(ev);
                }
            }
            h
        })
        .collect()
}

fn rows(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

#[test]
fn edge_conv_examples() {
    // [0 | I] isolates the difference term
    let mut tape = Tape::new();
    let x = tape.constant(3, 2, vec![1.0, 2.0, 4.0, -1.0, 0.5, 0.5]).unwrap();
    let mut w = vec![0.0; 4 * 2];
    w[2 * 2] = 1.0;
    w[3 * 2 + 1] = 1.0;
    let w = tape.constant(4, 2, w).unwrap();
    let b = tape.constant(1, 2, vec![0.0, 0.0]).unwrap();
    let nb: NeighborLists = Arc::new(vec![vec![1], vec![], vec![0]]);
    let out = tape.edge_conv(x, w, b, &nb, LEAKY_SLOPE).unwrap();
    let v = tape.value(out);
    assert_eq!(&v[0..2], &[3.0, leaky(-3.0)]);
    assert_eq!(&v[2..4], &[0.0, 0.0]);
    assert_eq!(&v[4..6], &[0.5, 1.5]);
}

#[test]
fn edge_conv_matches_per_edge_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = 6;
        let (d_in, d_out) = (3, 4);
        let xv = random_x(&mut rng, n);
        let wv: Vec<f64> = (0..2 * d_in * d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        // exactly three neighbours each, plus one isolated node
        let mut nbrs: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.shuffle(&mut rng);
                others.truncate(3);
                others
            })
            .collect();
        nbrs[5].clear();
        let mut tape = Tape::new();
        let x = tape.constant(n, d_in, xv.clone()).unwrap();
        let w = tape.constant(2 * d_in, d_out, wv.clone()).unwrap();
        let b = tape.constant(1, d_out, bv.clone()).unwrap();
        let out = tape.edge_conv(x, w, b, &Arc::new(nbrs.clone()), LEAKY_SLOPE).unwrap();
        let expected = edge_conv_oracle(&rows(&xv, d_in), &wv, &bv, d_out, &nbrs);
        for (got, want) in rows(tape.value(out), d_out).iter().zip(&expected) {
            for (g, e) in got.iter().zip(want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }
}

fn graph_stream_values(config: &ModelConfig, ps: &ParamSet, nbrs: &[Vec<usize>], xv: &[f64]) -> Vec<f64> {
    let n = nbrs.len();
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let x = tape.constant(xv.len() / 3, 3, xv.to_vec()).unwrap();
    let nb: NeighborLists = Arc::new(nbrs.to_vec());
    assert_eq!(nb.len(), n);
    let out = graph_stream(&mut tape, &p, config, x, Some(&nb)).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn graph_stream_zero_weights_and_node_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 7;
    let config = small(n, 0);
    let mut ps = init_params(&config);
    let nbrs = random_neighbors(&mut rng, n);
    let xv = random_x(&mut rng, n);

    let mut zeroed = ps.clone();
    for (_, a) in zeroed.iter_mut() {
        a.values_mut().fill(0.0);
    }
    assert!(graph_stream_values(&config, &zeroed, &nbrs, &xv).iter().all(|&v| v == 0.0));

    randomize(&mut ps, &mut rng);
    let full = graph_stream_values(&config, &ps, &nbrs, &xv);
    // recompute from scratch: two edge-conv layers, concat, pointwise linear
    let v = |name: &str| ps.get(name).unwrap().values().to_vec();
    let [e1d, e2d] = config.edgeconv_dims;
    let e1 = edge_conv_oracle(&rows(&xv, 3), &v("graph.edge1.w"), &v("graph.edge1.b"), e1d, &nbrs);
    let e2 = edge_conv_oracle(&e1, &v("graph.edge2.w"), &v("graph.edge2.b"), e2d, &nbrs);
    let d = config.stream_dim;
    for i in 0..n {
        let m: Vec<f64> = e1[i].iter().chain(&e2[i]).copied().collect();
        let row: Vec<f64> = dense(&m, &v("graph.agg.w"), &v("graph.agg.b"), d).into_iter().map(leaky).collect();
        for (a, b) in row.iter().zip(&full[i * d..(i + 1) * d]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn graph_stream_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = small(n, seed);
        let mut ps = init_params(&config);
        randomize(&mut ps, &mut rng);
        let nbrs = random_neighbors(&mut rng, n);
        let xv = random_x(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0; n];
        for (a, &p) in perm.iter().enumerate() {
            inv[p] = a;
        }
        // new node a is old node perm[a]
        let px: Vec<f64> = perm.iter().flat_map(|&p| xv[3 * p..3 * p + 3].to_vec()).collect();
        let pn: Vec<Vec<usize>> = perm
            .iter()
            .map(|&p| {
                let mut v: Vec<usize> = nbrs[p].iter().map(|&j| inv[j]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let base = graph_stream_values(&config, &ps, &nbrs, &xv);
        let permuted = graph_stream_values(&config, &ps, &pn, &px);
        let d = config.stream_dim;
        for (a, &p) in perm.iter().enumerate() {
            prop_assert_eq!(&permuted[a * d..(a + 1) * d], &base[p * d..(p + 1) * d]);
        }
    }

    #[test]
    fn attention_scores_stay_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let config = small(n, seed);
        let mut ps = init_params(&config);
        randomize(&mut ps, &mut rng);
        for (_, a) in ps.iter_mut() {
            for v in a.values_mut() {
                *v *= scale;
            }
        }
        let graph = graph_of(random_neighbors(&mut rng, n));
        let model = Model::with_params(config, ps, Some(&graph)).unwrap();
        let subjects: Vec<SubjectFeatures> = (0..3).map(|s| subject(&mut rng, n, s)).collect();
        let refs: Vec<&SubjectFeatures> = subjects.iter().collect();
        for p in model.predict(&refs).unwrap() {
            for a in p.attention.unwrap() {
                prop_assert!(a > 0.0 && a < 1.0, "score {} outside (0, 1)", a);
            }
        }
    }
}

fn subject(rng: &mut ChaCha8Rng, n: usize, id: usize) -> SubjectFeatures {
    SubjectFeatures {
        subject_id: format!("s{id}"),
        label: id % 2,
        features: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        present: vec![true; n],
        normalized: true,
    }
}

#[test]
fn tokenizer_examples() {
    let n = 4;
    let config = small(n, 1);
    let d = config.stream_dim;
    let mut ps = init_params(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    randomize(&mut ps, &mut rng);
    let run = |ps: &ParamSet, xv: Vec<f64>| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let x = tape.constant(n, 3, xv).unwrap();
        let t = tokenize(&mut tape, &p, x).unwrap();
        tape.value(t).to_vec()
    };
    let mut zero = ps.clone();
    for name in ["tf.tok.w", "tf.tok.b", "tf.pos"] {
        set(&mut zero, name, |_, _| 0.0);
    }
    assert!(run(&zero, random_x(&mut rng, n)).iter().all(|&v| v == 0.0));

    // identical rows: tokens differ exactly by the per-token rows
    let same: Vec<f64> = (0..n).flat_map(|_| [0.3, 0.6, 0.9]).collect();
    let t = run(&ps, same.clone());
    let pos = ps.get("tf.pos").unwrap().values().to_vec();
    for i in 1..n {
        for c in 0..d {
            let lhs = t[i * d + c] - t[c];
            let rhs = pos[i * d + c] - pos[c];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    // gradient with respect to the positional table reaches only row 2
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let x = tape.constant(n, 3, same).unwrap();
    let t = tokenize(&mut tape, &p, x).unwrap();
    let mut mask = vec![0.0; n * d];
    mask[2 * d..3 * d].fill(1.0);
    let m = tape.constant(n * d, 1, mask).unwrap();
    let flat = tape.reshape(t, 1, n * d).unwrap();
    let loss = tape.matmul(flat, m).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(p.get("tf.pos").unwrap());
    for (idx, v) in g.iter().enumerate() {
        assert_eq!(*v, if idx / d == 2 { 1.0 } else { 0.0 });
    }
}

fn layer_norm_rows(values: &[f64], d: usize) -> Vec<f64> {
    values
        .chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(move |v| (v - mean) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

fn transformer_values(ps: &ParamSet, tv: &[f64], n: usize, d: usize, batch: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let t = tape.constant(n * batch, d, tv.to_vec()).unwrap();
    let z = transformer_layer(&mut tape, &p, t, batch).unwrap();
    tape.value(z).to_vec()
}

#[test]
fn transformer_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = small(4, 3);
    let d = config.stream_dim;
    let mut ps = init_params(&config);
    randomize(&mut ps, &mut rng);
    for ln in ["tf.ln1", "tf.ln2"] {
        set(&mut ps, &format!("{ln}.g"), |_, _| 1.0);
        set(&mut ps, &format!("{ln}.b"), |_, _| 0.0);
    }

    // all attention and FFN weights zero: LayerNorm(LayerNorm(T)), which is
    // LayerNorm(T) up to the eps term
    let mut zero = ps.clone();
    for name in ["tf.q", "tf.k", "tf.v", "tf.o", "tf.ffn1", "tf.ffn2"] {
        set(&mut zero, &format!("{name}.w"), |_, _| 0.0);
        set(&mut zero, &format!("{name}.b"), |_, _| 0.0);
    }
    let tv: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = transformer_values(&zero, &tv, 4, d, 1);
    let once = layer_norm_rows(&tv, d);
    for ((a, b), c) in z.iter().zip(layer_norm_rows(&once, d)).zip(&once) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        assert!((a - c).abs() < 1e-4);
    }

    // single token: attention output is v_1 W_o whatever Q and K are
    let one: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut wild = ps.clone();
    set(&mut wild, "tf.q.w", |r, c| (r * 7 + c) as f64);
    set(&mut wild, "tf.k.w", |r, c| (c * 3) as f64 - r as f64);
    let a = transformer_values(&ps, &one, 1, d, 1);
    let b = transformer_values(&wild, &one, 1, d, 1);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }

    // zero Q and K: uniform attention gives the mean value row for every token
    let mut uniform = ps.clone();
    for name in ["tf.q", "tf.k"] {
        set(&mut uniform, &format!("{name}.w"), |_, _| 0.0);
        set(&mut uniform, &format!("{name}.b"), |_, _| 0.0);
    }
    // with identity output projection and zero FFN, row i is
    // LN(LN(t_i + mean_j v_j)); compare with a direct computation
    set(&mut uniform, "tf.o.w", |r, c| f64::from(u8::from(r == c)));
    set(&mut uniform, "tf.o.b", |_, _| 0.0);
    for name in ["tf.ffn1", "tf.ffn2"] {
        set(&mut uniform, &format!("{name}.w"), |_, _| 0.0);
        set(&mut uniform, &format!("{name}.b"), |_, _| 0.0);
    }
    let z = transformer_values(&uniform, &tv, 4, d, 1);
    let wv = uniform.get("tf.v.w").unwrap().values().to_vec();
    let bv = uniform.get("tf.v.b").unwrap().values().to_vec();
    let v: Vec<Vec<f64>> = rows(&tv, d).iter().map(|t| dense(t, &wv, &bv, d)).collect();
    let mean: Vec<f64> = (0..d).map(|c| v.iter().map(|r| r[c]).sum::<f64>() / 4.0).collect();
    let r1: Vec<f64> = rows(&tv, d).iter().flat_map(|t| t.iter().zip(&mean).map(|(a, b)| a + b).collect::<Vec<_>>()).collect();
    let expected = layer_norm_rows(&layer_norm_rows(&r1, d), d);
    for (a, b) in z.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9);
    }

    // subjects in a batch do not attend to each other
    let two: Vec<f64> = (0..8 * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let batched = transformer_values(&ps, &two, 4, d, 2);
    let first = transformer_values(&ps, &two[..4 * d], 4, d, 1);
    let second = transformer_values(&ps, &two[4 * d..], 4, d, 1);
    for (a, b) in batched.iter().zip(first.iter().chain(&second)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fusion_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = small(3, 0);
    let d = config.stream_dim;
    let mut ps = init_params(&config);
    let fg: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ft: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fused = |ps: &ParamSet, a: &[f64], b: &[f64]| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let a = tape.constant(3, d, a.to_vec()).unwrap();
        let b = tape.constant(3, d, b.to_vec()).unwrap();
        let f = fuse(&mut tape, &p, a, b).unwrap();
        tape.value(f).to_vec()
    };
    assert_eq!(fused(&ps, &fg, &fg), fg);
    set(&mut ps, "fusion.w1", |_, _| 1.0);
    set(&mut ps, "fusion.w2", |_, _| 0.0);
    assert_eq!(fused(&ps, &fg, &ft), fg);

    // d loss / d w2 = <d loss / dF, Ft>
    set(&mut ps, "fusion.w2", |_, _| 0.3);
    let proj: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let p = ps.bind(&mut tape);
    let a = tape.constant(3, d, fg.clone()).unwrap();
    let b = tape.constant(3, d, ft.clone()).unwrap();
    let f = fuse(&mut tape, &p, a, b).unwrap();
    let flat = tape.reshape(f, 1, 3 * d).unwrap();
    let w = tape.constant(3 * d, 1, proj.clone()).unwrap();
    let loss = tape.matmul(flat, w).unwrap();
    tape.backward(loss).unwrap();
    let expected: f64 = proj.iter().zip(&ft).map(|(a, b)| a * b).sum();
    let got = tape.grad(p.get("fusion.w2").unwrap())[0];
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn gated_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = small(4, 0);
    let d = config.stream_dim;
    let mut ps = init_params(&config);
    let fv: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gate = |ps: &ParamSet| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = tape.constant(4, d, fv.clone()).unwrap();
        let (s, a) = gated_attention(&mut tape, &p, f).unwrap();
        (tape.value(s).to_vec(), tape.value(a).to_vec())
    };
    for name in ["attn.v.w", "attn.u.w", "attn.out.w", "attn.out.b"] {
        set(&mut ps, name, |_, _| 0.0);
    }
    let (s, a) = gate(&ps);
    assert!(s.iter().all(|&v| v == 0.5));
    assert!(a.iter().zip(&fv).all(|(x, y)| *x == 0.5 * y));

    set(&mut ps, "attn.out.b", |_, _| 40.0);
    let (s, a) = gate(&ps);
    assert!(s.iter().all(|&v| (1.0 - v) < 1e-15));
    assert!(a.iter().zip(&fv).all(|(x, y)| (x - y).abs() < 1e-15));

    // explicit per-cluster formula
    randomize(&mut ps, &mut rng);
    let (s, _) = gate(&ps);
    let vw = ps.get("attn.v.w").unwrap().values().to_vec();
    let uw = ps.get("attn.u.w").unwrap().values().to_vec();
    let ow = ps.get("attn.out.w").unwrap().values().to_vec();
    let ob = ps.get("attn.out.b").unwrap().values()[0];
    let h = config.attention_hidden;
    for (i, f) in rows(&fv, d).iter().enumerate() {
        let u: Vec<f64> = dense(f, &vw, &vec![0.0; h], h).into_iter().map(f64::tanh).collect();
        let g: Vec<f64> = dense(f, &uw, &vec![0.0; h], h).into_iter().map(sigmoid).collect();
        let z = ob + u.iter().chain(&g).zip(&ow).map(|(a, b)| a * b).sum::<f64>();
        assert!((s[i] - sigmoid(z)).abs() < 1e-14);
    }
}

#[test]
fn head_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4;
    let config = small(n, 0);
    let d = config.stream_dim;
    let mut ps = init_params(&config);
    let fv: Vec<f64> = (0..2 * n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let head = |ps: &ParamSet, fv: &[f64]| {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = tape.constant(2 * n, d, fv.to_vec()).unwrap();
        let l = classify_head(&mut tape, &p, f, 2).unwrap();
        tape.value(l).to_vec()
    };
    let mut zero = ps.clone();
    for name in ["head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"] {
        set(&mut zero, name, |_, _| 0.0);
    }
    assert_eq!(head(&zero, &fv), vec![0.0; 4]);

    randomize(&mut ps, &mut rng);
    let logits = head(&ps, &fv);
    let v = |name: &str| ps.get(name).unwrap().values().to_vec();
    let hh = config.head_hidden;
    for b in 0..2 {
        let flat = &fv[b * n * d..(b + 1) * n * d];
        let mut hidden = vec![0.0; hh];
        for (o, hv) in hidden.iter_mut().enumerate() {
            let mut acc = v("head.fc1.b")[o];
            for (i, x) in flat.iter().enumerate() {
                acc += x * v("head.fc1.w")[i * hh + o];
            }
            *hv = acc.max(0.0);
        }
        for c in 0..2 {
            let mut acc = v("head.fc2.b")[c];
            for (i, h) in hidden.iter().enumerate() {
                acc += h * v("head.fc2.w")[i * 2 + c];
            }
            assert!((acc - logits[b * 2 + c]).abs() < 1e-12);
        }
    }

    // the flatten keeps cluster positions: swapping rows changes logits
    let mut swapped = fv.clone();
    for c in 0..d {
        swapped.swap(c, d + c);
    }
    assert_ne!(head(&ps, &swapped)[..2], logits[..2]);
}

fn logits_of(model: &Model, subjects: &[&SubjectFeatures]) -> Vec<[f64; 2]> {
    model.predict(subjects).unwrap().into_iter().map(|p| p.logits).collect()
}

#[test]
fn ablations_isolate_their_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 6;
    let graph = graph_of(random_neighbors(&mut rng, n));
    let subjects: Vec<SubjectFeatures> = (0..4).map(|s| subject(&mut rng, n, s)).collect();
    let refs: Vec<&SubjectFeatures> = subjects.iter().collect();

    let both = ModelConfig {
        use_attention: false,
        ..small(n, 2)
    };
    let graph_only = ModelConfig {
        streams: Streams::Graph,
        ..both.clone()
    };
    let mut ps = init_params(&both);
    randomize(&mut ps, &mut rng);
    let mut g_params = ParamSet::new();
    for (name, a) in ps.iter().filter(|(n, _)| !n.starts_with("tf.") && !n.starts_with("fusion.")) {
        g_params.insert(name, a.clone());
    }
    let g = Model::with_params(graph_only, g_params, Some(&graph)).unwrap();
    let base = logits_of(&g, &refs);

    // fused model with w1 = 1, w2 = 0 reproduces graph-only bit for bit,
    // whatever the transformer weights are
    let mut fused = ps.clone();
    set(&mut fused, "fusion.w1", |_, _| 1.0);
    set(&mut fused, "fusion.w2", |_, _| 0.0);
    let m = Model::with_params(both.clone(), fused.clone(), Some(&graph)).unwrap();
    assert_eq!(logits_of(&m, &refs), base);
    set(&mut fused, "tf.v.w", |r, c| (r + c) as f64 * 0.1);
    let m = Model::with_params(both, fused, Some(&graph)).unwrap();
    assert_eq!(logits_of(&m, &refs), base);
}

#[test]
fn baseline_and_transformer_only_need_no_graph() {
    let base = ModelConfig {
        baseline: Baseline::PointwiseCnn,
        ..small(5, 0)
    }
    .validated()
    .unwrap();
    assert_eq!(base.streams, Streams::Graph);
    assert!(!base.use_attention);
    assert!(Model::new(base, None).is_ok());
    let tf = ModelConfig {
        streams: Streams::Transformer,
        ..small(5, 0)
    };
    assert!(Model::new(tf, None).is_ok());
    assert!(Model::new(small(5, 0), None).is_err());
    let wrong = graph_of(vec![vec![]; 4]);
    let err = Model::new(small(5, 0), Some(&wrong)).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('5'), "{err}");
}

#[test]
fn full_model_gradient_check() {
    for n in [2, 4, 8] {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * n as u64 + seed);
            let config = small(n, seed).validated().unwrap();
            let mut ps = init_params(&config);
            randomize(&mut ps, &mut rng);
            let nbrs: NeighborLists = Arc::new(random_neighbors(&mut rng, n));
            let xv = random_x(&mut rng, 3 * n);
            let labels = [0, 1, 1];
            let report = grad_check(
                |tape, p| {
                    let x = tape.constant(3 * n, 3, xv.clone())?;
                    let out = forward(tape, p, &config, Some(&nbrs), x)?;
                    tape.cross_entropy_mean(out.logits, &labels)
                },
                &ps,
                1e-4,
                Coordinates::All,
            )
            .unwrap();
            assert!(report.checked > 0);
            assert!(
                report.max_relative_error < 1e-4,
                "N={n} seed={seed}: {:?} at {:?}",
                report.max_relative_error,
                report.worst
            );
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 5;
    let graph = graph_of(random_neighbors(&mut rng, n));
    let config = small(n, 3);
    let mut ps = init_params(&config);
    randomize(&mut ps, &mut rng);
    let model = Model::with_params(config, ps, Some(&graph)).unwrap();
    let subjects: Vec<SubjectFeatures> = (0..4).map(|s| subject(&mut rng, n, s)).collect();
    let refs: Vec<&SubjectFeatures> = subjects.iter().collect();
    let mut tape = Tape::new();
    let (bound, fwd) = model.forward_on(&mut tape, &refs).unwrap();
    let loss = tape.cross_entropy_mean(fwd.logits, &[0, 1, 0, 1]).unwrap();
    tape.backward(loss).unwrap();
    for (name, var) in bound.iter() {
        assert!(tape.grad(var).iter().any(|&g| g != 0.0), "`{name}` has an all-zero gradient");
    }
}
