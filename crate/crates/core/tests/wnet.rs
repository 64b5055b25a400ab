#![allow(clippy::needless_range_loop)]

use hiore::nn::{ParameterStore, Tape, Tensor};
use hiore::wnet::{pad_for_depth, valid_extent, Fusion, WNet, WNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 4;
const K: usize = 2;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small(depth: usize) -> WNetConfig {
    WNetConfig {
        depth,
        base_channels: 2,
        out_channels: 3,
        ..WNetConfig::default()
    }
}

fn build(cfg: &WNetConfig, seed: u64) -> (WNet, ParameterStore<f64>) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = WNet::new(cfg, V, K, &mut store, &mut rng).unwrap();
    (net, store)
}

fn run(net: &WNet, store: &ParameterStore<f64>, v: &Tensor<f64>, k: Option<&Tensor<f64>>, n: usize) -> Tensor<f64> {
    let mut tape = Tape::new(store);
    let vv = tape.constant(v.clone()).unwrap();
    let kv = k.map(|k| tape.constant(k.clone()).unwrap());
    let u = net.forward_within(&mut tape, vv, kv, n).unwrap();
    tape.value(u).clone()
}

/// Copies an `[n, n, c]` table into the top-left of an `[m, m, c]` one whose
/// other cells hold `fill`.
fn embed(x: &Tensor<f64>, m: usize, fill: f64) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[2]);
    let mut out = vec![fill; m * m * c];
    for i in 0..n {
        for j in 0..n {
            out[(i * m + j) * c..(i * m + j + 1) * c].copy_from_slice(&x.data()[(i * n + j) * c..(i * n + j + 1) * c]);
        }
    }
    Tensor::new(vec![m, m, c], out).unwrap()
}

#[test]
fn pad_examples() {
    assert_eq!(pad_for_depth(8, 2), 8);
    assert_eq!(pad_for_depth(5, 2), 8);
    assert_eq!(pad_for_depth(1, 2), 4);
    assert_eq!(pad_for_depth(9, 3), 16);
    assert_eq!(valid_extent(5, 1), 3);
    assert_eq!(valid_extent(5, 2), 2);
}

#[test]
fn zero_parameters_give_zero_output() {
    let (net, mut store) = build(&small(2), 1);
    store.zero_prefix("wnet.");
    let u = run(&net, &store, &random(&[5, 5, V], 2), Some(&random(&[5, 5, K], 3)), 5);
    assert!(u.data().iter().all(|&x| x == 0.0));
}

#[test]
fn output_shape_for_every_length() {
    for fusion in [Fusion::Dual, Fusion::Single] {
        for depth in [1, 2, 3] {
            let cfg = WNetConfig { fusion, ..small(depth) };
            let (net, store) = build(&cfg, depth as u64);
            for n in 1..=12 {
                let u = run(&net, &store, &random(&[n, n, V], 1), Some(&random(&[n, n, K], 2)), n);
                assert_eq!(u.shape(), [n, n, 3], "{fusion:?} depth {depth} n {n}");
                assert!(u.data().iter().all(|x| x.is_finite()));
            }
        }
    }
}

#[test]
fn padded_input_gives_the_same_valid_region() {
    let (net, store) = build(&small(2), 4);
    for n in [1, 3, 5, 8] {
        let v = random(&[n, n, V], 10 + n as u64);
        let k = random(&[n, n, K], 20 + n as u64);
        let plain = run(&net, &store, &v, Some(&k), n);
        for (m, fill) in [(n + 3, 0.0), (pad_for_depth(n, 2) + 4, 0.0), (n + 5, 7.5)] {
            let padded = run(&net, &store, &embed(&v, m, fill), Some(&embed(&k, m, fill)), n);
            assert_eq!(padded, plain, "n {n} m {m} fill {fill}");
        }
    }
}

/// Boolean dependency propagation mirroring the network's layout: which
/// output cells can see input cell `(a, b)`.
fn influence(n: usize, depth: usize, a: usize, b: usize) -> Vec<Vec<bool>> {
    type Grid = Vec<Vec<bool>>;
    fn mask(g: &mut Grid, valid: usize) {
        for (i, row) in g.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c &= i < valid && j < valid;
            }
        }
    }
    fn conv(g: &Grid, valid: usize) -> Grid {
        let s = g.len();
        let mut out = vec![vec![false; s]; s];
        for i in 0..s {
            for j in 0..s {
                out[i][j] = (i.saturating_sub(1)..(i + 2).min(s))
                    .any(|r| (j.saturating_sub(1)..(j + 2).min(s)).any(|q| g[r][q]));
            }
        }
        mask(&mut out, valid);
        out
    }
    fn block(g: &Grid, valid: usize) -> Grid {
        conv(&conv(g, valid), valid)
    }
    let size = pad_for_depth(n, depth);
    let mut x = vec![vec![false; size]; size];
    x[a][b] = true;
    let mut skips = Vec::new();
    for l in 0..depth {
        let e = valid_extent(n, l);
        x = block(&x, e);
        skips.push(x.clone());
        let half = x.len() / 2;
        x = (0..half)
            .map(|i| (0..half).map(|j| x[2 * i][2 * j] || x[2 * i + 1][2 * j] || x[2 * i][2 * j + 1] || x[2 * i + 1][2 * j + 1]).collect())
            .collect();
    }
    x = block(&x, valid_extent(n, depth));
    for l in (0..depth).rev() {
        let e = valid_extent(n, l);
        let s = x.len() * 2;
        let mut up: Grid = (0..s).map(|i| (0..s).map(|j| x[i / 2][j / 2] || skips[l][i][j]).collect()).collect();
        mask(&mut up, e);
        x = block(&up, e);
    }
    x.truncate(n);
    x.iter_mut().for_each(|r| r.truncate(n));
    x
}

#[test]
fn perturbations_stay_inside_the_receptive_field() {
    for (depth, n) in [(1, 14), (2, 32), (2, 7)] {
        let cfg = WNetConfig {
            use_attention_input: false,
            ..small(depth)
        };
        let (net, store) = build(&cfg, 5);
        let v = random(&[n, n, V], 6);
        let base = run(&net, &store, &v, None, n);
        let mut outside = 0;
        for (a, b) in [(0, 0), (n - 1, n - 1), (n / 2, 1), (2, n - 2)] {
            let mut pv = v.clone();
            for ch in 0..V {
                pv.data_mut()[(a * n + b) * V + ch] += 0.5;
            }
            let moved = run(&net, &store, &pv, None, n);
            let reach = influence(n, depth, a, b);
            assert!(reach[a][b]);
            for i in 0..n {
                for j in 0..n {
                    let cell = |t: &Tensor<f64>| t.data()[(i * n + j) * 3..(i * n + j + 1) * 3].to_vec();
                    if reach[i][j] {
                        continue;
                    }
                    outside += 1;
                    assert_eq!(cell(&moved), cell(&base), "depth {depth} n {n} ({a}, {b}) leaked into ({i}, {j})");
                }
            }
            let at = |t: &Tensor<f64>| t.data()[(a * n + b) * 3..(a * n + b + 1) * 3].to_vec();
            assert_ne!(at(&moved), at(&base));
        }
        if n >= 14 {
            assert!(outside > 0, "oracle field covers the whole table at n {n}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for cfg in [
        small(2),
        WNetConfig {
            fusion: Fusion::Single,
            ..small(2)
        },
        WNetConfig {
            enabled: false,
            ..small(2)
        },
    ] {
        let (net, store) = build(&cfg, 7);
        let n = 6;
        let mut tape = Tape::new(&store);
        let v = tape.constant(random(&[n, n, V], 1)).unwrap();
        let k = tape.constant(random(&[n, n, K], 2)).unwrap();
        let r = tape.constant(random(&[n, n, 3], 3)).unwrap();
        let u = net.forward(&mut tape, v, Some(k)).unwrap();
        let prod = tape.mul(u, r).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap().into_params();
        for (idx, (name, _)) in store.iter().enumerate() {
            let g = grads.get(idx).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is identically zero");
        }
    }
}

#[test]
fn parameter_layout_follows_inputs() {
    let names = |cfg: &WNetConfig| build(cfg, 1).1.names();
    let dual = names(&small(2));
    assert!(dual.iter().any(|n| n.starts_with("wnet.venc.")));
    assert!(dual.iter().any(|n| n.starts_with("wnet.kenc.")));
    let single = names(&WNetConfig {
        fusion: Fusion::Single,
        ..small(2)
    });
    assert!(single.iter().any(|n| n.starts_with("wnet.enc.")));
    assert!(!single.iter().any(|n| n.starts_with("wnet.kenc.")));
    let no_k = names(&WNetConfig {
        use_attention_input: false,
        ..small(2)
    });
    assert!(!no_k.iter().any(|n| n.starts_with("wnet.kenc.")));
    let off = names(&WNetConfig {
        enabled: false,
        ..small(2)
    });
    assert_eq!(off, ["wnet.out.w", "wnet.out.b"]);
}

#[test]
fn attention_table_is_required_when_enabled() {
    let (net, store) = build(&small(2), 1);
    assert!(net.uses_attention());
    let mut tape = Tape::new(&store);
    let v = tape.constant(random(&[4, 4, V], 1)).unwrap();
    assert!(net.forward(&mut tape, v, None).is_err());
    let bad_k = tape.constant(random(&[3, 3, K], 2)).unwrap();
    assert!(net.forward(&mut tape, v, Some(bad_k)).is_err());
    let bad_v = tape.constant(random(&[4, 4, V + 1], 3)).unwrap();
    assert!(net.forward(&mut tape, bad_v, None).is_err());
    assert!(WNetConfig { base_channels: 0, ..small(2) }.validate().is_err());
}
