use hiore::encoder::{Encoder, EncoderConfig};
use hiore::nn::{ParameterStore, Tape, Tensor};
use hiore::table::{build_k, build_v, distance_indices, Biaffine, DistanceEmbedding, TableConfig, TableMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn table_v(head: &Tensor<f64>, tail: &Tensor<f64>, clamp: usize, c: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dist = DistanceEmbedding::new(clamp, c, &mut store, &mut rng).unwrap();
    let emb = store.get(dist.table).value.clone();
    let mut tape = Tape::new(&store);
    let h = tape.constant(head.clone()).unwrap();
    let t = tape.constant(tail.clone()).unwrap();
    let v = build_v(&mut tape, h, t, &dist).unwrap();
    (tape.value(v).clone(), emb)
}

#[test]
fn default_width_is_750() {
    assert_eq!(TableConfig::default().channels(150), 750);
    let (v, _) = table_v(&random(&[3, 150], 1), &random(&[3, 150], 2), 64, 150);
    assert_eq!(v.shape(), [3, 3, 750]);
}

#[test]
fn cells_match_blockwise_recomputation() {
    let (n, d, c) = (5, 6, 4);
    let head = random(&[n, d], 1);
    let tail = random(&[n, d], 2);
    let (v, emb) = table_v(&head, &tail, 64, c);
    let w = 4 * d + c;
    for i in 0..n {
        for j in 0..n {
            let cell = &v.data()[(i * n + j) * w..(i * n + j + 1) * w];
            let h = &head.data()[i * d..(i + 1) * d];
            let t = &tail.data()[j * d..(j + 1) * d];
            let mut expect = Vec::with_capacity(w);
            expect.extend_from_slice(h);
            expect.extend_from_slice(t);
            expect.extend(h.iter().zip(t).map(|(a, b)| a - b));
            expect.extend(h.iter().zip(t).map(|(a, b)| a * b));
            let k = i.abs_diff(j);
            expect.extend_from_slice(&emb.data()[k * c..(k + 1) * c]);
            assert_eq!(cell, &expect[..], "cell ({i}, {j})");
        }
    }
}

#[test]
fn zero_states_leave_only_distance_block() {
    let (n, d, c) = (4, 5, 3);
    let (v, emb) = table_v(&Tensor::zeros(&[n, d]), &Tensor::zeros(&[n, d]), 64, c);
    let w = 4 * d + c;
    for i in 0..n {
        for j in 0..n {
            let cell = &v.data()[(i * n + j) * w..(i * n + j + 1) * w];
            assert!(cell[..4 * d].iter().all(|&x| x == 0.0));
            let k = i.abs_diff(j);
            assert_eq!(&cell[4 * d..], &emb.data()[k * c..(k + 1) * c]);
        }
    }
}

#[test]
fn head_block_constant_along_rows_and_tail_block_along_columns() {
    let (n, d, c) = (6, 4, 2);
    let (v, _) = table_v(&random(&[n, d], 5), &random(&[n, d], 6), 64, c);
    let w = 4 * d + c;
    let at = |i: usize, j: usize, ch: usize| v.data()[(i * n + j) * w + ch];
    for i in 0..n {
        for j in 0..n {
            for ch in 0..d {
                assert_eq!(at(i, j, ch), at(i, 0, ch));
                assert_eq!(at(i, j, d + ch), at(0, j, d + ch));
            }
        }
    }
}

#[test]
fn distance_indices_are_clamped() {
    let idx = distance_indices(10, 3);
    assert_eq!(idx[0], 0);
    assert_eq!(idx[2], 2);
    assert_eq!(idx[9], 3);
    assert_eq!(idx[9 * 10], 3);
    assert!(idx.iter().all(|&k| k <= 3));
    let (n, d, c) = (10, 2, 2);
    let (v, emb) = table_v(&random(&[n, d], 1), &random(&[n, d], 2), 3, c);
    let w = 4 * d + c;
    let far = &v.data()[9 * w + 4 * d..10 * w];
    assert_eq!(far, &emb.data()[3 * c..4 * c]);
}

#[test]
fn biaffine_matches_per_cell_formula() {
    let (n, d, out) = (4, 3, 5);
    let mut store = ParameterStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Biaffine::new(d, out, &mut store, &mut rng).unwrap();
    let u = store.get(b.weight).value.clone();
    let head = random(&[n, d], 2);
    let tail = random(&[n, d], 3);
    let mut tape = Tape::new(&store);
    let h = tape.constant(head.clone()).unwrap();
    let t = tape.constant(tail.clone()).unwrap();
    let y = b.forward(&mut tape, h, t).unwrap();
    let y = tape.value(y).clone();
    assert_eq!(y.shape(), [n, n, out]);
    assert_eq!(TableConfig { mode: TableMode::Biaffine, biaffine_dim: out, ..TableConfig::default() }.channels(d), out);
    let w = out * (d + 1);
    for i in 0..n {
        for j in 0..n {
            let hv: Vec<f64> = head.data()[i * d..(i + 1) * d].iter().copied().chain([1.0]).collect();
            let tv: Vec<f64> = tail.data()[j * d..(j + 1) * d].iter().copied().chain([1.0]).collect();
            for k in 0..out {
                let mut s = 0.0;
                for (m, hm) in hv.iter().enumerate() {
                    for (l, tl) in tv.iter().enumerate() {
                        s += hm * u.data()[m * w + k * (d + 1) + l] * tl;
                    }
                }
                let got = y.data()[(i * n + j) * out + k];
                assert!((got - s).abs() < 1e-12, "({i}, {j}, {k}): {got} vs {s}");
            }
        }
    }
}

#[test]
fn k_channels_follow_layer_then_head() {
    let cfg = EncoderConfig {
        vocab_size: 10,
        dim: 8,
        layers: 2,
        heads: 2,
        ff_dim: 8,
        max_len: 8,
        ..EncoderConfig::default()
    };
    let mut store = ParameterStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
    let mut tape = Tape::new(&store);
    let ids = [1, 4, 2, 9, 0];
    let vars = enc.forward(&mut tape, &ids, None).unwrap();
    let k = build_k(&mut tape, &vars.attention).unwrap();
    let kt = tape.value(k).clone();
    let n = ids.len();
    assert_eq!(kt.shape(), [n, n, 4]);
    for (ch, &map) in vars.attention.iter().enumerate() {
        let m = tape.value(map);
        for cell in 0..n * n {
            assert_eq!(kt.data()[cell * 4 + ch], m.data()[cell]);
        }
    }
    let single = build_k(&mut tape, &vars.attention[..1]).unwrap();
    assert_eq!(tape.value(single).data(), tape.value(vars.attention[0]).data());
}
