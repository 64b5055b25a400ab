//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary so that every criterion reports even when an
//! earlier one fails. Exits non-zero if any gated criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiore::check::PipelineCheck;
use hiore::cli::{cmd_gradcheck, cmd_train, run_training};
use hiore::config::{DataConfig, RunConfig};
use hiore::corpus::synthetic::{gen_synthetic, SyntheticConfig};
use hiore::corpus::{build_label_space, gold_table, save_corpus, BinaryTable, EntityMention, LabelSpace, Sentence};
use hiore::decode::{adjacent_distances, decode};
use hiore::encoder::Vocab;
use hiore::eval::{score_entities, score_relations};
use hiore::graph::{dynamic_graph, static_graph, CellGraph, Gnn};
use hiore::heads::{loss_entry, ProbTable};
use hiore::model::{Model, ModelConfig, Targets};
use hiore::nn::{ParameterStore, Tape, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, bool, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let s = cmd_gradcheck(&PipelineCheck::default(), 1e-4).map_err(|e| e.to_string())?;
    let worst = s.max_rel_error();
    ensure(s.passed(), || format!("max relative error {worst:.3e} > 1e-4"))?;
    ensure(s.seconds < 120.0, || format!("took {:.1}s", s.seconds))?;
    Ok(format!(
        "{} variants, max relative error {worst:.3e} in {:.1}s",
        s.reports.len(),
        s.seconds
    ))
}

fn write_split(dir: &Path, name: &str, corpus: &[Sentence]) -> std::path::PathBuf {
    let p = dir.join(name);
    save_corpus(&p, corpus).expect("corpus writes");
    p
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = gen_synthetic(7, 20, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let path = write_split(dir.path(), "train.jsonl", &corpus);
    let cfg = RunConfig {
        data: DataConfig {
            train: path.clone(),
            dev: path,
            test: None,
            symmetric_relation_types: vec![],
            features_dir: None,
        },
        model: ModelConfig::default(),
        train: Default::default(),
        decode: Default::default(),
    };
    let started = Instant::now();
    let s = run_training(&cfg, None).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let (e, r) = (s.dev.entity.f1, s.dev.relation.f1);
    ensure(e == 1.0 && r == 1.0, || {
        format!("entity F1 {e:.4}, relation F1 {r:.4} after {} epochs", s.epochs)
    })?;
    ensure(s.epochs <= 300 && secs < 300.0, || format!("{} epochs in {secs:.0}s", s.epochs))?;
    Ok(format!("F1 = 1.0 at epoch {} in {secs:.0}s", s.best_epoch))
}

fn brute_force_edges(n: usize, on: impl Fn(usize, usize) -> bool) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for a in 0..n * n {
        for b in a + 1..n * n {
            let ((i, j), (k, l)) = ((a / n, a % n), (b / n, b % n));
            let diag = i == j && k == l && on(i, i) && on(k, k);
            let anchor = |(i, j): (usize, usize), (k, l): (usize, usize)| i != j && k == l && (k == i || k == j) && on(i, j);
            if diag || anchor((i, j), (k, l)) || anchor((k, l), (i, j)) {
                out.insert((a, b));
            }
        }
    }
    out
}

fn graph_closed_form() -> Outcome {
    for n in 1..=20 {
        let g = static_graph(n);
        ensure(g.edges().len() == 5 * n * (n - 1) / 2, || format!("n = {n}: {} edges", g.edges().len()))?;
        let brute = brute_force_edges(n, |_, _| true);
        ensure(g.edges().iter().copied().collect::<BTreeSet<_>>() == brute, || format!("n = {n}: edge set differs"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let p = rng.gen_range(0.0..1.0);
        let b = BinaryTable {
            n,
            bits: (0..n * n).map(|_| u8::from(rng.gen_bool(p))).collect(),
        };
        let full = static_graph(n);
        violations += dynamic_graph(&b).edges().iter().filter(|&&(x, y)| !full.contains(x, y)).count();
    }
    ensure(violations == 0, || format!("{violations} dynamic edges outside the static graph"))?;
    Ok("n in 1..=20 match brute force; 1000 dynamic graphs, 0 violations".into())
}

fn decode_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for t in 0..1000 {
        let cfg = SyntheticConfig {
            min_len: 1,
            max_len: 8,
            min_entities: 0,
            max_entities: 4,
            max_entity_len: 3,
            relation_prob: rng.gen_range(0.0..=1.0),
            ..SyntheticConfig::default()
        };
        let s = gen_synthetic(rng.gen(), 1, &cfg).map_err(|e| e.to_string())?.remove(0);
        let ls = LabelSpace::new(cfg.entity_types.clone(), cfg.relations.iter().map(|r| r.name.clone()));
        let probs = ProbTable::one_hot(&gold_table(&s, &ls).map_err(|e| e.to_string())?, ls.len());
        let d = adjacent_distances(&probs);
        let cuts: BTreeSet<usize> = s.entities.iter().flat_map(|e| [e.start, e.end + 1]).collect();
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        for (k, &x) in d.iter().enumerate() {
            if cuts.contains(&(k + 1)) {
                hi = hi.min(x);
            } else {
                lo = lo.max(x);
            }
        }
        ensure(lo < hi, || format!("instance {t}: empty threshold interval [{lo}, {hi})"))?;
        let th = if hi.is_finite() { (lo + hi) / 2.0 } else { lo + 1.0 };
        let out = decode(&probs, th, &ls).to_sentence(&s.id, &s.tokens);
        if out.canonical(ls.symmetric()) != s.canonical(ls.symmetric()) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} of 1000 instances differ"))?;
    Ok("1000 instances, 0 mismatches".into())
}

fn loss_anchors() -> Outcome {
    let corpus = gen_synthetic(7, 20, &SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let ls = build_label_space(&corpus);
    let vocab = Vocab::build(corpus.iter().flat_map(|s| s.tokens.iter()));
    let mut cfg = ModelConfig::default();
    cfg.graph.strategy = hiore::graph::GraphStrategy::Dynamic;
    let (model, store) = Model::new::<f64>(&cfg, ls.clone(), vocab, 1).map_err(|e| e.to_string())?;
    let k = ls.len() as f64;
    let mut worst: f64 = 0.0;
    for s in corpus.iter().take(5) {
        let t = Targets::new(s, &ls).map_err(|e| e.to_string())?;
        let r = model.loss_report(&store, &model.input_for(s), &t).map_err(|e| e.to_string())?;
        worst = worst.max((r.entry - k.ln()).abs()).max((r.bin - 2f64.ln()).abs());
        let g = gold_table(s, &ls).map_err(|e| e.to_string())?;
        let zero = loss_entry(&ProbTable::one_hot(&g, ls.len()), &g, None).map_err(|e| e.to_string())?;
        ensure(zero == 0.0, || format!("one-hot loss {zero}"))?;
    }
    ensure(worst <= 1e-10, || format!("deviation {worst:.3e}"))?;
    Ok(format!("max deviation from ln|Y| and ln 2: {worst:.1e}; one-hot loss 0"))
}

fn dense_reference(graph: &CellGraph, x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let m = graph.nodes();
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        a[i * m + i] = 1.0;
    }
    for &(p, q) in graph.edges() {
        a[p * m + q] = 1.0;
        a[q * m + p] = 1.0;
    }
    let deg: Vec<f64> = (0..m).map(|i| a[i * m..(i + 1) * m].iter().sum()).collect();
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; m * cout];
    for i in 0..m {
        for o in 0..cout {
            let mut s = 0.0;
            for j in 0..m {
                let aij = a[i * m + j] / (deg[i] * deg[j]).sqrt();
                for c in 0..cin {
                    s += aij * x[j * cin + c] * w.data()[c * cout + o];
                }
            }
            y[i * cout + o] = 0.5 * s * (1.0 + libm::erf(s / std::f64::consts::SQRT_2));
        }
    }
    y
}

fn gnn_oracle() -> Outcome {
    let mut store = ParameterStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gnn = Gnn::new(6, 5, 1, &mut store, &mut rng).map_err(|e| e.to_string())?;
    let w = store.get(gnn.weights[0]).value.clone();
    let mut graphs: Vec<CellGraph> = (1..=6).map(static_graph).collect();
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let p = rng.gen_range(0.0..1.0);
        graphs.push(dynamic_graph(&BinaryTable {
            n,
            bits: (0..n * n).map(|_| u8::from(rng.gen_bool(p))).collect(),
        }));
    }
    let mut worst: f64 = 0.0;
    for g in &graphs {
        let n = g.n;
        let x: Vec<f64> = (0..n * n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new(&store);
        let u = tape.constant(Tensor::new(vec![n, n, 6], x.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let y = gnn.forward(&mut tape, u, g).map_err(|e| e.to_string())?;
        let want = dense_reference(g, &x, &w);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{} graphs, max deviation {worst:.1e}", graphs.len()))
}

fn ablation_note() -> Outcome {
    Ok("soft criterion, not gated: run scripts/ablation_report.sh for the 3-seed report".into())
}

type RelKey = (EntityMention, EntityMention, String);

fn perturb(s: &Sentence, rng: &mut ChaCha8Rng) -> Sentence {
    let mut p = s.clone();
    for e in &mut p.entities {
        match rng.gen_range(0..5) {
            0 => e.etype = ["LOC", "ORG", "PER"][rng.gen_range(0..3)].into(),
            1 if e.end + 1 < s.n() => e.end += 1,
            _ => {}
        }
    }
    p.relations.retain(|_| rng.gen_bool(0.8));
    for r in &mut p.relations {
        if rng.gen_bool(0.2) {
            std::mem::swap(&mut r.arg1, &mut r.arg2);
        }
        if rng.gen_bool(0.1) {
            r.rtype = ["LIVE-IN", "WORK-FOR"][rng.gen_range(0..2)].into();
        }
    }
    p
}

fn quadratic<T: PartialEq>(pred: &[T], gold: &[T]) -> (usize, usize, usize) {
    let uniq = |xs: &[T]| -> Vec<usize> { (0..xs.len()).filter(|&i| !xs[..i].contains(&xs[i])).collect() };
    let (pu, gu) = (uniq(pred), uniq(gold));
    let tp = pu.iter().filter(|&&i| gu.iter().any(|&j| pred[i] == gold[j])).count();
    (tp, pu.len() - tp, gu.len() - tp)
}

fn rels(s: &Sentence) -> Vec<RelKey> {
    s.relations
        .iter()
        .map(|r| (s.entities[r.arg1].clone(), s.entities[r.arg2].clone(), r.rtype.clone()))
        .collect()
}

fn scorer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..1000 {
        let gold = gen_synthetic(rng.gen(), rng.gen_range(1..=4), &SyntheticConfig::default()).map_err(|e| e.to_string())?;
        let pred: Vec<Sentence> = gold.iter().map(|s| perturb(s, &mut rng)).collect();
        let (mut e, mut r) = ((0, 0, 0), (0, 0, 0));
        for (p, g) in pred.iter().zip(&gold) {
            let c = quadratic(&p.entities, &g.entities);
            e = (e.0 + c.0, e.1 + c.1, e.2 + c.2);
            let c = quadratic(&rels(p), &rels(g));
            r = (r.0 + c.0, r.1 + c.1, r.2 + c.2);
        }
        let se = score_entities(&pred, &gold).map_err(|e| e.to_string())?;
        let sr = score_relations(&pred, &gold, &BTreeSet::new()).map_err(|e| e.to_string())?;
        ensure((se.tp, se.fp, se.fn_) == e, || format!("pair {t}: entity counts {se:?} vs {e:?}"))?;
        ensure((sr.tp, sr.fp, sr.fn_) == r, || format!("pair {t}: relation counts {sr:?} vs {r:?}"))?;
    }
    let gold = Sentence {
        id: "g".into(),
        tokens: vec!["w".into(); 6],
        entities: vec![EntityMention::new(0, 1, "PER"), EntityMention::new(4, 5, "ORG")],
        relations: vec![hiore::corpus::RelationMention::new(0, 1, "WORK-FOR")],
    };
    let mut wrong_type = gold.clone();
    wrong_type.entities[1].etype = "LOC".into();
    let mut wrong_edge = gold.clone();
    wrong_edge.entities[0].start = 1;
    for (name, p) in [("wrong type", wrong_type), ("wrong boundary", wrong_edge)] {
        let se = score_entities(std::slice::from_ref(&p), std::slice::from_ref(&gold)).map_err(|e| e.to_string())?;
        let sr = score_relations(std::slice::from_ref(&p), std::slice::from_ref(&gold), &BTreeSet::new())
            .map_err(|e| e.to_string())?;
        ensure(se.tp == 1 && sr.tp == 0, || format!("{name}: entity tp {}, relation tp {}", se.tp, sr.tp))?;
    }
    Ok("1000 corpus pairs agree with the quadratic matcher; near misses score 0".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = write_split(dir.path(), "train.jsonl", &gen_synthetic(1, 12, &SyntheticConfig::default()).map_err(|e| e.to_string())?);
    let dev = write_split(dir.path(), "dev.jsonl", &gen_synthetic(2, 6, &SyntheticConfig::default()).map_err(|e| e.to_string())?);
    let mut cfg = RunConfig {
        data: DataConfig {
            train,
            dev,
            test: None,
            symmetric_relation_types: vec![],
            features_dir: None,
        },
        model: ModelConfig::default(),
        train: Default::default(),
        decode: Default::default(),
    };
    cfg.train.max_epochs = 5;
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        cmd_train(&cfg_path, &out, true).map_err(|e| e.to_string())?;
        files.push(std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "metrics.jsonl differs between runs".into())?;
    Ok(format!("two runs, {} byte metrics files identical", files[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", true, gradients),
        ("overfit identity", true, overfit),
        ("graph closed form", true, graph_closed_form),
        ("decoding round trip", true, decode_round_trip),
        ("loss anchors", true, loss_anchors),
        ("gnn oracle equivalence", true, gnn_oracle),
        ("ablation directionality", false, ablation_note),
        ("scorer correctness", true, scorer),
        ("determinism", true, determinism),
    ];
    let mut failed = 0;
    for (i, (name, gated, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let tag = match (&outcome, gated) {
            (Ok(_), true) => "PASS",
            (Ok(_), false) => "SOFT",
            (Err(_), _) => "FAIL",
        };
        if outcome.is_err() && *gated {
            failed += 1;
        }
        let detail = outcome.unwrap_or_else(|e| e);
        println!("criterion {} [{tag}] {name}: {detail}", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} gated criteria failed");
        ExitCode::FAILURE
    }
}
