use std::collections::BTreeSet;

use hiore::corpus::synthetic::{gen_synthetic, SyntheticConfig};
use hiore::corpus::{EntityMention, RelationMention, Sentence};
use hiore::eval::{
    argument_distance, evaluate, score_entities, score_relations, stratified_eval, EvalError, Prf,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sentence(id: &str, n: usize, ents: &[(usize, usize, &str)], rels: &[(usize, usize, &str)]) -> Sentence {
    Sentence {
        id: id.into(),
        tokens: vec!["w".into(); n],
        entities: ents.iter().map(|&(s, e, t)| EntityMention::new(s, e, t)).collect(),
        relations: rels.iter().map(|&(a, b, t)| RelationMention::new(a, b, t)).collect(),
    }
}

fn none() -> BTreeSet<String> {
    BTreeSet::new()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn hand_counted_entity_scores() {
    let gold = [sentence("a", 6, &[(0, 0, "PER"), (3, 4, "ORG")], &[])];
    let pred = [sentence("a", 6, &[(0, 0, "PER"), (3, 4, "ORG"), (5, 5, "LOC")], &[])];
    let p = score_entities(&pred, &gold).unwrap();
    assert_eq!((p.tp, p.fp, p.fn_), (2, 1, 0));
    assert!(close(p.precision, 2.0 / 3.0));
    assert!(close(p.recall, 1.0));
    assert!(close(p.f1, 0.8));
}

#[test]
fn near_misses_earn_nothing() {
    let gold = [sentence("a", 6, &[(0, 1, "PER"), (3, 4, "ORG")], &[(0, 1, "WORK-FOR")])];
    let wrong_type = [sentence("a", 6, &[(0, 1, "LOC"), (3, 4, "ORG")], &[(0, 1, "WORK-FOR")])];
    let wrong_edge = [sentence("a", 6, &[(0, 0, "PER"), (3, 4, "ORG")], &[(0, 1, "WORK-FOR")])];
    let wrong_rel = [sentence("a", 6, &[(0, 1, "PER"), (3, 4, "ORG")], &[(0, 1, "LIVE-IN")])];
    let reversed = [sentence("a", 6, &[(0, 1, "PER"), (3, 4, "ORG")], &[(1, 0, "WORK-FOR")])];
    for pred in [&wrong_type, &wrong_edge] {
        assert_eq!(score_entities(pred, &gold).unwrap().tp, 1);
        assert_eq!(score_relations(pred, &gold, &none()).unwrap().tp, 0);
    }
    for pred in [&wrong_rel, &reversed] {
        assert_eq!(score_entities(pred, &gold).unwrap().tp, 2);
        assert_eq!(score_relations(pred, &gold, &none()).unwrap().tp, 0);
    }
    let sym: BTreeSet<String> = ["WORK-FOR".to_string()].into();
    assert_eq!(score_relations(&reversed, &gold, &sym).unwrap().tp, 1);
}

#[test]
fn micro_average_pools_counts() {
    let gold = [
        sentence("a", 4, &[(0, 0, "PER")], &[]),
        sentence("b", 4, &[(0, 0, "PER"), (1, 1, "PER"), (2, 2, "PER")], &[]),
    ];
    let pred = [
        sentence("a", 4, &[], &[]),
        sentence("b", 4, &[(0, 0, "PER"), (1, 1, "PER"), (2, 2, "PER")], &[]),
    ];
    let p = score_entities(&pred, &gold).unwrap();
    assert_eq!((p.tp, p.fp, p.fn_), (3, 0, 1));
    assert!(close(p.f1, 2.0 * 0.75 / 1.75));
    assert_eq!(score_entities(&pred[..0], &gold[..0]).unwrap_err().to_string(), EvalError::Empty.to_string());
}

#[test]
fn corpus_alignment_errors() {
    let g = [sentence("a", 2, &[], &[]), sentence("b", 2, &[], &[])];
    assert!(matches!(score_entities(&g[..1], &g), Err(EvalError::MissingPrediction(id)) if id == "b"));
    let extra = [g[0].clone(), g[1].clone(), sentence("c", 2, &[], &[])];
    assert!(matches!(score_entities(&extra, &g), Err(EvalError::UnknownId(id)) if id == "c"));
    let dup = [g[0].clone(), g[0].clone()];
    assert!(matches!(score_entities(&dup, &g), Err(EvalError::DuplicateId(_))));
    assert!(matches!(score_entities(&g, &[]), Err(EvalError::Empty)));
    let mut shuffled = g.to_vec();
    shuffled.reverse();
    assert_eq!(score_entities(&shuffled, &g).unwrap(), score_entities(&g, &g).unwrap());
}

/// Random edits of a gold sentence: dropped, retyped, re-bounded and
/// spurious entities; dropped, retyped and flipped relations.
fn perturb(s: &Sentence, rng: &mut ChaCha8Rng) -> Sentence {
    let types = ["LOC", "ORG", "PER"];
    let rtypes = ["LIVE-IN", "WORK-FOR"];
    let n = s.n();
    let mut ents = Vec::new();
    let mut map = vec![None; s.entities.len()];
    for (k, e) in s.entities.iter().enumerate() {
        match rng.gen_range(0..6) {
            0 => continue,
            1 => ents.push(EntityMention::new(e.start, e.end, *types.choose(rng).unwrap())),
            2 if e.end + 1 < n => ents.push(EntityMention::new(e.start, e.end + 1, e.etype.clone())),
            _ => ents.push(e.clone()),
        }
        map[k] = Some(ents.len() - 1);
    }
    if rng.gen_bool(0.3) {
        let a = rng.gen_range(0..n);
        ents.push(EntityMention::new(a, a, *types.choose(rng).unwrap()));
    }
    let mut rels = Vec::new();
    for r in &s.relations {
        let (Some(a), Some(b)) = (map[r.arg1], map[r.arg2]) else { continue };
        match rng.gen_range(0..5) {
            0 => continue,
            1 => rels.push(RelationMention::new(a, b, *rtypes.choose(rng).unwrap())),
            2 => rels.push(RelationMention::new(b, a, r.rtype.clone())),
            _ => rels.push(RelationMention::new(a, b, r.rtype.clone())),
        }
    }
    if ents.len() >= 2 && rng.gen_bool(0.3) {
        rels.push(RelationMention::new(0, ents.len() - 1, *rtypes.choose(rng).unwrap()));
    }
    Sentence {
        id: s.id.clone(),
        tokens: s.tokens.clone(),
        entities: ents,
        relations: rels,
    }
}

type Rel = (EntityMention, EntityMention, String);

fn rel_list(s: &Sentence) -> Vec<Rel> {
    let mut out: Vec<Rel> = Vec::new();
    for r in &s.relations {
        let item = (s.entities[r.arg1].clone(), s.entities[r.arg2].clone(), r.rtype.clone());
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn same_rel(x: &Rel, y: &Rel, sym: &BTreeSet<String>) -> bool {
    x.2 == y.2 && ((x.0 == y.0 && x.1 == y.1) || (sym.contains(&x.2) && x.0 == y.1 && x.1 == y.0))
}

/// Pairwise scan over de-duplicated lists, independent of the set keys.
fn quadratic<T>(pred: &[T], gold: &[T], eq: impl Fn(&T, &T) -> bool) -> (usize, usize, usize) {
    let tp = pred.iter().filter(|p| gold.iter().any(|g| eq(p, g))).count();
    let matched_gold = gold.iter().filter(|g| pred.iter().any(|p| eq(p, g))).count();
    assert_eq!(tp, matched_gold);
    (tp, pred.len() - tp, gold.len() - tp)
}

fn dedup<T: PartialEq + Clone>(xs: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for x in xs {
        if !out.contains(x) {
            out.push(x.clone());
        }
    }
    out
}

fn dedup_rels(xs: Vec<Rel>, sym: &BTreeSet<String>) -> Vec<Rel> {
    let mut out: Vec<Rel> = Vec::new();
    for x in xs {
        if !out.iter().any(|y| same_rel(&x, y, sym)) {
            out.push(x);
        }
    }
    out
}

#[test]
fn scores_match_a_quadratic_matcher() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let gold = gen_synthetic(31, 1000, &SyntheticConfig::default()).unwrap();
    let pred: Vec<Sentence> = gold.iter().map(|s| perturb(s, &mut rng)).collect();
    for sym in [none(), ["LIVE-IN".to_string()].into()] {
        let (mut e, mut r) = ((0, 0, 0), (0, 0, 0));
        for (p, g) in pred.iter().zip(&gold) {
            let c = quadratic(&dedup(&p.entities), &dedup(&g.entities), |a, b| a == b);
            e = (e.0 + c.0, e.1 + c.1, e.2 + c.2);
            let c = quadratic(
                &dedup_rels(rel_list(p), &sym),
                &dedup_rels(rel_list(g), &sym),
                |a, b| same_rel(a, b, &sym),
            );
            r = (r.0 + c.0, r.1 + c.1, r.2 + c.2);
        }
        let pe = score_entities(&pred, &gold).unwrap();
        let pr = score_relations(&pred, &gold, &sym).unwrap();
        assert_eq!((pe.tp, pe.fp, pe.fn_), e);
        assert_eq!((pr.tp, pr.fp, pr.fn_), r);
        assert_eq!(pe, Prf::from_counts(e.0, e.1, e.2));
        assert!(pr.tp > 0 && pr.fp > 0 && pr.fn_ > 0);
    }
}

#[test]
fn swapping_prediction_and_gold_swaps_precision_and_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gold = gen_synthetic(8, 200, &SyntheticConfig::default()).unwrap();
    let pred: Vec<Sentence> = gold.iter().map(|s| perturb(s, &mut rng)).collect();
    let a = evaluate(&pred, &gold, &none(), false).unwrap();
    let b = evaluate(&gold, &pred, &none(), false).unwrap();
    for (x, y) in [(a.entity, b.entity), (a.relation, b.relation)] {
        assert!(close(x.precision, y.recall));
        assert!(close(x.recall, y.precision));
        assert!(close(x.f1, y.f1));
    }
    let perfect = evaluate(&gold, &gold, &none(), true).unwrap();
    assert_eq!((perfect.entity.f1, perfect.relation.f1), (1.0, 1.0));
    assert_eq!(perfect.average_f1(), 1.0);
    let st = perfect.strata.unwrap();
    for s in [st.ie, st.mr, st.ldr] {
        assert_eq!(s.unwrap().f1, 1.0);
    }
}

#[test]
fn per_type_counts_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gold = gen_synthetic(12, 300, &SyntheticConfig::default()).unwrap();
    let pred: Vec<Sentence> = gold.iter().map(|s| perturb(s, &mut rng)).collect();
    let r = evaluate(&pred, &gold, &none(), false).unwrap();
    let sum = |m: &std::collections::BTreeMap<String, Prf>| {
        m.values().fold((0, 0, 0), |a, p| (a.0 + p.tp, a.1 + p.fp, a.2 + p.fn_))
    };
    assert_eq!(sum(&r.entity_by_type), (r.entity.tp, r.entity.fp, r.entity.fn_));
    assert_eq!(sum(&r.relation_by_type), (r.relation.tp, r.relation.fp, r.relation.fn_));
    assert!(r.render().contains("relation/WORK-FOR"));
}

#[test]
fn argument_distance_examples() {
    let e = |s, t| (s, t, "X".to_string());
    assert_eq!(argument_distance(&e(0, 0), &e(6, 6)), 6);
    assert_eq!(argument_distance(&e(6, 7), &e(0, 1)), 5);
    assert_eq!(argument_distance(&e(0, 0), &e(4, 4)), 4);
    assert_eq!(argument_distance(&e(2, 5), &e(4, 8)), 0);
}

#[test]
fn strata_follow_membership_rules() {
    let gold = [
        sentence(
            "a",
            12,
            &[(0, 0, "PER"), (2, 2, "ORG"), (4, 4, "LOC"), (10, 11, "LOC")],
            &[(0, 1, "WORK-FOR"), (0, 3, "LIVE-IN")],
        ),
        sentence("b", 8, &[(0, 0, "PER"), (7, 7, "LOC")], &[(0, 1, "LIVE-IN")]),
        sentence("c", 5, &[(1, 1, "ORG")], &[]),
    ];
    let pred = [
        sentence(
            "a",
            12,
            &[(0, 0, "PER"), (2, 2, "ORG"), (5, 5, "LOC"), (10, 11, "LOC")],
            &[(0, 1, "WORK-FOR"), (1, 3, "LIVE-IN")],
        ),
        sentence("b", 8, &[(0, 0, "PER"), (7, 7, "LOC"), (3, 3, "PER")], &[(1, 0, "LIVE-IN")]),
        sentence("c", 5, &[(1, 1, "ORG"), (3, 3, "PER")], &[(0, 1, "WORK-FOR")]),
    ];
    let st = stratified_eval(&pred, &gold, &none()).unwrap();
    // isolated gold: a(4,4) LOC, c(1,1) ORG; unmatched isolated preds: a(5,5), b(3,3); c(3,3) is linked
    let ie = st.ie.unwrap();
    assert_eq!((ie.tp, ie.fp, ie.fn_), (1, 2, 1));
    // only sentence a has two gold relations
    let mr = st.mr.unwrap();
    assert_eq!((mr.tp, mr.fp, mr.fn_), (1, 1, 1));
    // long distance: a (0,0)-(10,11) gap 10, b (0,0)-(7,7) gap 7; pred a (2,2)-(10,11) gap 8
    let ldr = st.ldr.unwrap();
    assert_eq!((ldr.tp, ldr.fp, ldr.fn_), (0, 2, 2));

    let empty = stratified_eval(&gold[2..], &gold[2..], &none()).unwrap();
    assert!(empty.mr.is_none() && empty.ldr.is_none());
    assert_eq!(empty.ie.unwrap().f1, 1.0);
}
