use std::collections::BTreeSet;

use hiore::corpus::synthetic::{gen_synthetic, SyntheticConfig};
use hiore::corpus::{
    build_label_space, gold_binary_table, gold_table, load_corpus, save_corpus, EntityMention, LabelSpace,
    RelationMention, Sentence,
};
use hiore::eval::{is_long_distance, relation_keys};
use proptest::prelude::*;

fn symmetric_space(corpus: &[Sentence], sym: &[&str]) -> LabelSpace {
    build_label_space(corpus).with_symmetric(sym.iter().map(|s| s.to_string()))
}

#[test]
fn synthetic_is_deterministic_and_valid() {
    let cfg = SyntheticConfig::default();
    let a = gen_synthetic(7, 20, &cfg).unwrap();
    let b = gen_synthetic(7, 20, &cfg).unwrap();
    assert_eq!(a.len(), 20);
    assert_eq!(a, b);
    for s in &a {
        s.validate().unwrap();
        assert!(s.n() <= 12);
    }
    assert_ne!(a, gen_synthetic(8, 20, &cfg).unwrap());
}

#[test]
fn synthetic_covers_every_stratum() {
    let corpus = gen_synthetic(7, 1000, &SyntheticConfig::default()).unwrap();
    let ls = build_label_space(&corpus);
    let isolated = corpus.iter().any(|s| {
        let linked: BTreeSet<usize> = s.relations.iter().flat_map(|r| [r.arg1, r.arg2]).collect();
        (0..s.entities.len()).any(|k| !linked.contains(&k))
    });
    let multi = corpus.iter().any(|s| s.relations.len() >= 2);
    let long = corpus
        .iter()
        .any(|s| relation_keys(s, ls.symmetric()).iter().any(is_long_distance));
    assert!(isolated && multi && long, "IE {isolated} MR {multi} LDR {long}");
}

#[test]
fn zero_relation_config_isolates_everything() {
    let cfg = SyntheticConfig {
        relations: vec![],
        ..SyntheticConfig::default()
    };
    let corpus = gen_synthetic(3, 200, &cfg).unwrap();
    assert!(corpus.iter().all(|s| s.relations.is_empty()));
    assert!(corpus.iter().any(|s| !s.entities.is_empty()));
    let ls = build_label_space(&corpus);
    assert_eq!(ls.len(), ls.entity_types().len() + 1);
}

#[test]
fn inconsistent_synthetic_config_is_rejected() {
    let cfg = SyntheticConfig {
        min_len: 9,
        max_len: 3,
        ..SyntheticConfig::default()
    };
    assert!(gen_synthetic(1, 5, &cfg).is_err());
    assert!(gen_synthetic(1, 0, &SyntheticConfig::default()).is_err());
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_synthetic(7, 20, &SyntheticConfig::default()).unwrap();
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    save_corpus(&p1, &corpus).unwrap();
    let back = load_corpus(&p1).unwrap();
    assert_eq!(back, corpus);
    save_corpus(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn label_space_ignores_sentence_order() {
    let mut corpus = gen_synthetic(5, 50, &SyntheticConfig::default()).unwrap();
    let a = build_label_space(&corpus);
    corpus.reverse();
    assert_eq!(a, build_label_space(&corpus));
    assert_eq!(a.len(), 3 + 2 + 1);
}

#[test]
fn read_back_inverts_gold_table_on_synthetic_sentences() {
    let corpus = gen_synthetic(11, 1000, &SyntheticConfig::default()).unwrap();
    let ls = build_label_space(&corpus);
    for s in &corpus {
        let g = gold_table(s, &ls).unwrap();
        let (ents, rels) = g.read_back(&ls);
        let (ce, cr) = s.canonical(ls.symmetric());
        assert_eq!(ents, ce, "{}", s.id);
        assert_eq!(rels, cr, "{}", s.id);
    }
}

#[test]
fn symmetric_types_are_mirrored() {
    let s = Sentence {
        id: "m".into(),
        tokens: vec!["a".into(); 5],
        entities: vec![EntityMention::new(0, 1, "A"), EntityMention::new(3, 4, "B")],
        relations: vec![RelationMention::new(1, 0, "NEAR")],
    };
    let ls = symmetric_space(std::slice::from_ref(&s), &["NEAR"]);
    let g = gold_table(&s, &ls).unwrap();
    let near = ls.relation_index("NEAR").unwrap();
    for i in 0..2 {
        for j in 3..5 {
            assert_eq!(g.get(i, j), near);
            assert_eq!(g.get(j, i), near);
        }
    }
    assert_eq!(gold_binary_table(&g).ones(), 4 + 4 + 8);
    let (_, rels) = g.read_back(&ls);
    assert_eq!(rels, s.canonical(ls.symmetric()).1);
}

fn arb_sentence() -> impl Strategy<Value = Sentence> {
    (1usize..=10, any::<u64>(), 0.0f64..=1.0).prop_map(|(max_len, seed, p)| {
        let cfg = SyntheticConfig {
            min_len: 1,
            max_len,
            min_entities: 0,
            max_entities: 4.min(max_len),
            max_entity_len: 3,
            relation_prob: p,
            ..SyntheticConfig::default()
        };
        gen_synthetic(seed, 1, &cfg).unwrap().remove(0)
    })
}

proptest! {
    #[test]
    fn binary_table_counts_covered_cells(s in arb_sentence(), sym in any::<bool>()) {
        let ls = LabelSpace::new(
            ["LOC", "ORG", "PER"].map(String::from),
            ["LIVE-IN", "WORK-FOR"].map(String::from),
        );
        let ls = if sym { ls.with_symmetric(["LIVE-IN".to_string()]) } else { ls };
        let g = gold_table(&s, &ls).unwrap();
        let mut expected: usize = s.entities.iter().map(|e| e.len() * e.len()).sum();
        for r in &s.relations {
            let cells = s.entities[r.arg1].len() * s.entities[r.arg2].len();
            expected += if ls.is_symmetric(&r.rtype) { 2 * cells } else { cells };
        }
        let bits = gold_binary_table(&g);
        prop_assert_eq!(bits.ones(), expected);
        prop_assert_eq!(bits.ones(), s.n() * s.n() - g.null_count());
    }

    #[test]
    fn read_back_is_identity(s in arb_sentence()) {
        let ls = LabelSpace::new(
            ["LOC", "ORG", "PER"].map(String::from),
            ["LIVE-IN", "WORK-FOR"].map(String::from),
        );
        let (ents, rels) = gold_table(&s, &ls).unwrap().read_back(&ls);
        let (ce, cr) = s.canonical(ls.symmetric());
        prop_assert_eq!(ents, ce);
        prop_assert_eq!(rels, cr);
    }
}
