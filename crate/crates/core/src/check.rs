//! Whole-pipeline gradient checks on a tiny 64-bit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::{gen_synthetic, SyntheticConfig};
use crate::corpus::LabelSpace;
use crate::encoder::{EncoderConfig, Vocab};
use crate::graph::{GraphConfig, GraphStrategy};
use crate::model::{Model, ModelConfig, ModelError, Targets};
use crate::nn::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Stencil};
use crate::table::{TableConfig, TableMode};
use crate::wnet::WNetConfig;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub strategy: GraphStrategy,
    pub use_attention_input: bool,
    pub use_wnet: bool,
    pub use_gnn: bool,
    pub table_mode: TableMode,
}

impl Variant {
    fn new(strategy: GraphStrategy, k: bool, wnet: bool, gnn: bool, mode: TableMode) -> Self {
        let s = match strategy {
            GraphStrategy::Static => "static",
            GraphStrategy::Dynamic => "dynamic",
        };
        let mut name = s.to_string();
        for (on, tag) in [(k, "-noK"), (wnet, "-noWNet"), (gnn, "-noGNN")] {
            if !on {
                name.push_str(tag);
            }
        }
        if mode == TableMode::Biaffine {
            name.push_str("-biaffine");
        }
        Self {
            name,
            strategy,
            use_attention_input: k,
            use_wnet: wnet,
            use_gnn: gnn,
            table_mode: mode,
        }
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        cfg.graph.strategy = self.strategy;
        cfg.graph.use_gnn = self.use_gnn;
        cfg.wnet.use_attention_input = self.use_attention_input;
        cfg.wnet.enabled = self.use_wnet;
        cfg.table.mode = self.table_mode;
    }
}

/// Both graph strategies, each full and with K, WNet or the GNN removed,
/// plus the biaffine table.
pub fn standard_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for s in [GraphStrategy::Static, GraphStrategy::Dynamic] {
        out.push(Variant::new(s, true, true, true, TableMode::Concat));
        out.push(Variant::new(s, false, true, true, TableMode::Concat));
        out.push(Variant::new(s, true, false, true, TableMode::Concat));
        out.push(Variant::new(s, true, true, false, TableMode::Concat));
    }
    out.push(Variant::new(GraphStrategy::Static, true, true, true, TableMode::Biaffine));
    out
}

/// Small dimensions that keep every module in play.
pub fn tiny_config(variant: &Variant) -> ModelConfig {
    let mut cfg = ModelConfig {
        encoder: EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 16,
            head_tail_dim: 4,
            ..EncoderConfig::default()
        },
        table: TableConfig {
            distance_dim: 4,
            biaffine_dim: 4,
            ..TableConfig::default()
        },
        wnet: WNetConfig {
            base_channels: 2,
            out_channels: 3,
            ..WNetConfig::default()
        },
        graph: GraphConfig::default(),
        ..ModelConfig::default()
    };
    variant.apply(&mut cfg);
    cfg
}

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: Variant,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineCheck {
    /// Sentence length.
    pub n: usize,
    pub eps: f64,
    pub stencil: Stencil,
    pub seed: u64,
}

impl Default for PipelineCheck {
    fn default() -> Self {
        Self {
            n: 6,
            eps: 1e-2,
            stencil: Stencil::FourPoint,
            seed: 1,
        }
    }
}

/// Gradient check of the training loss for one synthetic sentence.
///
/// The zero-initialised heads are re-drawn uniformly in `[-1, 1]` so that
/// every upstream gradient is non-zero. Pooling winners and predicted graph
/// edges are held at their unperturbed values while differencing.
pub fn pipeline_gradcheck(check: &PipelineCheck, variant: &Variant) -> Result<GradCheckReport, ModelError> {
    let n = check.n;
    let syn = SyntheticConfig {
        min_len: n,
        max_len: n,
        min_entities: 2.min(n),
        max_entities: 3.min(n),
        ..SyntheticConfig::default()
    };
    let sentence = gen_synthetic(check.seed, 1, &syn)?.remove(0);
    let labels = LabelSpace::new(
        syn.entity_types.clone(),
        syn.relations.iter().map(|r| r.name.clone()),
    );
    let vocab = Vocab::build(&sentence.tokens);
    let cfg = tiny_config(variant);
    let (model, mut store) = Model::new::<f64>(&cfg, labels, vocab, check.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed ^ 0xa5a5);
    for (name, p) in store.iter_mut() {
        if name.starts_with("label_head.") || name.starts_with("bin_head.") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    let input = model.input_for(&sentence);
    let targets = Targets::new(&sentence, &model.labels)?;
    let opts = GradCheckOptions {
        eps: check.eps,
        stencil: check.stencil,
        seed: check.seed,
        freeze_decisions: true,
        ..GradCheckOptions::default()
    };
    grad_check(&store, &[], &opts, |tape, _| {
        let out = model.forward(tape, &input, Some(&targets), None)?;
        Ok::<_, ModelError>(out.loss.expect("targets given"))
    })
}

pub fn gradcheck_all(check: &PipelineCheck) -> Result<Vec<VariantReport>, ModelError> {
    standard_variants()
        .into_iter()
        .map(|variant| {
            let report = pipeline_gradcheck(check, &variant)?;
            Ok(VariantReport { variant, report })
        })
        .collect()
}
