use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiore::check::{PipelineCheck, DEFAULT_TOLERANCE};
use hiore::cli::{self, AblationConfig, CliError};

#[derive(Parser)]
#[command(name = "hiore", version, about = "Table-filling joint entity and relation extraction")]
struct Cli {
    /// Worker threads for the rayon pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sequential, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Features {
    /// Directory of precomputed encoder features, one archive per sentence id.
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; writes checkpoint/, metrics.jsonl, timing.jsonl and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write an untrained checkpoint for a config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Strict micro P/R/F1 of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Add the IE / MR / LDR strata.
        #[arg(long)]
        strata: bool,
        #[arg(long)]
        threshold: Option<f64>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        features: Features,
    },
    /// Decode a corpus into a JSONL prediction file with mention scores.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        features: Features,
    },
    /// Finite-difference check of the whole pipeline in 64-bit for every ablation variant.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        size: usize,
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Dump a cell graph with edge counts.
    InspectGraph {
        /// Static graph for a sentence of this length.
        #[arg(long, conflicts_with_all = ["checkpoint", "corpus", "sentence"])]
        n: Option<usize>,
        #[arg(long, requires_all = ["corpus", "sentence"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Sentence id within the corpus.
        #[arg(long)]
        sentence: Option<String>,
        #[command(flatten)]
        features: Features,
    },
    /// Sweep the span-split threshold on a dev corpus.
    CalibrateThreshold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Store the best threshold in the checkpoint.
        #[arg(long)]
        write: bool,
        #[command(flatten)]
        features: Features,
    },
    /// Generate a seeded synthetic corpus.
    GenSynthetic {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full model against w/o WNet and w/o GNN on held-out synthetic splits.
    Ablation {
        #[arg(long)]
        out_dir: PathBuf,
        /// TOML file with ablation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out_dir } => {
            let s = cli::cmd_train(&config, &out_dir, cli.deterministic)?;
            println!(
                "trained {} epochs, best epoch {} (dev average F1 {:.4})",
                s.epochs, s.best_epoch, s.best_average_f1
            );
            print!("dev\n{}", s.dev.render());
            if let Some(t) = &s.test {
                print!("test\n{}", t.render());
            }
            println!("wrote {}", out_dir.display());
        }
        Command::Init { config, out } => {
            cli::cmd_init(&config, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            strata,
            threshold,
            json,
            features,
        } => {
            let r = cli::cmd_eval(&checkpoint, &corpus, strata, threshold, features.features_dir.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            } else {
                print!("{}", r.render());
            }
        }
        Command::Predict {
            checkpoint,
            corpus,
            out,
            threshold,
            features,
        } => {
            let s = cli::cmd_predict(&checkpoint, &corpus, &out, threshold, features.features_dir.as_deref())?;
            println!(
                "{} sentences in {:.3}s ({:.1} sentences/s), wrote {}",
                s.sentences,
                s.seconds,
                s.sentences_per_s,
                out.display()
            );
        }
        Command::Gradcheck {
            size,
            eps,
            seed,
            tolerance,
        } => {
            let check = PipelineCheck {
                n: size,
                eps,
                seed,
                ..PipelineCheck::default()
            };
            let s = cli::cmd_gradcheck(&check, tolerance)?;
            print!("{}", s.render());
            if !s.passed() {
                return Err(CliError::Tolerance {
                    worst: s.max_rel_error(),
                    tolerance,
                });
            }
        }
        Command::InspectGraph {
            n,
            checkpoint,
            corpus,
            sentence,
            features,
        } => match (n, checkpoint, corpus, sentence) {
            (Some(n), ..) => print!("{}", cli::cmd_inspect_graph_n(n)),
            (None, Some(ck), Some(corpus), Some(id)) => print!(
                "{}",
                cli::cmd_inspect_graph_checkpoint(&ck, &corpus, &id, features.features_dir.as_deref())?
            ),
            _ => {
                return Err(CliError::Input(
                    "give --n, or --checkpoint with --corpus and --sentence".into(),
                ))
            }
        },
        Command::CalibrateThreshold {
            checkpoint,
            corpus,
            write,
            features,
        } => {
            let c = cli::cmd_calibrate_threshold(
                &checkpoint,
                &corpus,
                &cli::threshold_grid(),
                write,
                features.features_dir.as_deref(),
            )?;
            for (t, f) in &c.sweep {
                println!("threshold {t:.2}  average F1 {f:.4}");
            }
            println!("best threshold {:.2} (average F1 {:.4})", c.best_threshold, c.best_average_f1);
        }
        Command::GenSynthetic {
            seed,
            count,
            out,
            config,
        } => {
            let cfg = cli::load_synthetic_config(config.as_deref())?;
            cli::cmd_gen_synthetic(seed, count, &cfg, &out)?;
            println!("wrote {count} sentences to {}", out.display());
        }
        Command::Ablation { out_dir, config, seeds } => {
            let mut cfg = AblationConfig::load(config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let rows = cli::cmd_ablation(&cfg, &out_dir, cli.deterministic)?;
            print!("{}", cli::render_ablation(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
