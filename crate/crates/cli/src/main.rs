use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use openintent::adb::{self, BoundarySet};
use openintent::data::{self, SplitSpec, Vocabulary};
use openintent::model::Model;
use openintent_cli::{
    ablate_last_layer_components, ablate_layer_grouping, ablate_prefix_length, report,
    report_rows, run_experiment, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "openintent",
    about = "Prefix-tuned open intent classification experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the per-flag overrides shared by experiment commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus TSV path, or "synthetic".
    #[arg(long)]
    dataset: Option<String>,
    /// Known-intent ratio(s), comma separated.
    #[arg(long)]
    kir: Option<String>,
    /// Random seeds, comma separated.
    #[arg(long)]
    seeds: Option<String>,
    /// Tuning plan descriptor (e.g. prefix+just:2, component:kv, fft-nopt).
    #[arg(long)]
    plan: Option<String>,
    /// Prefix length.
    #[arg(long)]
    prefix_len: Option<usize>,
    /// Prefix mode: embed or mlp.
    #[arg(long)]
    prefix_mode: Option<String>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.set("dataset", v)?;
        }
        if let Some(v) = &self.kir {
            cfg.set("kir", v)?;
        }
        if let Some(v) = &self.seeds {
            cfg.set("seeds", v)?;
        }
        if let Some(v) = &self.plan {
            cfg.set("plan", v)?;
        }
        if let Some(v) = self.prefix_len {
            cfg.set("prefix_len", &v.to_string())?;
        }
        if let Some(v) = &self.prefix_mode {
            cfg.set("prefix_mode", v)?;
        }
        if let Some(v) = &self.out_dir {
            cfg.set("out_dir", &v.display().to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: split, pre-train, finalize, boundaries, evaluate.
    Train(ConfigArgs),
    /// Evaluate a persisted run directory on a TSV corpus.
    Eval {
        /// Run directory holding checkpoint.json, boundaries.json,
        /// vocab.json, and known_classes.txt.
        #[arg(long)]
        run_dir: PathBuf,
        /// TSV corpus with text<TAB>label lines; labels outside the run's
        /// known classes count as open.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Materialize a known-intent-ratio split to TSV files.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        kir: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Prefix-length ablation.
    AblateLength {
        #[command(flatten)]
        config: ConfigArgs,
        /// Prefix lengths to sweep, comma separated.
        #[arg(long, default_value = "2,4,8")]
        lengths: String,
    },
    /// "Just x" / "x and Rest" layer-grouping ablation.
    AblateLayers {
        #[command(flatten)]
        config: ConfigArgs,
        /// Layers to sweep, comma separated; defaults to every layer.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Final-layer component ablation.
    AblateComponents(ConfigArgs),
    /// Generate a synthetic intent corpus TSV.
    Synth {
        #[arg(long, default_value_t = 12)]
        intents: usize,
        #[arg(long, default_value_t = 60)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let result = run_experiment(&cfg)?;
            for outcome in &result.outcomes {
                let zero_note = if outcome.open_support_is_zero {
                    "  [open F1 has zero support]"
                } else {
                    ""
                };
                println!(
                    "kir {:.2} seed {}: acc {:.4}  macro-f1 {:.4}  open-f1 {:.4}  known-f1 {:.4}  ({} / {} trainable params){zero_note}",
                    outcome.kir,
                    outcome.seed,
                    outcome.metrics.accuracy,
                    outcome.metrics.macro_f1,
                    outcome.metrics.open_f1,
                    outcome.metrics.known_macro_f1,
                    outcome.trainable_params,
                    outcome.total_params,
                );
            }
            for (kir, seed, message) in &result.failures {
                eprintln!("kir {kir:.2} seed {seed} FAILED: {message}");
            }
            let (table, _) = report(&report_rows(&result))?;
            println!("\n{table}");
            for s in &result.summaries {
                println!(
                    "kir {:.2} over {} seeds: acc {:.4}±{:.4}  macro-f1 {:.4}±{:.4}  open-f1 {:.4}±{:.4}  known-f1 {:.4}±{:.4}",
                    s.kir,
                    s.seeds,
                    s.accuracy_mean,
                    s.accuracy_std,
                    s.macro_f1_mean,
                    s.macro_f1_std,
                    s.open_f1_mean,
                    s.open_f1_std,
                    s.known_macro_f1_mean,
                    s.known_macro_f1_std,
                );
            }
            Ok(())
        }
        Command::Eval { run_dir, dataset } => {
            let model = Model::load(&run_dir.join("checkpoint.json"))?;
            let boundaries = BoundarySet::load(&run_dir.join("boundaries.json"))?;
            let vocab: Vocabulary =
                serde_json::from_str(&std::fs::read_to_string(run_dir.join("vocab.json"))?)
                    .context("reading vocab.json")?;
            let known: Vec<String> = std::fs::read_to_string(run_dir.join("known_classes.txt"))?
                .lines()
                .map(String::from)
                .collect();
            if known.len() != boundaries.num_classes() {
                bail!(
                    "{} known classes but {} boundaries",
                    known.len(),
                    boundaries.num_classes()
                );
            }
            let corpus = data::load_tsv(&dataset)?;
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for (i, utterance) in corpus.iter().enumerate() {
                let tokens =
                    data::tokenize(&utterance.text, &vocab, model.cfg.encoder.max_seq_len)?;
                let rep = model.represent(i, &tokens)?;
                preds.push(adb::predict_open(&rep.vector, &boundaries));
                golds.push(
                    known
                        .iter()
                        .position(|k| k == &utterance.label)
                        .unwrap_or(boundaries.open_class()),
                );
            }
            let metrics = openintent::eval::evaluate(&preds, &golds, known.len() + 1)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Split {
            dataset,
            kir,
            seed,
            out_dir,
        } => {
            let corpus = data::load_tsv(&dataset)?;
            let split = data::make_split(&corpus, &SplitSpec::new(kir, seed))?;
            std::fs::create_dir_all(&out_dir)?;
            let to_utterances = |samples: &[data::SplitSample]| -> Vec<data::LabeledUtterance> {
                samples
                    .iter()
                    .map(|s| corpus[s.utterance_id].clone())
                    .collect()
            };
            data::save_tsv(&out_dir.join("train.tsv"), &to_utterances(&split.train))?;
            data::save_tsv(&out_dir.join("dev.tsv"), &to_utterances(&split.dev))?;
            data::save_tsv(&out_dir.join("test.tsv"), &to_utterances(&split.test))?;
            std::fs::write(
                out_dir.join("known_classes.txt"),
                split.known_classes.join("\n") + "\n",
            )?;
            println!(
                "split written to {}: {} train / {} dev / {} test, {} known classes",
                out_dir.display(),
                split.train.len(),
                split.dev.len(),
                split.test.len(),
                split.known_classes.len()
            );
            Ok(())
        }
        Command::AblateLength { config, lengths } => {
            let cfg = config.resolve()?;
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(|t| t.trim().parse().context("parsing --lengths"))
                .collect::<Result<_>>()?;
            let table = ablate_prefix_length(&cfg, &lengths)?;
            print!("{}", table.render());
            write_table(&cfg, "ablate_length.json", &table)
        }
        Command::AblateLayers { config, layers } => {
            let cfg = config.resolve()?;
            let layers: Vec<usize> = match layers {
                Some(text) => text
                    .split(',')
                    .map(|t| t.trim().parse().context("parsing --layers"))
                    .collect::<Result<_>>()?,
                None => (1..=cfg.num_layers).collect(),
            };
            let table = ablate_layer_grouping(&cfg, &layers)?;
            print!("{}", table.render());
            write_table(&cfg, "ablate_layers.json", &table)
        }
        Command::AblateComponents(args) => {
            let cfg = args.resolve()?;
            let table = ablate_last_layer_components(&cfg)?;
            print!("{}", table.render());
            write_table(&cfg, "ablate_components.json", &table)
        }
        Command::Synth {
            intents,
            samples,
            seed,
            out,
        } => {
            let corpus = data::synth_corpus(intents, samples, seed)?;
            data::save_tsv(&out, &corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), out.display());
            Ok(())
        }
    }
}

fn write_table(
    cfg: &ExperimentConfig,
    file: &str,
    table: &openintent_cli::AblationTable,
) -> Result<()> {
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(file), serde_json::to_string_pretty(table)?)?;
    }
    Ok(())
}
