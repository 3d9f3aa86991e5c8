//! End-to-end experiment execution: split → pre-train → finalize prefixes →
//! extract representations → boundary learning → evaluation, per seed, with
//! seed averaging and the ablation drivers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use openintent::adb::{self, BoundarySet};
use openintent::data::{self, DataSplit, LabeledUtterance, SplitSpec, Vocabulary};
use openintent::encoder::{EncoderConfig, TokenSequence};
use openintent::eval::{self, MetricsReport};
use openintent::head::IntentRepresentation;
use openintent::model::{trainable_param_stats, Model, ModelConfig};
use openintent::prefix::PrefixConfig;
use openintent::trainer::{self, TrainConfig};

use crate::config::{DatasetSource, ExperimentConfig};

/// Outcome of one (kir, seed) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub kir: f64,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub trainable_params: usize,
    pub total_params: usize,
    pub best_dev_accuracy: f64,
    /// True when the test set had no open-class gold samples (KIR 1.0), in
    /// which case open_f1 is a zero-support value.
    pub open_support_is_zero: bool,
    pub run_dir: Option<PathBuf>,
}

/// Mean and sample standard deviation of the headline metrics over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub kir: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub open_f1_mean: f64,
    pub open_f1_std: f64,
    pub known_macro_f1_mean: f64,
    pub known_macro_f1_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub outcomes: Vec<SeedOutcome>,
    pub summaries: Vec<MetricSummary>,
    /// (kir, seed, message) for seeds that failed.
    pub failures: Vec<(f64, u64, String)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn load_corpus(source: &DatasetSource) -> Result<Vec<LabeledUtterance>> {
    Ok(match source {
        DatasetSource::Tsv(path) => data::load_tsv(path)
            .with_context(|| format!("loading corpus {}", path.display()))?,
        DatasetSource::Synthetic {
            intents,
            samples_per_intent,
            seed,
        } => data::synth_corpus(*intents, *samples_per_intent, *seed)?,
    })
}

fn tokenize_samples(
    samples: &[data::SplitSample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<(TokenSequence, usize)>> {
    samples
        .iter()
        .map(|s| Ok((data::tokenize(&s.text, vocab, max_len)?, s.label)))
        .collect::<std::result::Result<_, openintent::Error>>()
        .map_err(Into::into)
}

/// Artifacts of one seed's full pipeline, before persistence.
struct SeedArtifacts {
    metrics: MetricsReport,
    model: Model,
    boundaries: BoundarySet,
    reps: Vec<IntentRepresentation>,
    rep_labels: Vec<usize>,
    history_csv: String,
    best_dev_accuracy: f64,
    trainable_params: usize,
    total_params: usize,
    open_support_is_zero: bool,
    split: DataSplit,
    vocab: Vocabulary,
}

fn run_seed(
    cfg: &ExperimentConfig,
    corpus: &[LabeledUtterance],
    kir: f64,
    seed: u64,
) -> Result<SeedArtifacts> {
    let split_spec = SplitSpec {
        known_intent_ratio: kir,
        rng_seed: seed,
        train_fraction: cfg.train_fraction,
        dev_fraction: cfg.dev_fraction,
        test_fraction: cfg.test_fraction,
    };
    let split = data::make_split(corpus, &split_spec)?;
    let num_classes = split.known_classes.len();

    // vocabulary over the whole corpus: open-class words keep their own
    // (frozen, never-trained) embeddings instead of collapsing onto the
    // unknown token, mirroring a subword tokenizer that covers everything
    let vocab = Vocabulary::build(corpus.iter().map(|u| u.text.as_str()));

    let encoder = EncoderConfig {
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        num_heads: cfg.num_heads,
        ff_dim: cfg.ff_dim,
        vocab_size: vocab.len(),
        max_seq_len: cfg.max_seq_len,
        feature_dim: cfg.feature_dim,
    };
    let prefix_len = cfg.effective_prefix_len()?;
    let prefix = match cfg.effective_prefix_mode()? {
        openintent::prefix::PrefixMode::Embed => PrefixConfig::embed(prefix_len),
        openintent::prefix::PrefixMode::Mlp => {
            PrefixConfig::mlp(prefix_len, cfg.effective_mlp_hidden())
        }
    };
    let model_cfg = ModelConfig {
        encoder,
        prefix,
        num_classes,
    };
    let plan = cfg.plan_spec()?.to_plan(cfg.num_layers)?;
    let stats = trainable_param_stats(&model_cfg, &plan)?;

    let mut model = Model::new(model_cfg, seed)?;
    model.apply_plan(&plan)?;

    let train_set = tokenize_samples(&split.train, &vocab, cfg.max_seq_len)?;
    let dev_set = tokenize_samples(&split.dev, &vocab, cfg.max_seq_len)?;
    let train_cfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        rng_seed: seed,
    };
    let history = trainer::train(&mut model, &train_set, &dev_set, &train_cfg)?;

    // prefixes become constants; the perceptron is dropped
    let model = model.finalize_prefixes()?;

    // boundary learning on the frozen training representations
    let mut reps = Vec::with_capacity(split.train.len());
    let mut rep_labels = Vec::with_capacity(split.train.len());
    for s in &split.train {
        let tokens = data::tokenize(&s.text, &vocab, cfg.max_seq_len)?;
        reps.push(model.represent(s.utterance_id, &tokens)?);
        rep_labels.push(s.label);
    }
    let boundaries = adb::learn_boundaries(&reps, &rep_labels, num_classes, &cfg.adb)?;

    // (N+1)-way evaluation over the full test set
    let mut preds = Vec::with_capacity(split.test.len());
    let mut golds = Vec::with_capacity(split.test.len());
    for s in &split.test {
        let tokens = data::tokenize(&s.text, &vocab, cfg.max_seq_len)?;
        let rep = model.represent(s.utterance_id, &tokens)?;
        preds.push(adb::predict_open(&rep.vector, &boundaries));
        golds.push(s.label);
    }
    let metrics = eval::evaluate(&preds, &golds, num_classes + 1)?;
    let open_support_is_zero = !golds.iter().any(|&g| g == split.open_class);

    Ok(SeedArtifacts {
        metrics,
        model,
        boundaries,
        reps,
        rep_labels,
        history_csv: history.to_csv(),
        best_dev_accuracy: history.best_dev_accuracy,
        trainable_params: stats.trainable,
        total_params: stats.total,
        open_support_is_zero,
        split,
        vocab,
    })
}

fn persist_seed(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    kir: f64,
    seed: u64,
    artifacts: &SeedArtifacts,
) -> Result<PathBuf> {
    let run_dir = out_dir.join(format!("kir{:03}_seed{seed}", (kir * 100.0).round() as u32));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config_snapshot.txt"), cfg.to_kv_text())?;
    std::fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_string_pretty(&artifacts.metrics)?,
    )?;
    std::fs::write(run_dir.join("history.csv"), &artifacts.history_csv)?;
    artifacts.model.save(&run_dir.join("checkpoint.json"))?;
    artifacts.boundaries.save(&run_dir.join("boundaries.json"))?;
    adb::write_representations(
        &run_dir.join("representations.tsv"),
        &artifacts.reps,
        &artifacts.rep_labels,
    )?;
    std::fs::write(
        run_dir.join("known_classes.txt"),
        artifacts.split.known_classes.join("\n") + "\n",
    )?;
    std::fs::write(
        run_dir.join("vocab.json"),
        serde_json::to_string(&artifacts.vocab)?,
    )?;
    Ok(run_dir)
}

/// Run the full pipeline for every (kir, seed) pair, persisting artifacts
/// when `out_dir` is set. Fails only if every seed of some KIR fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() {
        bail!("seed list is empty");
    }
    if cfg.kirs.is_empty() {
        bail!("no known-intent ratio given");
    }
    let corpus = load_corpus(&cfg.dataset)?;
    let method = cfg.plan_spec()?.method_label();

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut summaries = Vec::new();
    for &kir in &cfg.kirs {
        let mut kir_outcomes = Vec::new();
        for &seed in &cfg.seeds {
            match run_seed(cfg, &corpus, kir, seed) {
                Ok(artifacts) => {
                    let run_dir = match &cfg.out_dir {
                        Some(dir) => Some(persist_seed(cfg, dir, kir, seed, &artifacts)?),
                        None => None,
                    };
                    kir_outcomes.push(SeedOutcome {
                        kir,
                        seed,
                        metrics: artifacts.metrics,
                        trainable_params: artifacts.trainable_params,
                        total_params: artifacts.total_params,
                        best_dev_accuracy: artifacts.best_dev_accuracy,
                        open_support_is_zero: artifacts.open_support_is_zero,
                        run_dir,
                    });
                }
                Err(err) => failures.push((kir, seed, format!("{err:#}"))),
            }
        }
        if kir_outcomes.is_empty() {
            bail!(
                "every seed failed for kir {kir}: {:?}",
                failures
                    .iter()
                    .filter(|(k, _, _)| *k == kir)
                    .map(|(_, s, m)| format!("seed {s}: {m}"))
                    .collect::<Vec<_>>()
            );
        }
        let col = |f: fn(&MetricsReport) -> f64| -> Vec<f64> {
            kir_outcomes.iter().map(|o| f(&o.metrics)).collect()
        };
        let (accuracy_mean, accuracy_std) = mean_std(&col(|m| m.accuracy));
        let (macro_f1_mean, macro_f1_std) = mean_std(&col(|m| m.macro_f1));
        let (open_f1_mean, open_f1_std) = mean_std(&col(|m| m.open_f1));
        let (known_macro_f1_mean, known_macro_f1_std) = mean_std(&col(|m| m.known_macro_f1));
        summaries.push(MetricSummary {
            kir,
            seeds: kir_outcomes.len(),
            accuracy_mean,
            accuracy_std,
            macro_f1_mean,
            macro_f1_std,
            open_f1_mean,
            open_f1_std,
            known_macro_f1_mean,
            known_macro_f1_std,
        });
        outcomes.extend(kir_outcomes);
    }

    let result = ExperimentResult {
        method,
        outcomes,
        summaries,
        failures,
    };
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&result)?,
        )?;
    }
    Ok(result)
}

// ── ablation drivers ─────────────────────────────────────────────────────

/// A labeled table with a fixed column schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cells: Vec<f64>,
    pub trainable_params: usize,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "{}", self.columns.join("\t"));
        for row in &self.rows {
            let cells: Vec<String> = row.cells.iter().map(|c| format!("{c:.4}")).collect();
            let _ = writeln!(out, "{}\t{}", row.label, cells.join("\t"));
        }
        out
    }
}

fn summary_cells(result: &ExperimentResult) -> [f64; 4] {
    // ablations run a single KIR; the first summary is that KIR's
    let s = &result.summaries[0];
    [
        s.accuracy_mean,
        s.macro_f1_mean,
        s.open_f1_mean,
        s.known_macro_f1_mean,
    ]
}

fn single_run_stats(cfg: &ExperimentConfig) -> Result<usize> {
    // trainable-parameter count for the configured plan on a nominal
    // vocabulary; the count of encoder/prefix/head scalars does not depend
    // on the corpus except through vocab_size, which the plan never covers
    let encoder = EncoderConfig {
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        num_heads: cfg.num_heads,
        ff_dim: cfg.ff_dim,
        vocab_size: 2,
        max_seq_len: cfg.max_seq_len,
        feature_dim: cfg.feature_dim,
    };
    let prefix_len = cfg.effective_prefix_len()?;
    let prefix = match cfg.effective_prefix_mode()? {
        openintent::prefix::PrefixMode::Embed => PrefixConfig::embed(prefix_len),
        openintent::prefix::PrefixMode::Mlp => {
            PrefixConfig::mlp(prefix_len, cfg.effective_mlp_hidden())
        }
    };
    let model_cfg = ModelConfig {
        encoder,
        prefix,
        num_classes: 2,
    };
    let plan = cfg.plan_spec()?.to_plan(cfg.num_layers)?;
    Ok(trainable_param_stats(&model_cfg, &plan)?.trainable)
}

/// One experiment per prefix length, fixed seeds; rows follow the published
/// Length/Accuracy/F1-score/Open/Known layout.
pub fn ablate_prefix_length(cfg: &ExperimentConfig, lengths: &[usize]) -> Result<AblationTable> {
    if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
        bail!("prefix lengths must be positive");
    }
    let mut rows = Vec::new();
    for &length in lengths {
        let mut run_cfg = cfg.clone();
        run_cfg.prefix_len = length;
        run_cfg.out_dir = cfg
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("length{length}")));
        let result = run_experiment(&run_cfg)?;
        rows.push(AblationRow {
            label: length.to_string(),
            cells: summary_cells(&result).to_vec(),
            trainable_params: single_run_stats(&run_cfg)?,
        });
    }
    Ok(AblationTable {
        title: format!("prefix length ablation ({})", cfg.plan),
        columns: ["Length", "Accuracy", "F1-score", "Open", "Known"]
            .map(String::from)
            .to_vec(),
        rows,
    })
}

/// "Just x" and "x and Rest" per layer, plus the No-FT (prefix-only) row;
/// for x = N the two variants coincide and run once.
pub fn ablate_layer_grouping(cfg: &ExperimentConfig, layers: &[usize]) -> Result<AblationTable> {
    let n = cfg.num_layers;
    if layers.iter().any(|&x| x == 0 || x > n) {
        bail!("layer indices must lie in 1..={n}");
    }
    let run_with_plan = |plan: &str, subdir: &str| -> Result<(ExperimentResult, usize)> {
        let mut run_cfg = cfg.clone();
        run_cfg.plan = plan.to_string();
        run_cfg.out_dir = cfg.out_dir.as_ref().map(|d| d.join(subdir));
        let result = run_experiment(&run_cfg)?;
        let trainable = single_run_stats(&run_cfg)?;
        Ok((result, trainable))
    };

    let mut rows = Vec::new();
    let (noft, noft_trainable) = run_with_plan("prefix-only", "noft")?;
    let noft_cells = summary_cells(&noft);
    rows.push(AblationRow {
        label: "No-FT".into(),
        cells: vec![noft_cells[0], noft_cells[1], noft_cells[0], noft_cells[1]],
        trainable_params: noft_trainable,
    });

    let mut sorted: Vec<usize> = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &x in sorted.iter().rev() {
        let (just, just_trainable) = run_with_plan(&format!("prefix+just:{x}"), &format!("just{x}"))?;
        let just_cells = summary_cells(&just);
        let (rest_cells, rest_trainable) = if x == n {
            // "Just N" and "N and Rest" are the same plan; reuse the run
            ([just_cells[0], just_cells[1]], just_trainable)
        } else {
            let (rest, rest_trainable) =
                run_with_plan(&format!("prefix+rest:{x}"), &format!("rest{x}"))?;
            let cells = summary_cells(&rest);
            ([cells[0], cells[1]], rest_trainable)
        };
        let _ = rest_trainable;
        rows.push(AblationRow {
            label: x.to_string(),
            cells: vec![just_cells[0], just_cells[1], rest_cells[0], rest_cells[1]],
            trainable_params: just_trainable,
        });
    }
    Ok(AblationTable {
        title: "layer grouping ablation".into(),
        columns: [
            "x",
            "Just x: Accuracy",
            "Just x: F1-Score",
            "x and Rest: Accuracy",
            "x and Rest: F1-Score",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    })
}

/// Trainable-parameter counts for the "x and Rest" plans, in the same
/// descending-x order the grouping table uses.
pub fn rest_plan_trainable_counts(cfg: &ExperimentConfig, layers: &[usize]) -> Result<Vec<usize>> {
    let mut sorted: Vec<usize> = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .iter()
        .rev()
        .map(|&x| {
            let mut run_cfg = cfg.clone();
            run_cfg.plan = format!("prefix+rest:{x}");
            single_run_stats(&run_cfg)
        })
        .collect()
}

/// One experiment per final-layer component family.
pub fn ablate_last_layer_components(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let variants = [
        ("Attention", "component:attn"),
        ("Feed Forward", "component:ff"),
        ("Layer Normalization", "component:ln"),
        ("Keys and Values", "component:kv"),
        ("Entire Layer", "component:entire"),
    ];
    let mut rows = Vec::new();
    for (label, plan) in variants {
        let mut run_cfg = cfg.clone();
        run_cfg.plan = plan.to_string();
        run_cfg.out_dir = cfg
            .out_dir
            .as_ref()
            .map(|d| d.join(plan.replace(':', "_")));
        let result = run_experiment(&run_cfg)?;
        rows.push(AblationRow {
            label: label.to_string(),
            cells: summary_cells(&result).to_vec(),
            trainable_params: single_run_stats(&run_cfg)?,
        });
    }
    Ok(AblationTable {
        title: "final-layer component ablation".into(),
        columns: ["Method", "Accuracy", "F1-Score", "Open", "Known"]
            .map(String::from)
            .to_vec(),
        rows,
    })
}

// ── reporting ────────────────────────────────────────────────────────────

/// One line of the main-results table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub kir: f64,
    pub method: String,
    pub accuracy: f64,
    pub f1_score: f64,
}

/// Format results in the main-table layout (KIR, Method, Accuracy,
/// F1-Score) and as JSON.
pub fn report(rows: &[ReportRow]) -> Result<(String, String)> {
    if rows.is_empty() {
        bail!("nothing to report");
    }
    let mut table = String::from("KIR\tMethod\tAccuracy\tF1-Score\n");
    for row in rows {
        let _ = writeln!(
            table,
            "{:.0}%\t{}\t{:.2}\t{:.2}",
            row.kir * 100.0,
            row.method,
            row.accuracy,
            row.f1_score
        );
    }
    let json = serde_json::to_string_pretty(rows)?;
    Ok((table, json))
}

/// Rows for [`report`] from an experiment result, percentages in 0..100.
pub fn report_rows(result: &ExperimentResult) -> Vec<ReportRow> {
    result
        .summaries
        .iter()
        .map(|s| ReportRow {
            kir: s.kir,
            method: result.method.clone(),
            accuracy: s.accuracy_mean * 100.0,
            f1_score: s.macro_f1_mean * 100.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A quick config: tiny corpus, tiny model, few epochs.
    pub fn quick_config(seeds: &[u64]) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                intents: 6,
                samples_per_intent: 12,
                seed: 3,
            },
            kirs: vec![0.5],
            seeds: seeds.to_vec(),
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            feature_dim: 24,
            prefix_len: 2,
            max_epochs: 6,
            patience: 6,
            batch_size: 8,
            learning_rate: 3e-3,
            ..ExperimentConfig::default()
        };
        cfg.adb.epochs = 40;
        cfg
    }

    #[test]
    fn experiment_produces_per_seed_metrics_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(&[1, 2]);
        cfg.out_dir = Some(dir.path().to_path_buf());
        let result = run_experiment(&cfg).unwrap();
        assert_eq!(result.outcomes.len(), 2);
        assert_eq!(result.summaries.len(), 1);
        assert!(result.failures.is_empty());
        for outcome in &result.outcomes {
            let run_dir = outcome.run_dir.as_ref().unwrap();
            for file in [
                "config_snapshot.txt",
                "metrics.json",
                "history.csv",
                "checkpoint.json",
                "boundaries.json",
                "representations.tsv",
                "known_classes.txt",
            ] {
                assert!(run_dir.join(file).exists(), "{file} missing");
            }
        }
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn aggregate_mean_matches_scalar_oracle() {
        let cfg = quick_config(&[1, 2, 3]);
        let result = run_experiment(&cfg).unwrap();
        let accs: Vec<f64> = result.outcomes.iter().map(|o| o.metrics.accuracy).collect();
        let oracle = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((result.summaries[0].accuracy_mean - oracle).abs() < 1e-15);
    }

    #[test]
    fn kir_one_flags_zero_open_support() {
        let mut cfg = quick_config(&[1]);
        cfg.kirs = vec![1.0];
        let result = run_experiment(&cfg).unwrap();
        assert!(result.outcomes[0].open_support_is_zero);
        assert_eq!(result.outcomes[0].metrics.open_f1, 0.0);
    }

    #[test]
    fn report_formats_the_published_fixture_row() {
        // formatting fixture only: the published BANKING 25% row
        let rows = vec![ReportRow {
            kir: 0.25,
            method: "PFT-ADB".into(),
            accuracy: 80.14,
            f1_score: 72.86,
        }];
        let (table, json) = report(&rows).unwrap();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "KIR\tMethod\tAccuracy\tF1-Score");
        assert_eq!(lines.next().unwrap(), "25%\tPFT-ADB\t80.14\t72.86");
        let back: Vec<ReportRow> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].method, "PFT-ADB");
        assert_eq!(back[0].accuracy, 80.14);
    }

    #[test]
    fn report_rejects_empty_results() {
        assert!(report(&[]).is_err());
    }

    #[test]
    fn rest_counts_grow_as_x_decreases() {
        let cfg = quick_config(&[1]);
        let counts = rest_plan_trainable_counts(&cfg, &[1, 2]).unwrap();
        // descending x order: rest:2 first, then rest:1
        assert_eq!(counts.len(), 2);
        assert!(counts[1] > counts[0]);
    }

    #[test]
    fn ablation_rows_map_to_persisted_run_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(&[1]);
        cfg.out_dir = Some(dir.path().to_path_buf());
        let table = ablate_prefix_length(&cfg, &[2, 3]).unwrap();
        assert_eq!(table.rows.len(), 2);
        for length in [2, 3] {
            let run = dir
                .path()
                .join(format!("length{length}"))
                .join("kir050_seed1");
            assert!(run.join("config_snapshot.txt").exists());
            assert!(run.join("metrics.json").exists());
            let snapshot = std::fs::read_to_string(run.join("config_snapshot.txt")).unwrap();
            assert!(snapshot.contains(&format!("prefix_len = {length}")));
        }
    }
}
