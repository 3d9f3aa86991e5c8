//! Experiment configuration: flat key=value files, command-line overrides,
//! and the tuning-plan descriptor grammar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use openintent::adb::AdbConfig;
use openintent::encoder::{PlanComponent, TuningPlan};
use openintent::prefix::PrefixMode;

/// Corpus source: a TSV file or the built-in synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Tsv(PathBuf),
    Synthetic {
        intents: usize,
        samples_per_intent: usize,
        seed: u64,
    },
}

/// Parsed tuning-plan descriptor, e.g. "prefix+just:12", "prefix(mlp)+rest:11",
/// "prefix-only", "component:kv", "fft-nopt".
#[derive(Clone, Debug, PartialEq)]
pub struct PlanSpec {
    pub descriptor: String,
    pub kind: PlanKind,
    /// Prefix mode forced by a "(embed)"/"(mlp)" qualifier.
    pub mode_override: Option<PrefixMode>,
    /// True for plans defined to run without any prefix tokens.
    pub disable_prefix: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PlanKind {
    PrefixOnly,
    JustLayer(usize),
    LayerAndRest(usize),
    Component(PlanComponent),
    FullFineTuneNoPrefix,
}

impl PlanSpec {
    pub fn parse(descriptor: &str) -> Result<PlanSpec> {
        let original = descriptor.to_string();
        let lower = descriptor.to_lowercase();
        if lower == "fft-nopt" {
            return Ok(PlanSpec {
                descriptor: original,
                kind: PlanKind::FullFineTuneNoPrefix,
                mode_override: None,
                disable_prefix: true,
            });
        }
        if let Some(rest) = lower.strip_prefix("component:") {
            let component = match rest {
                "attn" | "attention" => PlanComponent::Attention,
                "ff" | "feed-forward" => PlanComponent::FeedForward,
                "ln" | "layer-norm" => PlanComponent::LayerNorm,
                "kv" | "keys-values" => PlanComponent::KeysValues,
                "entire" | "entire-layer" => PlanComponent::EntireLayer,
                other => bail!("unknown component '{other}' in plan descriptor"),
            };
            return Ok(PlanSpec {
                descriptor: original,
                kind: PlanKind::Component(component),
                mode_override: None,
                disable_prefix: false,
            });
        }
        let Some(after) = lower.strip_prefix("prefix") else {
            bail!("unrecognized plan descriptor '{descriptor}'");
        };
        let (mode_override, after) = if let Some(rest) = after.strip_prefix("(embed)") {
            (Some(PrefixMode::Embed), rest)
        } else if let Some(rest) = after.strip_prefix("(mlp)") {
            (Some(PrefixMode::Mlp), rest)
        } else {
            (None, after)
        };
        let kind = if after == "-only" {
            PlanKind::PrefixOnly
        } else if let Some(x) = after.strip_prefix("+just:") {
            PlanKind::JustLayer(x.parse().context("layer index in plan descriptor")?)
        } else if let Some(x) = after.strip_prefix("+rest:") {
            PlanKind::LayerAndRest(x.parse().context("layer index in plan descriptor")?)
        } else {
            bail!("unrecognized plan descriptor '{descriptor}'");
        };
        Ok(PlanSpec {
            descriptor: original,
            kind,
            mode_override,
            disable_prefix: false,
        })
    }

    pub fn to_plan(&self, num_layers: usize) -> Result<TuningPlan> {
        let plan = match self.kind {
            PlanKind::PrefixOnly => TuningPlan::prefix_only(num_layers),
            PlanKind::JustLayer(x) => TuningPlan::just_layer(num_layers, x)?,
            PlanKind::LayerAndRest(x) => TuningPlan::layer_and_rest(num_layers, x)?,
            PlanKind::Component(c) => TuningPlan::last_layer_component(num_layers, c),
            PlanKind::FullFineTuneNoPrefix => TuningPlan::full_fine_tune_no_prefix(num_layers),
        };
        Ok(plan)
    }

    /// Human-readable method name for tables.
    pub fn method_label(&self) -> String {
        self.descriptor.clone()
    }
}

/// Everything one experiment needs; every field has a key=value spelling.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub kirs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub plan: String,

    pub prefix_len: usize,
    pub prefix_mode: PrefixMode,
    /// Perceptron width; 0 means the 4·hidden_dim default.
    pub mlp_hidden: usize,

    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub feature_dim: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,

    pub adb: AdbConfig,

    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,

    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                intents: 12,
                samples_per_intent: 60,
                seed: 7,
            },
            kirs: vec![0.5],
            seeds: vec![1, 2, 3, 4, 5],
            plan: "prefix(mlp)+just:2".into(),
            prefix_len: 4,
            prefix_mode: PrefixMode::Mlp,
            mlp_hidden: 0,
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            ff_dim: 128,
            max_seq_len: 16,
            feature_dim: 64,
            learning_rate: 2e-3,
            batch_size: 16,
            max_epochs: 60,
            patience: 12,
            adb: AdbConfig::default(),
            train_fraction: 0.7,
            dev_fraction: 0.1,
            test_fraction: 0.2,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn plan_spec(&self) -> Result<PlanSpec> {
        PlanSpec::parse(&self.plan)
    }

    /// Effective prefix mode after the plan descriptor's qualifier.
    pub fn effective_prefix_mode(&self) -> Result<PrefixMode> {
        Ok(self.plan_spec()?.mode_override.unwrap_or(self.prefix_mode))
    }

    /// Effective prefix length: zero when the plan disables prefixes.
    pub fn effective_prefix_len(&self) -> Result<usize> {
        Ok(if self.plan_spec()?.disable_prefix {
            0
        } else {
            self.prefix_len
        })
    }

    pub fn effective_mlp_hidden(&self) -> usize {
        if self.mlp_hidden == 0 {
            4 * self.hidden_dim
        } else {
            self.mlp_hidden
        }
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let content = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv_text(&content)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines ('#' starts a comment).
    pub fn apply_kv_text(&mut self, content: &str) -> Result<()> {
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got '{raw}'", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// Set one field from its key=value spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    match self.dataset {
                        DatasetSource::Synthetic { .. } => self.dataset.clone(),
                        _ => DatasetSource::Synthetic {
                            intents: 12,
                            samples_per_intent: 60,
                            seed: 7,
                        },
                    }
                } else {
                    DatasetSource::Tsv(PathBuf::from(value))
                }
            }
            "synth_intents" => {
                let intents = value.parse()?;
                self.with_synth(|s| s.0 = intents)?;
            }
            "synth_samples" => {
                let samples = value.parse()?;
                self.with_synth(|s| s.1 = samples)?;
            }
            "synth_seed" => {
                let seed = value.parse()?;
                self.with_synth(|s| s.2 = seed)?;
            }
            "kir" | "kirs" => {
                self.kirs = value
                    .split(',')
                    .map(|t| t.trim().parse::<f64>().map_err(Into::into))
                    .collect::<Result<_>>()?;
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|t| t.trim().parse::<u64>().map_err(Into::into))
                    .collect::<Result<_>>()?;
            }
            "plan" => self.plan = value.to_string(),
            "prefix_len" => self.prefix_len = value.parse()?,
            "prefix_mode" => {
                self.prefix_mode = match value.to_lowercase().as_str() {
                    "embed" => PrefixMode::Embed,
                    "mlp" => PrefixMode::Mlp,
                    other => bail!("prefix_mode must be embed or mlp, got '{other}'"),
                }
            }
            "mlp_hidden" => self.mlp_hidden = value.parse()?,
            "num_layers" => self.num_layers = value.parse()?,
            "hidden_dim" => self.hidden_dim = value.parse()?,
            "num_heads" => self.num_heads = value.parse()?,
            "ff_dim" => self.ff_dim = value.parse()?,
            "max_seq_len" => self.max_seq_len = value.parse()?,
            "feature_dim" => self.feature_dim = value.parse()?,
            "learning_rate" | "lr" => self.learning_rate = value.parse()?,
            "batch_size" => self.batch_size = value.parse()?,
            "max_epochs" => self.max_epochs = value.parse()?,
            "patience" => self.patience = value.parse()?,
            "adb_lr" => self.adb.learning_rate = value.parse()?,
            "adb_epochs" => self.adb.epochs = value.parse()?,
            "adb_outside_weight" => self.adb.outside_weight = value.parse()?,
            "adb_inside_weight" => self.adb.inside_weight = value.parse()?,
            "train_fraction" => self.train_fraction = value.parse()?,
            "dev_fraction" => self.dev_fraction = value.parse()?,
            "test_fraction" => self.test_fraction = value.parse()?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    fn with_synth(&mut self, edit: impl FnOnce(&mut (usize, usize, u64))) -> Result<()> {
        let mut tuple = match &self.dataset {
            DatasetSource::Synthetic {
                intents,
                samples_per_intent,
                seed,
            } => (*intents, *samples_per_intent, *seed),
            DatasetSource::Tsv(_) => (12, 60, 7),
        };
        edit(&mut tuple);
        self.dataset = DatasetSource::Synthetic {
            intents: tuple.0,
            samples_per_intent: tuple.1,
            seed: tuple.2,
        };
        Ok(())
    }

    /// Sorted key=value snapshot, written next to every run's outputs.
    pub fn to_kv_text(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        match &self.dataset {
            DatasetSource::Tsv(path) => {
                map.insert("dataset", path.display().to_string());
            }
            DatasetSource::Synthetic {
                intents,
                samples_per_intent,
                seed,
            } => {
                map.insert("dataset", "synthetic".into());
                map.insert("synth_intents", intents.to_string());
                map.insert("synth_samples", samples_per_intent.to_string());
                map.insert("synth_seed", seed.to_string());
            }
        }
        map.insert(
            "kirs",
            self.kirs
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert(
            "seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("plan", self.plan.clone());
        map.insert("prefix_len", self.prefix_len.to_string());
        map.insert(
            "prefix_mode",
            match self.prefix_mode {
                PrefixMode::Embed => "embed".into(),
                PrefixMode::Mlp => "mlp".into(),
            },
        );
        map.insert("mlp_hidden", self.mlp_hidden.to_string());
        map.insert("num_layers", self.num_layers.to_string());
        map.insert("hidden_dim", self.hidden_dim.to_string());
        map.insert("num_heads", self.num_heads.to_string());
        map.insert("ff_dim", self.ff_dim.to_string());
        map.insert("max_seq_len", self.max_seq_len.to_string());
        map.insert("feature_dim", self.feature_dim.to_string());
        map.insert("learning_rate", self.learning_rate.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("max_epochs", self.max_epochs.to_string());
        map.insert("patience", self.patience.to_string());
        map.insert("adb_lr", self.adb.learning_rate.to_string());
        map.insert("adb_epochs", self.adb.epochs.to_string());
        map.insert("adb_outside_weight", self.adb.outside_weight.to_string());
        map.insert("adb_inside_weight", self.adb.inside_weight.to_string());
        map.insert("train_fraction", self.train_fraction.to_string());
        map.insert("dev_fraction", self.dev_fraction.to_string());
        map.insert("test_fraction", self.test_fraction.to_string());
        if let Some(dir) = &self.out_dir {
            map.insert("out_dir", dir.display().to_string());
        }
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_grammar_covers_the_table_variants() {
        let cases = [
            ("prefix-only", PlanKind::PrefixOnly, None, false),
            ("prefix(embed)-only", PlanKind::PrefixOnly, Some(PrefixMode::Embed), false),
            ("prefix(mlp)+just:12", PlanKind::JustLayer(12), Some(PrefixMode::Mlp), false),
            ("prefix+rest:11", PlanKind::LayerAndRest(11), None, false),
            ("component:kv", PlanKind::Component(PlanComponent::KeysValues), None, false),
            ("fft-nopt", PlanKind::FullFineTuneNoPrefix, None, true),
        ];
        for (text, kind, mode, disabled) in cases {
            let spec = PlanSpec::parse(text).unwrap();
            assert_eq!(spec.kind, kind, "{text}");
            assert_eq!(spec.mode_override, mode, "{text}");
            assert_eq!(spec.disable_prefix, disabled, "{text}");
        }
    }

    #[test]
    fn descriptor_rejects_garbage() {
        assert!(PlanSpec::parse("banana").is_err());
        assert!(PlanSpec::parse("prefix+just:x").is_err());
        assert!(PlanSpec::parse("component:everything").is_err());
    }

    #[test]
    fn rest_1_plan_trains_every_layer() {
        let spec = PlanSpec::parse("prefix+rest:1").unwrap();
        let plan = spec.to_plan(4).unwrap();
        assert!(plan.layers.iter().all(|l| l.attention && l.feed_forward && l.layer_norm));
    }

    #[test]
    fn descriptor_layer_out_of_range_is_an_error() {
        let spec = PlanSpec::parse("prefix+just:5").unwrap();
        assert!(spec.to_plan(2).is_err());
    }

    #[test]
    fn kv_text_roundtrips_through_parser() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("kir", "0.25,0.75").unwrap();
        cfg.set("seeds", "3,9").unwrap();
        cfg.set("plan", "component:ln").unwrap();
        cfg.set("prefix_len", "6").unwrap();
        let text = cfg.to_kv_text();
        let mut back = ExperimentConfig::default();
        back.apply_kv_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn cli_style_overrides_win_over_file_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv_text("prefix_len = 10\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.prefix_len, 10);
        cfg.set("prefix_len", "2").unwrap();
        assert_eq!(cfg.prefix_len, 2);
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn unknown_keys_are_rejected_with_context() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.apply_kv_text("no_such_key = 1\n").unwrap_err();
        assert!(format!("{err:#}").contains("no_such_key"));
    }

    #[test]
    fn fft_nopt_forces_zero_prefix_length() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("plan", "fft-nopt").unwrap();
        cfg.prefix_len = 10;
        assert_eq!(cfg.effective_prefix_len().unwrap(), 0);
    }

    #[test]
    fn plan_qualifier_overrides_prefix_mode() {
        let mut cfg = ExperimentConfig::default();
        cfg.prefix_mode = PrefixMode::Embed;
        cfg.plan = "prefix(mlp)+just:2".into();
        assert_eq!(cfg.effective_prefix_mode().unwrap(), PrefixMode::Mlp);
        cfg.plan = "prefix+just:2".into();
        assert_eq!(cfg.effective_prefix_mode().unwrap(), PrefixMode::Embed);
    }
}
