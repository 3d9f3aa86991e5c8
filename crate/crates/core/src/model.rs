//! Assembles encoder, prefix, and head parameters into one trainable model,
//! with checkpoint serialization and plan-based parameter statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, encoder_manifest, EncoderConfig, EncoderLayerParams, EncoderParams, ParamGroup,
    ParamSpec, TokenSequence, TuningPlan,
};
use crate::error::{Error, Result};
use crate::head::{self, head_manifest, HeadParams, IntentRepresentation};
use crate::numerics::{scalar_loss, ParamSet, Tape, Tensor};
use crate::prefix::{self, PrefixBank, PrefixConfig, PrefixParams};

/// Initialization range for weight matrices and embeddings.
const WEIGHT_INIT_RANGE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prefix: PrefixConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prefix.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Full parameter manifest: encoder, then prefix, then head.
pub fn model_manifest(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = encoder_manifest(&cfg.encoder);
    specs.extend(prefix_manifest_of(cfg));
    specs.extend(head_manifest(&cfg.encoder, cfg.num_classes));
    specs
}

fn prefix_manifest_of(cfg: &ModelConfig) -> Vec<ParamSpec> {
    prefix::prefix_manifest(&cfg.prefix, &cfg.encoder)
}

/// Trainable/total scalar counts for a plan, computed from shapes alone so
/// reference-scale geometries need no allocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamStats {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Count trainable scalars under `plan` and their ratio to the full model.
pub fn trainable_param_stats(cfg: &ModelConfig, plan: &TuningPlan) -> Result<ParamStats> {
    if plan.layers.len() != cfg.encoder.num_layers {
        return Err(Error::Plan(format!(
            "plan addresses {} layers but the model has {}",
            plan.layers.len(),
            cfg.encoder.num_layers
        )));
    }
    let mut trainable = 0;
    let mut total = 0;
    for spec in model_manifest(cfg) {
        let n = spec.numel();
        total += n;
        if plan.covers(spec.group) {
            trainable += n;
        }
    }
    Ok(ParamStats {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    })
}

/// The prefix-tuned encoder-classifier.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub groups: Vec<ParamGroup>,
    pub encoder: EncoderParams,
    pub prefix: PrefixParams,
    pub head: HeadParams,
}

impl Model {
    /// Allocate and initialize all parameters from `seed`. Layer-norm gains
    /// start at 1, biases at 0, everything else uniform(-0.1, 0.1).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut groups = Vec::new();

        for spec in encoder_manifest(&cfg.encoder) {
            let value = init_value(&spec, &mut rng);
            params.add(spec.name.clone(), value, false);
            groups.push(spec.group);
        }
        let encoder = index_encoder(&params, &cfg.encoder);

        let prefix = prefix::init_prefix(&mut params, &mut groups, &cfg.prefix, &cfg.encoder, &mut rng)?;

        for spec in head_manifest(&cfg.encoder, cfg.num_classes) {
            let value = init_value(&spec, &mut rng);
            params.add(spec.name.clone(), value, false);
            groups.push(spec.group);
        }
        let head = index_head(&params);

        Ok(Model {
            cfg,
            params,
            groups,
            encoder,
            prefix,
            head,
        })
    }

    /// Set trainability to exactly the parameters the plan addresses.
    pub fn apply_plan(&mut self, plan: &TuningPlan) -> Result<()> {
        if plan.layers.len() != self.cfg.encoder.num_layers {
            return Err(Error::Plan(format!(
                "plan addresses {} layers but the model has {}",
                plan.layers.len(),
                self.cfg.encoder.num_layers
            )));
        }
        encoder::apply_tuning_plan(&mut self.params, &self.groups, plan)
    }

    pub fn stats(&self, plan: &TuningPlan) -> Result<ParamStats> {
        trainable_param_stats(&self.cfg, plan)
    }

    /// Final hidden states for one sequence (inference).
    pub fn encode_tokens(&self, tokens: &TokenSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = tape.bind(&self.params);
        let bank = prefix::materialize_on_tape(&mut tape, &binding, &self.prefix, &self.cfg.encoder)?;
        let out = encoder::encode(
            &mut tape,
            &binding,
            &self.encoder,
            &self.cfg.encoder,
            tokens,
            &bank,
        )?;
        Ok(tape.value(out).clone())
    }

    /// Intent representation for one utterance (inference).
    pub fn represent(&self, utterance_id: usize, tokens: &TokenSequence) -> Result<IntentRepresentation> {
        let mut tape = Tape::new();
        let binding = tape.bind(&self.params);
        let bank = prefix::materialize_on_tape(&mut tape, &binding, &self.prefix, &self.cfg.encoder)?;
        let hidden = encoder::encode(
            &mut tape,
            &binding,
            &self.encoder,
            &self.cfg.encoder,
            tokens,
            &bank,
        )?;
        let pooled = tape.masked_mean_rows(hidden, tokens.mask())?;
        let rep = head::represent_on_tape(&mut tape, &binding, &self.head, pooled)?;
        let vector = Tensor::from_vec(
            vec![self.cfg.encoder.feature_dim],
            tape.value(rep).data().to_vec(),
        )?;
        IntentRepresentation::new(utterance_id, vector)
    }

    /// Classifier logits for a batch of sequences (inference).
    pub fn logits(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut tape = Tape::new();
        let binding = tape.bind(&self.params);
        let bank = prefix::materialize_on_tape(&mut tape, &binding, &self.prefix, &self.cfg.encoder)?;
        let mut reps = Vec::with_capacity(batch.len());
        for tokens in batch {
            let hidden = encoder::encode(
                &mut tape,
                &binding,
                &self.encoder,
                &self.cfg.encoder,
                tokens,
                &bank,
            )?;
            let pooled = tape.masked_mean_rows(hidden, tokens.mask())?;
            reps.push(head::represent_on_tape(&mut tape, &binding, &self.head, pooled)?);
        }
        let stacked = tape.concat_rows(&reps)?;
        let logits = head::logits_on_tape(&mut tape, &binding, &self.head, stacked)?;
        Ok(tape.value(logits).clone())
    }

    /// Batch softmax loss; with `with_grad`, gradients accumulate into the
    /// trainable parameters.
    pub fn batch_loss(&mut self, batch: &[(TokenSequence, usize)], with_grad: bool) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let Model {
            cfg,
            params,
            encoder: enc,
            prefix: pfx,
            head: hd,
            ..
        } = self;
        scalar_loss(params, with_grad, |tape, binding| {
            let bank = prefix::materialize_on_tape(tape, binding, pfx, &cfg.encoder)?;
            let mut reps = Vec::with_capacity(batch.len());
            for (tokens, _) in batch {
                let hidden = encoder::encode(tape, binding, enc, &cfg.encoder, tokens, &bank)?;
                let pooled = tape.masked_mean_rows(hidden, tokens.mask())?;
                reps.push(head::represent_on_tape(tape, binding, hd, pooled)?);
            }
            let stacked = tape.concat_rows(&reps)?;
            let logits = head::logits_on_tape(tape, binding, hd, stacked)?;
            let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
            tape.cross_entropy(logits, &labels)
        })
    }

    /// Freeze the prefix tokens into constants, dropping the reparameterizing
    /// perceptron. The returned model encodes identically; its checkpoint
    /// carries only `prefix.bank.*` paths.
    pub fn finalize_prefixes(&self) -> Result<Model> {
        let bank = prefix::finalize(&self.params, &self.prefix, &self.cfg.encoder)?;
        let mut cfg = self.cfg.clone();
        cfg.prefix = PrefixConfig::embed(bank.prefix_len());

        let mut params = ParamSet::new();
        let mut groups = Vec::new();
        for (slot, (_, p)) in self.params.iter().enumerate() {
            if matches!(self.groups[slot], ParamGroup::Prefix) {
                continue;
            }
            params.add(p.name.clone(), p.value.clone(), false);
            groups.push(self.groups[slot]);
        }
        // splice the finalized bank in manifest position (after encoder,
        // before head): rebuild in canonical order instead
        let mut ordered = ParamSet::new();
        let mut ordered_groups = Vec::new();
        for spec in encoder_manifest(&cfg.encoder) {
            let id = params.find(&spec.name).expect("encoder param preserved");
            ordered.add(spec.name.clone(), params.get(id).value.clone(), false);
            ordered_groups.push(spec.group);
        }
        let encoder = index_encoder(&ordered, &cfg.encoder);
        let mut bank_ids = Vec::new();
        for (l, entry) in bank.layers().iter().enumerate() {
            if let Some((k, v)) = entry {
                let ki = ordered.add(format!("prefix.bank.{}.k", l + 1), k.clone(), false);
                let vi = ordered.add(format!("prefix.bank.{}.v", l + 1), v.clone(), false);
                ordered_groups.push(ParamGroup::Prefix);
                ordered_groups.push(ParamGroup::Prefix);
                bank_ids.push((ki, vi));
            }
        }
        let prefix = if bank_ids.is_empty() {
            PrefixParams::None
        } else {
            PrefixParams::Embed { bank: bank_ids }
        };
        for spec in head_manifest(&cfg.encoder, cfg.num_classes) {
            let id = params.find(&spec.name).expect("head param preserved");
            ordered.add(spec.name.clone(), params.get(id).value.clone(), false);
            ordered_groups.push(spec.group);
        }
        let head = index_head(&ordered);

        Ok(Model {
            cfg,
            params: ordered,
            groups: ordered_groups,
            encoder,
            prefix,
            head,
        })
    }

    /// Materialize the current prefix bank as plain tensors.
    pub fn prefix_bank(&self) -> Result<PrefixBank> {
        prefix::materialize(&self.params, &self.prefix, &self.cfg.encoder)
    }

    // ── checkpointing ────────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    CheckpointTensor {
                        shape: p.value.shape().to_vec(),
                        data: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let mut model = Model::new(ck.config.clone(), 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for (_, p) in model.params.iter_mut() {
            let stored = ck
                .params
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {}", p.name)))?;
            if stored.shape != p.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint shape {:?} for {} does not match {:?}",
                    stored.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_vec(stored.shape.clone(), stored.data.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let json = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&json)?;
        Model::from_checkpoint(&ck)
    }
}

/// Flat map from parameter name to shape plus row-major data. Keys are
/// sorted, so serialization is byte-deterministic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, CheckpointTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn init_value(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor {
    if spec.name.ends_with(".gain") {
        Tensor::filled(spec.shape.clone(), 1.0)
    } else if spec.name.ends_with(".bias")
        || spec.name.ends_with(".bq")
        || spec.name.ends_with(".bk")
        || spec.name.ends_with(".bv")
        || spec.name.ends_with(".bo")
        || spec.name.ends_with(".b1")
        || spec.name.ends_with(".b2")
        || spec.name.ends_with(".b")
    {
        Tensor::zeros(spec.shape.clone())
    } else {
        Tensor::rand_uniform(spec.shape.clone(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE, rng)
    }
}

fn index_encoder(params: &ParamSet, cfg: &EncoderConfig) -> EncoderParams {
    let find = |name: &str| params.find(name).expect("manifest parameter present");
    EncoderParams {
        token_embed: find("embed.token"),
        pos_embed: find("embed.pos"),
        layers: (1..=cfg.num_layers)
            .map(|l| EncoderLayerParams {
                wq: find(&format!("layer.{l}.attn.wq")),
                bq: find(&format!("layer.{l}.attn.bq")),
                wk: find(&format!("layer.{l}.attn.wk")),
                bk: find(&format!("layer.{l}.attn.bk")),
                wv: find(&format!("layer.{l}.attn.wv")),
                bv: find(&format!("layer.{l}.attn.bv")),
                wo: find(&format!("layer.{l}.attn.wo")),
                bo: find(&format!("layer.{l}.attn.bo")),
                w1: find(&format!("layer.{l}.ff.w1")),
                b1: find(&format!("layer.{l}.ff.b1")),
                w2: find(&format!("layer.{l}.ff.w2")),
                b2: find(&format!("layer.{l}.ff.b2")),
                ln1_gain: find(&format!("layer.{l}.ln1.gain")),
                ln1_bias: find(&format!("layer.{l}.ln1.bias")),
                ln2_gain: find(&format!("layer.{l}.ln2.gain")),
                ln2_bias: find(&format!("layer.{l}.ln2.bias")),
            })
            .collect(),
    }
}

fn index_head(params: &ParamSet) -> HeadParams {
    let find = |name: &str| params.find(name).expect("manifest parameter present");
    HeadParams {
        dense_w: find("head.dense.w"),
        dense_b: find("head.dense.b"),
        cls_w: find("head.classifier.w"),
        cls_b: find("head.classifier.b"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TuningPlan;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                num_layers: 2,
                hidden_dim: 8,
                num_heads: 2,
                ff_dim: 16,
                vocab_size: 12,
                max_seq_len: 6,
                feature_dim: 10,
            },
            prefix: PrefixConfig::mlp(2, 8),
            num_classes: 3,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), vec![true; ids.len()]).unwrap()
    }

    #[test]
    fn prefix_only_reference_count_is_closed_form() {
        let cfg = ModelConfig {
            encoder: EncoderConfig::reference(),
            prefix: PrefixConfig::embed(10),
            num_classes: 77,
        };
        let plan = TuningPlan::prefix_only(12);
        let stats = trainable_param_stats(&cfg, &plan).unwrap();
        // 2 · L_p · d · N
        assert_eq!(stats.trainable, 184_320);
        assert!(stats.ratio > 0.0 && stats.ratio < 1.0);
    }

    #[test]
    fn frozen_plan_counts_zero() {
        let cfg = tiny_config();
        let stats = trainable_param_stats(&cfg, &TuningPlan::frozen(2)).unwrap();
        assert_eq!(stats.trainable, 0);
        assert_eq!(stats.ratio, 0.0);
    }

    #[test]
    fn stats_ratio_matches_exhaustive_allocation_count() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let stats = trainable_param_stats(&cfg, &TuningPlan::full(2)).unwrap();
        assert_eq!(stats.total, model.params.total_scalar_count());
        assert_eq!(stats.trainable, stats.total);
        assert_eq!(stats.ratio, 1.0);
    }

    #[test]
    fn apply_plan_flags_exact_name_set_for_kv() {
        use crate::encoder::PlanComponent;
        let mut model = Model::new(tiny_config(), 5).unwrap();
        model
            .apply_plan(&TuningPlan::last_layer_component(2, PlanComponent::KeysValues))
            .unwrap();
        let mut names = model.params.trainable_names();
        names.sort();
        let mut expected: Vec<String> = vec![
            "layer.2.attn.wk",
            "layer.2.attn.bk",
            "layer.2.attn.wv",
            "layer.2.attn.bv",
            "prefix.base",
            "prefix.mlp.w1",
            "prefix.mlp.b1",
            "prefix.mlp.w2",
            "prefix.mlp.b2",
            "head.dense.w",
            "head.dense.b",
            "head.classifier.w",
            "head.classifier.b",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        expected.sort();
        assert_eq!(names, expected);
    }

    #[test]
    fn apply_plan_rejects_wrong_depth() {
        let mut model = Model::new(tiny_config(), 5).unwrap();
        assert!(matches!(
            model.apply_plan(&TuningPlan::frozen(3)),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = Model::new(tiny_config(), 77).unwrap();
        let b = Model::new(tiny_config(), 77).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.value, pb.value, "{}", pa.name);
        }
    }

    #[test]
    fn encode_is_sensitive_to_prefix_values() {
        let mut model = Model::new(tiny_config(), 3).unwrap();
        let tokens = seq(&[1, 4, 5]);
        let before = model.encode_tokens(&tokens).unwrap();
        // perturb the MLP output bias, which shifts P_v of layer 1
        let b2 = model.params.find("prefix.mlp.b2").unwrap();
        model.params.get_mut(b2).value.data_mut()[10] += 0.5;
        let after = model.encode_tokens(&tokens).unwrap();
        assert!(before.max_abs_diff(&after) > 1e-9);
    }

    #[test]
    fn finalize_preserves_encoding_and_drops_mlp_paths() {
        let model = Model::new(tiny_config(), 11).unwrap();
        let finalized = model.finalize_prefixes().unwrap();
        let tokens = seq(&[1, 2, 3, 4]);

        let before = model.encode_tokens(&tokens).unwrap();
        let after = finalized.encode_tokens(&tokens).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-12);

        let ck = finalized.to_checkpoint();
        assert!(ck.params.keys().all(|k| !k.contains("prefix.mlp")));
        assert!(ck.params.contains_key("prefix.bank.1.k"));
        // MLP mode stores strictly more prefix scalars than the bank it makes
        let before_ck = model.to_checkpoint();
        let prefix_scalars = |c: &Checkpoint| -> usize {
            c.params
                .iter()
                .filter(|(k, _)| k.starts_with("prefix."))
                .map(|(_, t)| t.data.len())
                .sum()
        };
        assert!(prefix_scalars(&before_ck) > prefix_scalars(&ck));
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let model = Model::new(tiny_config(), 9).unwrap();
        let ck = model.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = Model::from_checkpoint(&back).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        let tokens = seq(&[1, 2]);
        assert_eq!(
            model.encode_tokens(&tokens).unwrap(),
            restored.encode_tokens(&tokens).unwrap()
        );
    }

    #[test]
    fn batch_loss_runs_and_is_finite() {
        let mut model = Model::new(tiny_config(), 2).unwrap();
        model.apply_plan(&TuningPlan::full(2)).unwrap();
        let batch = vec![(seq(&[1, 2, 3]), 0), (seq(&[4, 5]), 2)];
        let loss = model.batch_loss(&batch, true).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        // gradients reached the prefix parameters
        let base = model.params.find("prefix.base").unwrap();
        let g = &model.params.get(base).grad;
        assert!(g.data().iter().any(|&x| x != 0.0));
    }
}
