//! Multi-layer transformer encoder with per-layer key/value prefix tokens
//! and a tuning plan that controls which layers and components train.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Binding, ParamId, ParamSet, Tape, Tensor, ValueId};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Additive mask applied to padded key positions before softmax.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Width of the intent representation produced by the dense head.
    pub feature_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.num_layers > 0
            && self.hidden_dim > 0
            && self.num_heads > 0
            && self.ff_dim > 0
            && self.vocab_size > 0
            && self.max_seq_len > 0
            && self.feature_dim > 0;
        if !all_positive {
            return Err(Error::Config("all encoder extents must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// The base-encoder geometry the published results were measured on.
    pub fn reference() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ff_dim: 3072,
            vocab_size: 30_522,
            max_seq_len: 512,
            feature_dim: 768,
        }
    }
}

/// Token ids plus attention mask; the first position is always the
/// classification token and is never masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.is_empty() || ids.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "token ids ({}) and mask ({}) must be non-empty and equal length",
                ids.len(),
                mask.len()
            )));
        }
        if !mask[0] {
            return Err(Error::Data(
                "first position holds the classification token and cannot be masked".into(),
            ));
        }
        Ok(TokenSequence { ids, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

// ── parameter manifest ──────────────────────────────────────────────────

/// Which attention projection a layer parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerComponent {
    AttnQuery,
    AttnKey,
    AttnValue,
    AttnOutput,
    FeedForward,
    LayerNorm,
}

/// Structural group of a parameter, used by tuning plans.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    /// 1-based layer index.
    Layer {
        layer: usize,
        component: LayerComponent,
    },
    Prefix,
    Dense,
    Classifier,
}

/// Name, shape, and group of one parameter; models allocate from this and
/// plan statistics sum over it, so counts and allocations cannot drift.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Embedding and per-layer parameter specs for the given geometry.
pub fn encoder_manifest(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let ff = cfg.ff_dim;
    let mut specs = vec![
        ParamSpec {
            name: "embed.token".into(),
            shape: vec![cfg.vocab_size, d],
            group: ParamGroup::Embedding,
        },
        ParamSpec {
            name: "embed.pos".into(),
            shape: vec![cfg.max_seq_len, d],
            group: ParamGroup::Embedding,
        },
    ];
    for l in 1..=cfg.num_layers {
        use LayerComponent::*;
        let layer = |component: LayerComponent, suffix: &str, shape: Vec<usize>| ParamSpec {
            name: format!("layer.{l}.{suffix}"),
            shape,
            group: ParamGroup::Layer { layer: l, component },
        };
        specs.extend([
            layer(AttnQuery, "attn.wq", vec![d, d]),
            layer(AttnQuery, "attn.bq", vec![d]),
            layer(AttnKey, "attn.wk", vec![d, d]),
            layer(AttnKey, "attn.bk", vec![d]),
            layer(AttnValue, "attn.wv", vec![d, d]),
            layer(AttnValue, "attn.bv", vec![d]),
            layer(AttnOutput, "attn.wo", vec![d, d]),
            layer(AttnOutput, "attn.bo", vec![d]),
            layer(FeedForward, "ff.w1", vec![d, ff]),
            layer(FeedForward, "ff.b1", vec![ff]),
            layer(FeedForward, "ff.w2", vec![ff, d]),
            layer(FeedForward, "ff.b2", vec![d]),
            layer(LayerNorm, "ln1.gain", vec![d]),
            layer(LayerNorm, "ln1.bias", vec![d]),
            layer(LayerNorm, "ln2.gain", vec![d]),
            layer(LayerNorm, "ln2.bias", vec![d]),
        ]);
    }
    specs
}

// ── parameter handles ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

// ── tuning plan ─────────────────────────────────────────────────────────

/// Per-layer component trainability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerPlan {
    pub attention: bool,
    pub feed_forward: bool,
    pub layer_norm: bool,
    /// Key and value projections alone (a strict subset of `attention`).
    pub keys_values: bool,
}

impl LayerPlan {
    pub fn entire() -> Self {
        LayerPlan {
            attention: true,
            feed_forward: true,
            layer_norm: true,
            keys_values: false,
        }
    }
}

/// Which parameters train: per-layer component flags plus switches for the
/// embeddings, the prefix parameters, and the two head sublayers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TuningPlan {
    pub layers: Vec<LayerPlan>,
    pub embeddings: bool,
    pub prefix: bool,
    pub dense: bool,
    pub classifier: bool,
}

impl TuningPlan {
    /// Everything frozen.
    pub fn frozen(num_layers: usize) -> Self {
        TuningPlan {
            layers: vec![LayerPlan::default(); num_layers],
            embeddings: false,
            prefix: false,
            dense: false,
            classifier: false,
        }
    }

    /// Everything trainable.
    pub fn full(num_layers: usize) -> Self {
        TuningPlan {
            layers: vec![LayerPlan::entire(); num_layers],
            embeddings: true,
            prefix: true,
            dense: true,
            classifier: true,
        }
    }

    /// Only the prefix parameters train.
    pub fn prefix_only(num_layers: usize) -> Self {
        TuningPlan {
            prefix: true,
            ..TuningPlan::frozen(num_layers)
        }
    }

    fn with_head(mut self) -> Self {
        self.dense = true;
        self.classifier = true;
        self
    }

    fn check_layer(num_layers: usize, x: usize) -> Result<()> {
        if x == 0 || x > num_layers {
            return Err(Error::Plan(format!("layer {x} outside 1..={num_layers}")));
        }
        Ok(())
    }

    /// Prefixes, head, and exactly layer `x` (1-based).
    pub fn just_layer(num_layers: usize, x: usize) -> Result<Self> {
        Self::check_layer(num_layers, x)?;
        let mut plan = TuningPlan::prefix_only(num_layers).with_head();
        plan.layers[x - 1] = LayerPlan::entire();
        Ok(plan)
    }

    /// Prefixes, head, and layers `x..=num_layers`.
    pub fn layer_and_rest(num_layers: usize, x: usize) -> Result<Self> {
        Self::check_layer(num_layers, x)?;
        let mut plan = TuningPlan::prefix_only(num_layers).with_head();
        for l in x..=num_layers {
            plan.layers[l - 1] = LayerPlan::entire();
        }
        Ok(plan)
    }

    /// Prefixes, head, and one component of the final layer.
    pub fn last_layer_component(num_layers: usize, component: PlanComponent) -> Self {
        let mut plan = TuningPlan::prefix_only(num_layers).with_head();
        let last = &mut plan.layers[num_layers - 1];
        match component {
            PlanComponent::Attention => last.attention = true,
            PlanComponent::FeedForward => last.feed_forward = true,
            PlanComponent::LayerNorm => last.layer_norm = true,
            PlanComponent::KeysValues => last.keys_values = true,
            PlanComponent::EntireLayer => *last = LayerPlan::entire(),
        }
        plan
    }

    /// Full fine-tuning with no prefixes: every layer plus the head.
    pub fn full_fine_tune_no_prefix(num_layers: usize) -> Self {
        TuningPlan {
            layers: vec![LayerPlan::entire(); num_layers],
            embeddings: false,
            prefix: false,
            dense: true,
            classifier: true,
        }
    }

    /// Whether parameters in `group` train under this plan.
    pub fn covers(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embedding => self.embeddings,
            ParamGroup::Prefix => self.prefix,
            ParamGroup::Dense => self.dense,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::Layer { layer, component } => {
                let lp = &self.layers[layer - 1];
                match component {
                    LayerComponent::AttnQuery | LayerComponent::AttnOutput => lp.attention,
                    LayerComponent::AttnKey | LayerComponent::AttnValue => {
                        lp.attention || lp.keys_values
                    }
                    LayerComponent::FeedForward => lp.feed_forward,
                    LayerComponent::LayerNorm => lp.layer_norm,
                }
            }
        }
    }
}

/// Component families ablatable in the final layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanComponent {
    Attention,
    FeedForward,
    LayerNorm,
    KeysValues,
    EntireLayer,
}

impl PlanComponent {
    pub const ALL: [PlanComponent; 5] = [
        PlanComponent::Attention,
        PlanComponent::FeedForward,
        PlanComponent::LayerNorm,
        PlanComponent::KeysValues,
        PlanComponent::EntireLayer,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PlanComponent::Attention => "Attention",
            PlanComponent::FeedForward => "Feed Forward",
            PlanComponent::LayerNorm => "Layer Normalization",
            PlanComponent::KeysValues => "Keys and Values",
            PlanComponent::EntireLayer => "Entire Layer",
        }
    }
}

/// Set trainability flags on exactly the parameters the plan addresses.
///
/// `groups` must run parallel to `params` (the model builds both from the
/// same manifest).
pub fn apply_tuning_plan(
    params: &mut ParamSet,
    groups: &[ParamGroup],
    plan: &TuningPlan,
) -> Result<()> {
    if groups.len() != params.len() {
        return Err(Error::Plan(format!(
            "{} group tags for {} parameters",
            groups.len(),
            params.len()
        )));
    }
    let depth = groups
        .iter()
        .filter_map(|g| match g {
            ParamGroup::Layer { layer, .. } => Some(*layer),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    if plan.layers.len() != depth {
        return Err(Error::Plan(format!(
            "plan addresses {} layers but the model has {depth}",
            plan.layers.len()
        )));
    }
    for (slot, (_, p)) in params.iter_mut().enumerate() {
        p.trainable = plan.covers(groups[slot]);
    }
    Ok(())
}

// ── forward graph ───────────────────────────────────────────────────────

/// On-tape prefix tokens for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrefixIds {
    pub keys: ValueId,
    pub values: ValueId,
}

/// Token plus learned absolute position embeddings.
pub fn embed(
    tape: &mut Tape,
    binding: &Binding,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
) -> Result<ValueId> {
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    let tok = tape.gather_rows(binding.id(enc.token_embed), tokens.ids())?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(binding.id(enc.pos_embed), &positions)?;
    tape.add(tok, pos)
}

/// Additive attention-mask bias: prefix key positions are always attendable,
/// padded real positions get [`MASK_NEG`].
fn mask_bias(tape: &mut Tape, mask: &[bool], prefix_len: usize, q_len: usize) -> ValueId {
    let key_len = prefix_len + mask.len();
    let mut bias = Tensor::zeros(vec![q_len, key_len]);
    for i in 0..q_len {
        for (j, &real) in mask.iter().enumerate() {
            if !real {
                bias.data_mut()[i * key_len + prefix_len + j] = MASK_NEG;
            }
        }
    }
    tape.leaf(bias)
}

/// Multi-head scaled dot-product attention over keys/values extended with
/// prefix tokens, up to and including the output projection (no residual,
/// no layer norm).
pub fn attention_core(
    tape: &mut Tape,
    binding: &Binding,
    layer: &EncoderLayerParams,
    cfg: &EncoderConfig,
    x: ValueId,
    prefix: Option<&LayerPrefixIds>,
    mask: &[bool],
) -> Result<ValueId> {
    let head_dim = cfg.head_dim();
    let prefix_len = match prefix {
        Some(p) => {
            let k_rows = tape.value(p.keys).rows();
            let v_rows = tape.value(p.values).rows();
            if k_rows != v_rows {
                return Err(Error::Prefix(format!(
                    "prefix keys have {k_rows} tokens but values have {v_rows}"
                )));
            }
            k_rows
        }
        None => 0,
    };

    let q = tape.matmul(x, binding.id(layer.wq))?;
    let q = tape.add_bias(q, binding.id(layer.bq))?;
    let k = tape.matmul(x, binding.id(layer.wk))?;
    let k = tape.add_bias(k, binding.id(layer.bk))?;
    let v = tape.matmul(x, binding.id(layer.wv))?;
    let v = tape.add_bias(v, binding.id(layer.bv))?;

    let q_len = tape.value(x).rows();
    let bias = mask_bias(tape, mask, prefix_len, q_len);
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let start = h * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let (keys, values) = match prefix {
            Some(p) => {
                let pk = tape.slice_cols(p.keys, start, head_dim)?;
                let pv = tape.slice_cols(p.values, start, head_dim)?;
                (tape.concat_rows(&[pk, kh])?, tape.concat_rows(&[pv, vh])?)
            }
            None => (kh, vh),
        };
        let scores = tape.matmul_nt(qh, keys)?;
        let scaled = tape.scale(scores, scale);
        let masked = tape.add(scaled, bias)?;
        let attn = tape.softmax_rows(masked)?;
        heads.push(tape.matmul(attn, values)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let out = tape.matmul(ctx, binding.id(layer.wo))?;
    tape.add_bias(out, binding.id(layer.bo))
}

/// One full encoder layer: prefixed attention and feed-forward sublayers,
/// each with residual connection and post-layer-norm.
pub fn encoder_layer(
    tape: &mut Tape,
    binding: &Binding,
    layer: &EncoderLayerParams,
    cfg: &EncoderConfig,
    x: ValueId,
    prefix: Option<&LayerPrefixIds>,
    mask: &[bool],
) -> Result<ValueId> {
    let attn = attention_core(tape, binding, layer, cfg, x, prefix, mask)?;
    let res1 = tape.add(x, attn)?;
    let h = tape.layer_norm(
        res1,
        binding.id(layer.ln1_gain),
        binding.id(layer.ln1_bias),
        LAYER_NORM_EPS,
    )?;

    let f1 = tape.matmul(h, binding.id(layer.w1))?;
    let f1 = tape.add_bias(f1, binding.id(layer.b1))?;
    let act = tape.gelu(f1);
    let f2 = tape.matmul(act, binding.id(layer.w2))?;
    let f2 = tape.add_bias(f2, binding.id(layer.b2))?;
    let res2 = tape.add(h, f2)?;
    tape.layer_norm(
        res2,
        binding.id(layer.ln2_gain),
        binding.id(layer.ln2_bias),
        LAYER_NORM_EPS,
    )
}

/// Embed and run all layers; `bank` supplies one optional prefix pair per
/// layer (`None` for a zero-length prefix). Returns the final hidden states.
pub fn encode(
    tape: &mut Tape,
    binding: &Binding,
    enc: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
    bank: &[Option<LayerPrefixIds>],
) -> Result<ValueId> {
    if bank.len() != cfg.num_layers {
        return Err(Error::Prefix(format!(
            "prefix bank has {} layers but the encoder has {}",
            bank.len(),
            cfg.num_layers
        )));
    }
    let mut x = embed(tape, binding, enc, cfg, tokens)?;
    for (layer, prefix) in enc.layers.iter().zip(bank) {
        x = encoder_layer(tape, binding, layer, cfg, x, prefix.as_ref(), tokens.mask())?;
    }
    Ok(x)
}
