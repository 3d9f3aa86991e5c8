//! Creation, reparameterization, and finalization of per-layer prefix tokens.
//!
//! In EMBED mode the per-layer key/value prefix tokens are parameters
//! themselves. In MLP mode a shared two-layer perceptron (tanh between the
//! layers) maps base embeddings to every layer's prefix tokens; after
//! training the perceptron is discarded and only the materialized tokens
//! are kept.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, LayerPrefixIds, ParamGroup, ParamSpec};
use crate::error::{Error, Result};
use crate::numerics::{Binding, ParamId, ParamSet, Tape, Tensor};

/// Initialization range for prefix parameters.
pub const PREFIX_INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefixMode {
    Embed,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixConfig {
    pub length: usize,
    pub mode: PrefixMode,
    /// Hidden width of the reparameterizing perceptron (MLP mode only).
    pub mlp_hidden: usize,
}

impl PrefixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == PrefixMode::Mlp && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be >= 1 in MLP mode".into()));
        }
        Ok(())
    }

    pub fn embed(length: usize) -> Self {
        PrefixConfig {
            length,
            mode: PrefixMode::Embed,
            mlp_hidden: 0,
        }
    }

    pub fn mlp(length: usize, mlp_hidden: usize) -> Self {
        PrefixConfig {
            length,
            mode: PrefixMode::Mlp,
            mlp_hidden,
        }
    }
}

/// Parameter handles behind the prefix bank.
#[derive(Clone, Debug)]
pub enum PrefixParams {
    /// No prefix tokens at all (length 0).
    None,
    /// One (keys, values) parameter pair per layer.
    Embed { bank: Vec<(ParamId, ParamId)> },
    /// Base embeddings plus the shared reparameterizing perceptron.
    Mlp {
        base: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// Materialized prefix tokens: one optional (keys, values) pair per layer,
/// `None` everywhere when the prefix length is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    layers: Vec<Option<(Tensor, Tensor)>>,
}

impl PrefixBank {
    pub fn new(layers: Vec<Option<(Tensor, Tensor)>>) -> Result<Self> {
        let first_len = layers
            .first()
            .map(|e| e.as_ref().map_or(0, |(k, _)| k.rows()));
        for entry in &layers {
            let len = entry.as_ref().map_or(0, |(k, _)| k.rows());
            if Some(len) != first_len {
                return Err(Error::Prefix("prefix length differs across layers".into()));
            }
            if let Some((k, v)) = entry {
                if k.shape() != v.shape() {
                    return Err(Error::Prefix("key/value prefix shapes differ".into()));
                }
            }
        }
        Ok(PrefixBank { layers })
    }

    pub fn empty(num_layers: usize) -> Self {
        PrefixBank {
            layers: vec![None; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|e| e.as_ref())
            .map_or(0, |(k, _)| k.rows())
    }

    pub fn layer(&self, index: usize) -> Option<&(Tensor, Tensor)> {
        self.layers[index].as_ref()
    }

    pub fn layers(&self) -> &[Option<(Tensor, Tensor)>] {
        &self.layers
    }

    /// Register the bank tensors as constants on a tape.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Option<LayerPrefixIds>> {
        self.layers
            .iter()
            .map(|entry| {
                entry.as_ref().map(|(k, v)| LayerPrefixIds {
                    keys: tape.leaf(k.clone()),
                    values: tape.leaf(v.clone()),
                })
            })
            .collect()
    }
}

/// Parameter specs for the configured prefix setup.
pub fn prefix_manifest(cfg: &PrefixConfig, enc: &EncoderConfig) -> Vec<ParamSpec> {
    let d = enc.hidden_dim;
    let n = enc.num_layers;
    let lp = cfg.length;
    if lp == 0 {
        return Vec::new();
    }
    let spec = |name: String, shape: Vec<usize>| ParamSpec {
        name,
        shape,
        group: ParamGroup::Prefix,
    };
    match cfg.mode {
        PrefixMode::Embed => (1..=n)
            .flat_map(|l| {
                [
                    spec(format!("prefix.bank.{l}.k"), vec![lp, d]),
                    spec(format!("prefix.bank.{l}.v"), vec![lp, d]),
                ]
            })
            .collect(),
        PrefixMode::Mlp => {
            let h = cfg.mlp_hidden;
            vec![
                spec("prefix.base".into(), vec![lp, d]),
                spec("prefix.mlp.w1".into(), vec![d, h]),
                spec("prefix.mlp.b1".into(), vec![h]),
                spec("prefix.mlp.w2".into(), vec![h, 2 * n * d]),
                spec("prefix.mlp.b2".into(), vec![2 * n * d]),
            ]
        }
    }
}

/// Allocate prefix parameters into `params`, initialized uniform(-0.1, 0.1)
/// from `rng`; `groups` receives one tag per added parameter.
pub fn init_prefix<R: Rng>(
    params: &mut ParamSet,
    groups: &mut Vec<ParamGroup>,
    cfg: &PrefixConfig,
    enc: &EncoderConfig,
    rng: &mut R,
) -> Result<PrefixParams> {
    cfg.validate()?;
    if cfg.length == 0 {
        return Ok(PrefixParams::None);
    }
    let specs = prefix_manifest(cfg, enc);
    let mut ids = Vec::with_capacity(specs.len());
    for s in &specs {
        let value =
            Tensor::rand_uniform(s.shape.clone(), -PREFIX_INIT_RANGE, PREFIX_INIT_RANGE, rng);
        ids.push(params.add(s.name.clone(), value, true));
        groups.push(s.group);
    }
    Ok(match cfg.mode {
        PrefixMode::Embed => PrefixParams::Embed {
            bank: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
        },
        PrefixMode::Mlp => PrefixParams::Mlp {
            base: ids[0],
            w1: ids[1],
            b1: ids[2],
            w2: ids[3],
            b2: ids[4],
        },
    })
}

/// Build the per-layer prefix tokens on the tape so gradients reach the
/// underlying parameters (the bank in EMBED mode; the base embeddings and
/// perceptron in MLP mode).
pub fn materialize_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &PrefixParams,
    enc: &EncoderConfig,
) -> Result<Vec<Option<LayerPrefixIds>>> {
    let d = enc.hidden_dim;
    match prefix {
        PrefixParams::None => Ok(vec![None; enc.num_layers]),
        PrefixParams::Embed { bank } => {
            if bank.len() != enc.num_layers {
                return Err(Error::Prefix(format!(
                    "bank has {} layers, encoder has {}",
                    bank.len(),
                    enc.num_layers
                )));
            }
            Ok(bank
                .iter()
                .map(|&(k, v)| {
                    Some(LayerPrefixIds {
                        keys: binding.id(k),
                        values: binding.id(v),
                    })
                })
                .collect())
        }
        PrefixParams::Mlp { base, w1, b1, w2, b2 } => {
            let hidden = tape.matmul(binding.id(*base), binding.id(*w1))?;
            let hidden = tape.add_bias(hidden, binding.id(*b1))?;
            let act = tape.tanh(hidden);
            let out = tape.matmul(act, binding.id(*w2))?;
            let out = tape.add_bias(out, binding.id(*b2))?; // [L_p × 2·N·d]
            let mut layers = Vec::with_capacity(enc.num_layers);
            for l in 0..enc.num_layers {
                let keys = tape.slice_cols(out, 2 * l * d, d)?;
                let values = tape.slice_cols(out, (2 * l + 1) * d, d)?;
                layers.push(Some(LayerPrefixIds { keys, values }));
            }
            Ok(layers)
        }
    }
}

/// Materialize the bank as plain tensors at the current parameter values.
pub fn materialize(
    params: &ParamSet,
    prefix: &PrefixParams,
    enc: &EncoderConfig,
) -> Result<PrefixBank> {
    let mut tape = Tape::new();
    let binding = tape.bind(params);
    let ids = materialize_on_tape(&mut tape, &binding, prefix, enc)?;
    let layers = ids
        .into_iter()
        .map(|entry| entry.map(|p| (tape.value(p.keys).clone(), tape.value(p.values).clone())))
        .collect();
    PrefixBank::new(layers)
}

/// Freeze the prefix tokens into plain constants. The returned bank is all
/// that survives; in MLP mode the perceptron weights are dropped when the
/// model is rebuilt around the bank.
pub fn finalize(
    params: &ParamSet,
    prefix: &PrefixParams,
    enc: &EncoderConfig,
) -> Result<PrefixBank> {
    materialize(params, prefix, enc)
}
