//! Pooling, the dense projection into the intent-representation space, and
//! the softmax classifier over the known intents.

use crate::encoder::{EncoderConfig, ParamGroup, ParamSpec};
use crate::error::{Error, Result};
use crate::numerics::{Binding, ParamId, Tape, Tensor, ValueId};

/// Pooled, densely projected feature vector for one utterance. Feeds both
/// the linear classifier and the boundary learner.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentRepresentation {
    pub utterance_id: usize,
    pub vector: Tensor,
}

impl IntentRepresentation {
    pub fn new(utterance_id: usize, vector: Tensor) -> Result<Self> {
        if vector.shape().len() != 1 {
            return Err(Error::Dimension(
                "intent representation must be a 1-D vector".into(),
            ));
        }
        if !vector.is_finite() {
            return Err(Error::Numeric("non-finite intent representation".into()));
        }
        Ok(IntentRepresentation {
            utterance_id,
            vector,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.numel()
    }
}

/// Dense bottleneck plus linear classifier parameters.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

/// Parameter specs for the head given `num_classes` known intents.
pub fn head_manifest(cfg: &EncoderConfig, num_classes: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: "head.dense.w".into(),
            shape: vec![cfg.hidden_dim, cfg.feature_dim],
            group: ParamGroup::Dense,
        },
        ParamSpec {
            name: "head.dense.b".into(),
            shape: vec![cfg.feature_dim],
            group: ParamGroup::Dense,
        },
        ParamSpec {
            name: "head.classifier.w".into(),
            shape: vec![cfg.feature_dim, num_classes],
            group: ParamGroup::Classifier,
        },
        ParamSpec {
            name: "head.classifier.b".into(),
            shape: vec![num_classes],
            group: ParamGroup::Classifier,
        },
    ]
}

/// Arithmetic mean of the unmasked rows of `hidden` (the classification
/// token counts as a real position).
pub fn mean_pool(hidden: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.leaf(hidden.clone());
    let pooled = tape.masked_mean_rows(h, mask)?;
    Tensor::from_vec(
        vec![hidden.cols()],
        tape.value(pooled).data().to_vec(),
    )
}

/// Dense projection with ReLU: x = relu(pooled @ W_d + b_d). `pooled` is a
/// 1×d row; the result is a 1×feature_dim row.
pub fn represent_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    head: &HeadParams,
    pooled: ValueId,
) -> Result<ValueId> {
    let dense = tape.matmul(pooled, binding.id(head.dense_w))?;
    let dense = tape.add_bias(dense, binding.id(head.dense_b))?;
    Ok(tape.relu(dense))
}

/// Classifier logits for a batch of representations (n×feature_dim rows).
pub fn logits_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    head: &HeadParams,
    reps: ValueId,
) -> Result<ValueId> {
    let z = tape.matmul(reps, binding.id(head.cls_w))?;
    tape.add_bias(z, binding.id(head.cls_b))
}

/// Mean over the batch of −log softmax(z)[label].
pub fn softmax_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(z, labels)?;
    Ok(tape.scalar_value(loss))
}
