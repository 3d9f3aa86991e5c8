//! Corpus ingestion, known-intent-ratio splitting, tokenization, and the
//! synthetic intent corpus used for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};

/// One labeled training example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub text: String,
    pub label: String,
}

impl LabeledUtterance {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let label = label.into();
        if text.is_empty() || label.is_empty() {
            return Err(Error::Data("utterance text and label must be non-empty".into()));
        }
        Ok(LabeledUtterance { text, label })
    }
}

/// Known-intent-ratio split description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of intent classes treated as known, in (0, 1].
    pub known_intent_ratio: f64,
    pub rng_seed: u64,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl SplitSpec {
    pub fn new(known_intent_ratio: f64, rng_seed: u64) -> Self {
        SplitSpec {
            known_intent_ratio,
            rng_seed,
            train_fraction: 0.7,
            dev_fraction: 0.1,
            test_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.known_intent_ratio > 0.0 && self.known_intent_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "known_intent_ratio must lie in (0, 1], got {}",
                self.known_intent_ratio
            )));
        }
        let sum = self.train_fraction + self.dev_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9
            || self.train_fraction <= 0.0
            || self.dev_fraction < 0.0
            || self.test_fraction < 0.0
        {
            return Err(Error::Config(format!(
                "train/dev/test fractions must be non-negative and sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// A sample carrying its dense class id; `label` is OPEN (= num known
/// classes) only in the test portion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSample {
    /// Index of the utterance in the input corpus.
    pub utterance_id: usize,
    pub text: String,
    pub label: usize,
}

/// Output of [`make_split`]: dense-labeled partitions plus the class maps.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Vec<SplitSample>,
    pub dev: Vec<SplitSample>,
    pub test: Vec<SplitSample>,
    /// Known class names in dense-id order (id 0..K-1).
    pub known_classes: Vec<String>,
    /// The open class id, = known_classes.len().
    pub open_class: usize,
}

/// Partition classes into known and open with the spec's seed, then build
/// train/dev from known-class samples and a test set that keeps every input
/// sample, open ones relabeled to the open class id.
pub fn make_split(data: &[LabeledUtterance], spec: &SplitSpec) -> Result<DataSplit> {
    spec.validate()?;
    let mut class_names: Vec<String> = data.iter().map(|u| u.label.clone()).collect();
    class_names.sort();
    class_names.dedup();
    if class_names.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 distinct classes, found {}",
            class_names.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut shuffled = class_names.clone();
    shuffled.shuffle(&mut rng);
    // round to nearest, clamped to at least one known class
    let want = (spec.known_intent_ratio * class_names.len() as f64).round() as usize;
    let num_known = want.clamp(1, class_names.len());
    let mut known: Vec<String> = shuffled.into_iter().take(num_known).collect();
    known.sort();
    let class_id: BTreeMap<&str, usize> = known
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let open_class = known.len();

    // per-class sample indices, in corpus order for determinism
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in data.iter().enumerate() {
        by_class.entry(u.label.as_str()).or_default().push(i);
    }

    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (name, indices) in &by_class {
        let Some(&label) = class_id.get(name) else {
            continue; // open class: test only
        };
        let mut order = indices.clone();
        order.shuffle(&mut rng);
        let n = order.len();
        let n_train = (spec.train_fraction * n as f64).round() as usize;
        let n_dev = (spec.dev_fraction * n as f64).round() as usize;
        for (pos, &idx) in order.iter().enumerate() {
            let sample = SplitSample {
                utterance_id: idx,
                text: data[idx].text.clone(),
                label,
            };
            if pos < n_train {
                train.push(sample);
            } else if pos < n_train + n_dev {
                dev.push(sample);
            }
            // the remainder appears only in the test set below
        }
    }
    train.sort_by_key(|s| s.utterance_id);
    dev.sort_by_key(|s| s.utterance_id);

    // the test set keeps every input sample; open classes are relabeled
    let test: Vec<SplitSample> = data
        .iter()
        .enumerate()
        .map(|(idx, u)| SplitSample {
            utterance_id: idx,
            text: u.text.clone(),
            label: class_id.get(u.label.as_str()).copied().unwrap_or(open_class),
        })
        .collect();

    Ok(DataSplit {
        train,
        dev,
        test,
        known_classes: known,
        open_class,
    })
}

// ── TSV ingestion ───────────────────────────────────────────────────────

/// Read `text TAB label` records, one per line, no header.
pub fn load_tsv(path: &Path) -> Result<Vec<LabeledUtterance>> {
    let content = std::fs::read_to_string(path)?;
    parse_tsv(&content)
}

pub fn parse_tsv(content: &str) -> Result<Vec<LabeledUtterance>> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                reason: format!("expected 'text<TAB>label', found {} fields", parts.len()),
            });
        }
        out.push(LabeledUtterance::new(parts[0], parts[1]).map_err(|_| Error::Parse {
            line: lineno + 1,
            reason: "empty text or label".into(),
        })?);
    }
    Ok(out)
}

pub fn save_tsv(path: &Path, data: &[LabeledUtterance]) -> Result<()> {
    let mut out = String::new();
    for u in data {
        out.push_str(&u.text);
        out.push('\t');
        out.push_str(&u.label);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── vocabulary and tokenization ─────────────────────────────────────────

pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token-to-id map with reserved padding, classification, and unknown ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    token_ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from training texts: reserved ids first, then words in first-seen
    /// order of the lowercased alphanumeric tokens.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Vocabulary {
        let mut token_ids = BTreeMap::new();
        token_ids.insert(PAD_TOKEN.to_string(), 0);
        token_ids.insert(CLS_TOKEN.to_string(), 1);
        token_ids.insert(UNK_TOKEN.to_string(), 2);
        let mut next = 3;
        for text in texts {
            for word in split_words(text) {
                if !token_ids.contains_key(&word) {
                    token_ids.insert(word, next);
                    next += 1;
                }
            }
        }
        Vocabulary { token_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn cls_id(&self) -> usize {
        1
    }

    pub fn unk_id(&self) -> usize {
        2
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_ids.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.token_ids
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }
}

/// Lowercase and split on anything that is not alphanumeric.
fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

/// Lowercase, split on whitespace/punctuation, map through the vocabulary
/// (unknown words to UNK), prepend the classification token, then truncate
/// or pad to `max_len` with the mask marking real positions.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut ids = vec![vocab.cls_id()];
    for word in split_words(text) {
        ids.push(vocab.id_of(&word).unwrap_or_else(|| vocab.unk_id()));
    }
    ids.truncate(max_len);
    let real = ids.len();
    let mut mask = vec![true; real];
    while ids.len() < max_len {
        ids.push(vocab.pad_id());
        mask.push(false);
    }
    TokenSequence::new(ids, mask)
}

// ── synthetic corpus ────────────────────────────────────────────────────

/// Shared filler words that carry no class signal.
const FILLERS: &[&str] = &[
    "please", "can", "you", "help", "me", "with", "the", "my", "how", "do", "i", "need", "want",
    "to", "about", "is", "it", "now", "today", "again",
];

/// Keyword pool for one intent: disjoint across intents by construction.
fn intent_keywords(intent: usize) -> Vec<String> {
    (0..6).map(|k| format!("topic{intent}word{k}")).collect()
}

/// Template-generated utterances, `samples_per_intent` per intent, from
/// disjoint keyword pools plus shared fillers. Deterministic per seed.
pub fn synth_corpus(
    num_intents: usize,
    samples_per_intent: usize,
    rng_seed: u64,
) -> Result<Vec<LabeledUtterance>> {
    if num_intents < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 2 intents, got {num_intents}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(num_intents * samples_per_intent);
    for intent in 0..num_intents {
        let keywords = intent_keywords(intent);
        let label = format!("intent_{intent:02}");
        for _ in 0..samples_per_intent {
            let mut words: Vec<String> = Vec::new();
            // fixed keyword count keeps the class signal fraction stable
            let n_keywords = 3;
            let n_fillers = rng.gen_range(2..=4);
            for _ in 0..n_keywords {
                words.push(keywords[rng.gen_range(0..keywords.len())].clone());
            }
            for _ in 0..n_fillers {
                words.push(FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
            }
            words.shuffle(&mut rng);
            out.push(LabeledUtterance::new(words.join(" "), label.clone())?);
        }
    }
    Ok(out)
}
