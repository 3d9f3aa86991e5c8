//! Adaptive decision boundaries: a spherical boundary per known class,
//! learned on frozen intent representations. The centroid of each class is
//! fixed to the class mean; only the softplus-parameterized radius trains.
//! At inference a point is assigned its nearest centroid's class if it falls
//! inside that boundary, otherwise the open class.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::IntentRepresentation;
use crate::numerics::{ParamSet, Tape, Tensor};
use crate::trainer::{optimizer_step, AdamState};

/// Per-class centroid and learned radius. `raw_radius` is the trained
/// parameter; the effective radius is softplus(raw_radius), so it is
/// positive at every optimization step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Boundary {
    pub class: usize,
    pub centroid: Vec<f64>,
    pub raw_radius: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundarySet {
    pub boundaries: Vec<Boundary>,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl BoundarySet {
    pub fn num_classes(&self) -> usize {
        self.boundaries.len()
    }

    /// The open class id: one past the known classes.
    pub fn open_class(&self) -> usize {
        self.boundaries.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BoundarySet> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdbConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop once the absolute epoch-to-epoch loss change stays below this.
    pub plateau_tol: f64,
    pub plateau_patience: usize,
    /// Weight on samples beyond their boundary during radius learning. The
    /// symmetric miss settles on the median class distance, a radius that
    /// excludes half the class; weighting the outside term moves the
    /// equilibrium to the outside/(outside+inside) distance quantile.
    pub outside_weight: f64,
    pub inside_weight: f64,
}

impl Default for AdbConfig {
    fn default() -> Self {
        AdbConfig {
            learning_rate: 0.05,
            epochs: 100,
            plateau_tol: 1e-9,
            plateau_patience: 5,
            outside_weight: 19.0,
            inside_weight: 1.0,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Arithmetic mean of each class's representations. Every class in
/// `0..num_classes` must have at least one sample.
pub fn compute_centroids(
    reps: &[IntentRepresentation],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<f64>>> {
    if reps.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} representations for {} labels",
            reps.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_classes,
        });
    }
    let dim = reps
        .first()
        .map(|r| r.dim())
        .ok_or_else(|| Error::Data("no representations to compute centroids from".into()))?;
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (rep, &label) in reps.iter().zip(labels) {
        if rep.dim() != dim {
            return Err(Error::Dimension("representation widths differ".into()));
        }
        counts[label] += 1;
        for (s, &x) in sums[label].iter_mut().zip(rep.vector.data()) {
            *s += x;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        for s in sums[class].iter_mut() {
            *s /= count as f64;
        }
    }
    Ok(sums)
}

/// Distance of every sample to its own class centroid.
fn own_class_distances(
    reps: &[IntentRepresentation],
    labels: &[usize],
    centroids: &[Vec<f64>],
) -> Vec<f64> {
    reps.iter()
        .zip(labels)
        .map(|(rep, &y)| euclidean(rep.vector.data(), &centroids[y]))
        .collect()
}

/// Mean over samples of |d_i − Δ_{y_i}| with Δ = softplus(raw): samples
/// outside their boundary pull it wider, samples inside pull it tighter.
/// Gradients flow to the raw radii only.
pub fn boundary_loss(
    reps: &[IntentRepresentation],
    labels: &[usize],
    centroids: &[Vec<f64>],
    raw_radii: &[f64],
) -> Result<f64> {
    let distances = own_class_distances(reps, labels, centroids);
    let mut tape = Tape::new();
    let radii = tape.leaf(Tensor::from_vec(vec![raw_radii.len()], raw_radii.to_vec())?);
    let loss = tape.boundary_penalty(radii, &distances, labels, 1.0, 1.0)?;
    Ok(tape.scalar_value(loss))
}

/// Learn the per-class radii with Adam on the boundary loss, centroids
/// fixed. Radii start at softplus(0) = ln 2.
pub fn learn_boundaries(
    reps: &[IntentRepresentation],
    labels: &[usize],
    num_classes: usize,
    cfg: &AdbConfig,
) -> Result<BoundarySet> {
    let centroids = compute_centroids(reps, labels, num_classes)?;
    let distances = own_class_distances(reps, labels, centroids.as_slice());

    let mut params = ParamSet::new();
    let radii_id = params.add("adb.raw_radii", Tensor::zeros(vec![num_classes]), true);
    let mut state = AdamState::new(&params);

    let mut previous: Option<f64> = None;
    let mut flat = 0usize;
    for epoch in 0..cfg.epochs {
        params.zero_grads();
        let mut tape = Tape::new();
        let binding = tape.bind(&params);
        let loss_id = tape.boundary_penalty(
            binding.id(radii_id),
            &distances,
            labels,
            cfg.outside_weight,
            cfg.inside_weight,
        )?;
        let loss = tape.scalar_value(loss_id);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "boundary loss became {loss} at epoch {epoch}"
            )));
        }
        tape.backward(loss_id)?;
        tape.absorb_grads(&binding, &mut params);
        optimizer_step(&mut params, &mut state, cfg.learning_rate)?;

        // positivity is structural, but cheap to re-assert while training
        debug_assert!(params
            .get(radii_id)
            .value
            .data()
            .iter()
            .all(|&r| softplus(r) > 0.0));

        if let Some(prev) = previous {
            if (prev - loss).abs() < cfg.plateau_tol {
                flat += 1;
                if flat >= cfg.plateau_patience {
                    break;
                }
            } else {
                flat = 0;
            }
        }
        previous = Some(loss);
    }

    let raw = params.get(radii_id).value.data();
    Ok(BoundarySet {
        boundaries: centroids
            .into_iter()
            .enumerate()
            .map(|(class, centroid)| Boundary {
                class,
                centroid,
                raw_radius: raw[class],
                radius: softplus(raw[class]),
            })
            .collect(),
    })
}

/// Nearest-centroid-then-threshold rule: the argmin class if the point lies
/// within that class's radius, otherwise the open class (id = K). Distance
/// ties break toward the lowest class id.
pub fn predict_open(rep: &Tensor, boundaries: &BoundarySet) -> usize {
    debug_assert!(!boundaries.boundaries.is_empty());
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for (k, b) in boundaries.boundaries.iter().enumerate() {
        let dist = euclidean(rep.data(), &b.centroid);
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    if best_dist <= boundaries.boundaries[best].radius {
        best
    } else {
        boundaries.open_class()
    }
}

// ── representation dump file ────────────────────────────────────────────
//
// One record per utterance: id TAB label TAB space-separated features.

pub fn write_representations(
    path: &Path,
    reps: &[IntentRepresentation],
    labels: &[usize],
) -> Result<()> {
    if reps.len() != labels.len() {
        return Err(Error::Dimension("id/label count mismatch".into()));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (rep, &label) in reps.iter().zip(labels) {
        let features: Vec<String> = rep.vector.data().iter().map(|x| format!("{x:?}")).collect();
        writeln!(file, "{}\t{}\t{}", rep.utterance_id, label, features.join(" "))?;
    }
    Ok(())
}

pub fn read_representations(path: &Path) -> Result<(Vec<IntentRepresentation>, Vec<usize>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut reps = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let parse = |reason: &str| Error::Parse {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let mut fields = line.split('\t');
        let id: usize = fields
            .next()
            .ok_or_else(|| parse("missing id"))?
            .parse()
            .map_err(|_| parse("bad id"))?;
        let label: usize = fields
            .next()
            .ok_or_else(|| parse("missing label"))?
            .parse()
            .map_err(|_| parse("bad label"))?;
        let values: Vec<f64> = fields
            .next()
            .ok_or_else(|| parse("missing features"))?
            .split(' ')
            .map(|t| t.parse().map_err(|_| parse("bad feature value")))
            .collect::<Result<_>>()?;
        if fields.next().is_some() {
            return Err(parse("too many fields"));
        }
        reps.push(IntentRepresentation::new(
            id,
            Tensor::from_vec(vec![values.len()], values)?,
        )?);
        labels.push(label);
    }
    Ok((reps, labels))
}
