//! One-vs-all linear SVM and evaluation metrics.
//!
//! Each binary problem minimizes `½‖w‖² + C Σ max(0, 1 − y (wᵀx + b))` by dual
//! coordinate descent. The bias is folded in as an extra constant feature, so it
//! is regularized together with `w`. Examples are visited in a seeded shuffle of
//! a content-sorted order: the model depends on the training set and the seed,
//! never on the order examples were passed in.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedVector;
use crate::error::{Error, Result};
use crate::util::{self, dot};

impl AsRef<[f64]> for EncodedVector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmOptions {
    pub c: f64,
    /// Relative duality gap at which a binary problem stops.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-6,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

/// Per-class training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Dual objective `½‖w‖² − Σα` after each epoch (non-increasing).
    pub dual_objective: Vec<f64>,
    pub primal_objective: f64,
    pub relative_gap: f64,
    pub epochs: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOvaModel {
    pub n_classes: usize,
    pub n_features: usize,
    /// `C×F` row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub c_param: f64,
    pub training_meta: Vec<TrainingTrace>,
}

impl LinearOvaModel {
    pub fn weight(&self, class: usize) -> &[f64] {
        &self.weights[class * self.n_features..(class + 1) * self.n_features]
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimMismatch {
                expected: self.n_features,
                actual: x.len(),
            });
        }
        Ok((0..self.n_classes)
            .map(|c| dot(self.weight(c), x) + self.biases[c])
            .collect())
    }
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

pub fn predict(model: &LinearOvaModel, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let scores = model.scores(x)?;
    Ok((argmax(&scores), scores))
}

pub fn svm_train<F: AsRef<[f64]> + Sync>(
    features: &[F],
    labels: &[usize],
    opts: &SvmOptions,
) -> Result<LinearOvaModel> {
    if features.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    if labels.len() != features.len() {
        return Err(Error::MismatchedRows {
            what: format!("{} features vs {} labels", features.len(), labels.len()),
        });
    }
    if !(opts.c > 0.0) {
        return Err(Error::Config("SVM C must be positive".into()));
    }
    let n_features = features[0].as_ref().len();
    if let Some(f) = features.iter().find(|f| f.as_ref().len() != n_features) {
        return Err(Error::DimMismatch {
            expected: n_features,
            actual: f.as_ref().len(),
        });
    }
    if features.iter().any(|f| f.as_ref().iter().any(|x| !x.is_finite())) {
        return Err(Error::non_finite("training features"));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let present = (0..n_classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::SingleClass);
    }

    let order = canonical_order(features, labels);
    let sq_norms: Vec<f64> = features
        .iter()
        .map(|f| dot(f.as_ref(), f.as_ref()) + 1.0)
        .collect();

    let solved: Vec<(Vec<f64>, TrainingTrace)> = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let y: Vec<f64> = labels
                .iter()
                .map(|&l| if l == class { 1.0 } else { -1.0 })
                .collect();
            solve_binary(features, &y, &sq_norms, &order, opts, class as u64)
        })
        .collect();

    let mut weights = Vec::with_capacity(n_classes * n_features);
    let mut biases = Vec::with_capacity(n_classes);
    let mut training_meta = Vec::with_capacity(n_classes);
    for (w, trace) in solved {
        weights.extend_from_slice(&w[..n_features]);
        biases.push(w[n_features]);
        training_meta.push(trace);
    }
    Ok(LinearOvaModel {
        n_classes,
        n_features,
        weights,
        biases,
        c_param: opts.c,
        training_meta,
    })
}

/// Examples sorted by feature vector (lexicographic, total order), then label.
fn canonical_order<F: AsRef<[f64]>>(features: &[F], labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.sort_by(|&a, &b| {
        let (fa, fb) = (features[a].as_ref(), features[b].as_ref());
        fa.iter()
            .zip(fb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(labels[a].cmp(&labels[b]))
    });
    idx
}

/// Weight vector with the bias as the last entry.
fn solve_binary<F: AsRef<[f64]>>(
    features: &[F],
    y: &[f64],
    sq_norms: &[f64],
    order: &[usize],
    opts: &SvmOptions,
    stream: u64,
) -> (Vec<f64>, TrainingTrace) {
    let n = features.len();
    let nf = features[0].as_ref().len();
    let c = opts.c;
    let mut w = vec![0.0; nf + 1];
    let mut alpha = vec![0.0; n];
    let mut visit = order.to_vec();
    let mut dual_objective = Vec::new();
    let margin = |w: &[f64], i: usize| dot(&w[..nf], features[i].as_ref()) + w[nf];

    let mut primal = f64::INFINITY;
    let mut gap = f64::INFINITY;
    let mut epochs = 0;
    let mut converged = false;
    while epochs < opts.max_epochs {
        let mut rng = util::stream(opts.seed, &[stream, epochs as u64]);
        visit.copy_from_slice(order);
        visit.shuffle(&mut rng);
        for &i in &visit {
            let g = y[i] * margin(&w, i) - 1.0;
            let a = alpha[i];
            let pg = if a <= 0.0 {
                g.min(0.0)
            } else if a >= c {
                g.max(0.0)
            } else {
                g
            };
            if pg == 0.0 {
                continue;
            }
            let next = (a - g / sq_norms[i]).clamp(0.0, c);
            let delta = (next - a) * y[i];
            if delta != 0.0 {
                alpha[i] = next;
                let x = features[i].as_ref();
                for j in 0..nf {
                    w[j] += delta * x[j];
                }
                w[nf] += delta;
            }
        }
        epochs += 1;

        let half_norm = 0.5 * dot(&w, &w);
        let dual = half_norm - order.iter().map(|&i| alpha[i]).sum::<f64>();
        let hinge: f64 = order.iter().map(|&i| (1.0 - y[i] * margin(&w, i)).max(0.0)).sum();
        primal = half_norm + c * hinge;
        dual_objective.push(dual);
        gap = (primal + dual).max(0.0) / primal.abs().max(1e-12);
        if gap <= opts.tol {
            converged = true;
            break;
        }
    }
    (
        w,
        TrainingTrace {
            dual_objective,
            primal_objective: primal,
            relative_gap: gap,
            epochs,
            converged,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub overall_accuracy: f64,
    /// Classes without test examples report 0 and are left out of the mean.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_class_accuracy: f64,
}

pub fn evaluate_predictions(predicted: &[usize], labels: &[usize], n_classes: usize) -> Result<EvalReport> {
    if predicted.len() != labels.len() {
        return Err(Error::MismatchedRows {
            what: format!("{} predictions vs {} labels", predicted.len(), labels.len()),
        });
    }
    let n_classes = n_classes
        .max(labels.iter().max().map_or(0, |m| m + 1))
        .max(predicted.iter().max().map_or(0, |m| m + 1));
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predicted.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let n = labels.len();
    let mut per_class_accuracy = vec![0.0; n_classes];
    let mut with_examples = 0;
    let mut acc_sum = 0.0;
    for c in 0..n_classes {
        let total: usize = confusion[c].iter().sum();
        if total > 0 {
            per_class_accuracy[c] = confusion[c][c] as f64 / total as f64;
            acc_sum += per_class_accuracy[c];
            with_examples += 1;
        }
    }
    Ok(EvalReport {
        n_examples: n,
        overall_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class_accuracy,
        confusion,
        mean_class_accuracy: if with_examples == 0 {
            0.0
        } else {
            acc_sum / with_examples as f64
        },
    })
}

pub fn evaluate<F: AsRef<[f64]>>(model: &LinearOvaModel, features: &[F], labels: &[usize]) -> Result<EvalReport> {
    let predicted = features
        .iter()
        .map(|f| predict(model, f.as_ref()).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predicted, labels, model.n_classes)
}

/// Mean of per-split overall and mean-class accuracies.
pub fn average_reports(reports: &[EvalReport]) -> (f64, f64) {
    let n = reports.len().max(1) as f64;
    (
        reports.iter().map(|r| r.overall_accuracy).sum::<f64>() / n,
        reports.iter().map(|r| r.mean_class_accuracy).sum::<f64>() / n,
    )
}
