//! Hungarian-matched clustering accuracy, CIL session metrics, the
//! generalization-gap proxy and the defined/undefined separability check.

mod hungarian;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::masked_features;
use crate::model::{HeadInput, ModelBundle};
use crate::protocols::{features_tensor, Sample};

pub use hungarian::{hungarian, Assignment, CostMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_all: f64,
    pub acc_known: f64,
    pub acc_unknown: f64,
    pub n_all: usize,
    pub n_known: usize,
    pub n_unknown: usize,
    /// Class assigned to each predicted cluster id.
    pub mapping: Vec<usize>,
}

/// Finds one global cluster → class map by maximum-weight matching on the
/// contingency table, then scores all samples and the known / unknown subsets
/// (split by true class) under that same map.
///
/// Among equally good maps, larger clusters get the lower class indices:
/// clusters are ranked by size (ties by id) and the lexicographically
/// smallest class sequence in that order wins.
pub fn cluster_accuracy(
    preds: &[usize],
    truth: &[usize],
    known: &BTreeSet<usize>,
    total_classes: usize,
) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::Contract("cluster_accuracy on an empty evaluation set".into()));
    }
    if preds.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    let k = total_classes;
    if let Some(&bad) = preds.iter().chain(truth).find(|&&v| v >= k) {
        return Err(Error::Contract(format!("id {bad} outside [0, {k})")));
    }
    let mut counts = vec![0usize; k * k];
    let mut cluster_size = vec![0usize; k];
    for (&p, &t) in preds.iter().zip(truth) {
        counts[p * k + t] += 1;
        cluster_size[p] += 1;
    }
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|&a, &b| cluster_size[b].cmp(&cluster_size[a]));
    let mut cost = Vec::with_capacity(k * k);
    for &cluster in &rank {
        cost.extend((0..k).map(|class| -(counts[cluster * k + class] as f64)));
    }
    let assignment = hungarian(&CostMatrix::new(k, cost)?);
    let mut mapping = vec![0; k];
    for (row, &cluster) in rank.iter().enumerate() {
        mapping[cluster] = assignment.perm[row];
    }

    let (mut hit_k, mut n_k, mut hit_u, mut n_u) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truth) {
        let hit = usize::from(mapping[p] == t);
        if known.contains(&t) {
            n_k += 1;
            hit_k += hit;
        } else {
            n_u += 1;
            hit_u += hit;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Metrics {
        acc_all: ratio(hit_k + hit_u, n_k + n_u),
        acc_known: ratio(hit_k, n_k),
        acc_unknown: ratio(hit_u, n_u),
        n_all: n_k + n_u,
        n_known: n_k,
        n_unknown: n_u,
        mapping,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CilMetrics {
    pub per_session_acc: Vec<f64>,
    pub average: f64,
}

impl CilMetrics {
    pub fn from_sessions(per_session_acc: Vec<f64>) -> Self {
        let average = if per_session_acc.is_empty() {
            0.0
        } else {
            per_session_acc.iter().sum::<f64>() / per_session_acc.len() as f64
        };
        Self {
            per_session_acc,
            average,
        }
    }
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(Error::Contract(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            preds.len(),
            truth.len()
        )));
    }
    let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-session accuracy from `(predictions, labels)` pairs, one per session.
pub fn cil_metrics_from_predictions(sessions: &[(Vec<usize>, Vec<usize>)]) -> Result<CilMetrics> {
    let accs = sessions
        .iter()
        .map(|(p, t)| accuracy(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(CilMetrics::from_sessions(accs))
}

/// Scores each session snapshot on its balanced test set of seen classes.
/// `class_order` lists classes in head-column order; predictions are the
/// argmax over the columns a snapshot has.
pub fn cil_metrics(
    snapshots: &[ModelBundle],
    eval_sets: &[Vec<Sample>],
    class_order: &[usize],
    head_input: HeadInput,
) -> Result<CilMetrics> {
    if snapshots.len() != eval_sets.len() {
        return Err(Error::Contract(format!(
            "{} snapshots for {} sessions",
            snapshots.len(),
            eval_sets.len()
        )));
    }
    let sessions = snapshots
        .iter()
        .zip(eval_sets)
        .map(|(m, set)| session_predictions(m, set, class_order, head_input))
        .collect::<Result<Vec<_>>>()?;
    cil_metrics_from_predictions(&sessions)
}

/// (predicted column, true column) for every sample of `set`.
pub fn session_predictions(
    model: &ModelBundle,
    set: &[Sample],
    class_order: &[usize],
    head_input: HeadInput,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let column_of = |class: usize| {
        class_order
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Contract(format!("class {class} has no head column")))
    };
    let truth = set
        .iter()
        .map(|s| column_of(s.class_id))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(model, set, head_input)?;
    Ok((preds, truth))
}

/// Argmax class column for every sample.
pub fn predict(model: &ModelBundle, set: &[Sample], head_input: HeadInput) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Sample> = set.iter().collect();
    let x = features_tensor(&refs);
    Ok(model.infer(&x, head_input)?.logits.argmax_rows())
}

/// Disagreement between hard assignments and ground truth on an unseen subset,
/// after optimal relabeling of the predictions.
pub fn generalization_gap(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("generalization_gap on an empty subset".into()));
    }
    let k = preds.iter().chain(truth).max().map_or(0, |m| m + 1);
    let m = cluster_accuracy(preds, truth, &BTreeSet::new(), k)?;
    Ok(1.0 - m.acc_all)
}

/// Fraction of rows the partial classifier labels correctly when shown
/// `Z ⊙ Mask` (defined, expected 1) and `Z ⊙ (1 − Mask)` (expected 0).
pub fn partial_separability(model: &ModelBundle, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let m = model.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let z = m.encode(&mut g, xv)?;
    let f = masked_features(&mut g, &m, z)?;
    let zcat = g.concat_rows(f.defined, f.undefined)?;
    let probs = m.partial_forward(&mut g, zcat)?;
    let p = g.value(probs).data();
    let b = x.rows();
    let correct = p
        .iter()
        .enumerate()
        .filter(|(i, &v)| if *i < b { v > 0.5 } else { v < 0.5 })
        .count();
    Ok(correct as f64 / (2 * b) as f64)
}
