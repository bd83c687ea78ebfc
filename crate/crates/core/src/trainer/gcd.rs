use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_objective, train_step, Adam, MainTerms, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{accuracy, cluster_accuracy, predict, Metrics};
use crate::losses::LossBreakdown;
use crate::model::ModelBundle;
use crate::protocols::{features_tensor, shuffled_indices, Sample, TaskSplit};

#[derive(Clone, Debug)]
pub struct GcdOutcome {
    pub bundle: ModelBundle,
    /// Mean loss terms of every epoch.
    pub traces: Vec<LossBreakdown>,
}

#[derive(Clone, Debug)]
pub struct MdgOutcome {
    pub held_out_domain: usize,
    pub metrics: Metrics,
    /// `(epoch, seen-domain known-class accuracy)` at every validation pass.
    pub val_curve: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub bundle: ModelBundle,
    pub traces: Vec<LossBreakdown>,
}

/// Index of the first maximum of a validation curve.
pub fn select_checkpoint(curve: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(_, acc)) in curve.iter().enumerate() {
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i, acc));
        }
    }
    best.map(|(i, _)| i)
}

pub fn train_gcd(split: &TaskSplit, bundle: ModelBundle, cfg: &TrainConfig) -> Result<GcdOutcome> {
    train_gcd_with(split, bundle, cfg, |_, _| Ok(()))
}

/// [`train_gcd`] with a hook called after every epoch with the 1-based epoch
/// number and the current parameters.
pub fn train_gcd_with<F>(
    split: &TaskSplit,
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<GcdOutcome>
where
    F: FnMut(usize, &ModelBundle) -> Result<()>,
{
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Config("GCD training needs a non-empty labeled pool".into()));
    }
    if split.unlabeled.len() < 2 {
        return Err(Error::Config(format!(
            "GCD training needs at least 2 unlabeled samples, got {}",
            split.unlabeled.len()
        )));
    }
    if bundle.num_classes() != split.total_classes {
        return Err(Error::Config(format!(
            "head has {} classes but the split has {}",
            bundle.num_classes(),
            split.total_classes
        )));
    }

    let b = cfg.optim.batch_size;
    let bu = b.min(split.unlabeled.len());
    let bl = b.min(split.labeled.len());
    let steps = (split.unlabeled.len() / bu).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut adam = Adam::new(&cfg.optim);
    let mut traces = Vec::with_capacity(cfg.optim.epochs);

    let mut lab_order = shuffled_indices(split.labeled.len(), &mut rng);
    let mut lab_pos = 0;
    for epoch in 1..=cfg.optim.epochs {
        let unl_order = shuffled_indices(split.unlabeled.len(), &mut rng);
        let mut sum = LossBreakdown::default();
        for s in 0..steps {
            let mut batch: Vec<&Sample> = Vec::with_capacity(bl + bu);
            let mut labels = Vec::with_capacity(bl);
            for _ in 0..bl {
                if lab_pos == lab_order.len() {
                    lab_order = shuffled_indices(split.labeled.len(), &mut rng);
                    lab_pos = 0;
                }
                let smp = &split.labeled[lab_order[lab_pos]];
                lab_pos += 1;
                labels.push(smp.class_id);
                batch.push(smp);
            }
            batch.extend(unl_order[s * bu..(s + 1) * bu].iter().map(|&i| &split.unlabeled[i]));
            let x = features_tensor(&batch);
            let bd = train_step(&mut bundle, &mut adam, |g, m| {
                let xv = g.constant(x);
                build_objective(g, m, xv, MainTerms::Gcd { labels: &labels }, cfg)
            })?;
            sum.accumulate(&bd);
        }
        traces.push(sum.scaled(1.0 / steps as f64));
        on_epoch(epoch, &bundle)?;
    }
    Ok(GcdOutcome { bundle, traces })
}

/// Hungarian-matched accuracy of `bundle` on `set`.
pub fn evaluate_gcd(
    bundle: &ModelBundle,
    set: &[Sample],
    split: &TaskSplit,
    cfg: &TrainConfig,
) -> Result<Metrics> {
    let preds = predict(bundle, set, cfg.effective_head_input())?;
    let truth: Vec<usize> = set.iter().map(|s| s.class_id).collect();
    cluster_accuracy(&preds, &truth, &split.known_classes, split.total_classes)
}

/// Leave-one-domain-out training. `factory(i)` builds the initial bundle for
/// the i-th split. A seeded fraction of each split's labeled pool is held back
/// for validation; the checkpoint with the best known-class accuracy on it is
/// scored on the split's test set (the unseen domain).
pub fn train_mdg_gcd<F>(splits: &[TaskSplit], factory: F, cfg: &TrainConfig) -> Result<Vec<MdgOutcome>>
where
    F: Fn(usize) -> Result<ModelBundle>,
{
    cfg.validate()?;
    if splits.is_empty() {
        return Err(Error::Config("multi-domain GCD needs at least one held-out split".into()));
    }
    splits
        .iter()
        .enumerate()
        .map(|(i, split)| train_one_domain(i, split, factory(i)?, cfg))
        .collect()
}

fn train_one_domain(
    index: usize,
    split: &TaskSplit,
    bundle: ModelBundle,
    cfg: &TrainConfig,
) -> Result<MdgOutcome> {
    let held_out_domain = split.test.first().map_or(index, |s| s.domain_id);
    if split.test.is_empty() {
        return Err(Error::Config(format!("split {index} has no held-out test samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed ^ 0x7A11_DA7E);
    let order = shuffled_indices(split.labeled.len(), &mut rng);
    let n_val = ((split.labeled.len() as f64) * cfg.validation_fraction).round() as usize;
    let n_val = n_val.min(split.labeled.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<Sample> = val_idx.iter().map(|&i| split.labeled[i].clone()).collect();
    let train_split = TaskSplit {
        labeled: train_idx.iter().map(|&i| split.labeled[i].clone()).collect(),
        unlabeled: split.unlabeled.clone(),
        test: Vec::new(),
        known_classes: split.known_classes.clone(),
        total_classes: split.total_classes,
    };

    let head_input = cfg.effective_head_input();
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let epochs = cfg.optim.epochs;
    let out = train_gcd_with(&train_split, bundle, cfg, |epoch, b| {
        if epoch % cfg.eval_interval == 0 || epoch == epochs {
            let acc = if val.is_empty() {
                0.0
            } else {
                let preds = predict(b, &val, head_input)?;
                let truth: Vec<usize> = val.iter().map(|s| s.class_id).collect();
                accuracy(&preds, &truth)?
            };
            curve.push((epoch, acc));
            checkpoints.push(b.clone());
        }
        Ok(())
    })?;
    let best = select_checkpoint(&curve).expect("final epoch always validated");
    let bundle = checkpoints.swap_remove(best);
    let metrics = evaluate_gcd(&bundle, &split.test, split, cfg)?;
    Ok(MdgOutcome {
        held_out_domain,
        metrics,
        best_epoch: curve[best].0,
        val_curve: curve,
        bundle,
        traces: out.traces,
    })
}
