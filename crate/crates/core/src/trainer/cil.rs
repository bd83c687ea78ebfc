use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_objective, train_step, Adam, MainTerms, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{session_predictions, CilMetrics};
use crate::losses::LossBreakdown;
use crate::model::{MaskReport, ModelBundle};
use crate::protocols::{cil_session_data, features_tensor, shuffled_indices, CilSchedule, Sample, SyntheticSpec};

/// Parameter digests taken around one session boundary: before and after the
/// mask re-initialisation and head expansion, before any gradient step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryChecksum {
    pub session: usize,
    pub encoder_before: u64,
    pub encoder_after: u64,
    pub old_head_before: u64,
    pub old_head_after: u64,
}

#[derive(Clone, Debug)]
pub struct CilOutcome {
    pub metrics: CilMetrics,
    pub masks: Vec<MaskReport>,
    /// Per session, the mean loss terms of every epoch.
    pub traces: Vec<Vec<LossBreakdown>>,
    pub boundaries: Vec<BoundaryChecksum>,
    /// Class of each head column.
    pub class_order: Vec<usize>,
    pub bundle: ModelBundle,
}

/// Digest of the first `k` head columns (weights and biases).
pub(crate) fn head_columns_checksum(bundle: &ModelBundle, k: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let w = &bundle.head.weight;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    };
    for r in 0..w.rows() {
        for c in 0..k {
            mix(w.get(r, c));
        }
    }
    for c in 0..k {
        mix(bundle.head.bias.get(0, c));
    }
    h
}

/// Sequential training over the sessions of `schedule`. The initial head must
/// cover exactly the classes of session 0.
pub fn train_cil(
    spec: &SyntheticSpec,
    schedule: &CilSchedule,
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
) -> Result<CilOutcome> {
    cfg.validate()?;
    let first = schedule
        .sessions
        .first()
        .ok_or_else(|| Error::Config("CIL schedule has no sessions".into()))?;
    if bundle.num_classes() != first.classes.len() {
        return Err(Error::Contract(format!(
            "initial head has {} columns but session 0 has {} classes",
            bundle.num_classes(),
            first.classes.len()
        )));
    }

    let seed = cfg.optim.seed;
    let head_input = cfg.effective_head_input();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&cfg.optim);
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut class_order: Vec<usize> = Vec::new();
    let mut out = CilOutcome {
        metrics: CilMetrics::from_sessions(Vec::new()),
        masks: Vec::new(),
        traces: Vec::new(),
        boundaries: Vec::new(),
        class_order: Vec::new(),
        bundle: bundle.clone(),
    };
    let mut accs = Vec::new();

    for (i, session) in schedule.sessions.iter().enumerate() {
        if let Some(c) = session.classes.iter().find(|c| seen.contains(c)) {
            return Err(Error::Contract(format!(
                "session {i} repeats class {c}; head columns must map to disjoint classes"
            )));
        }
        let k_old = class_order.len();
        let encoder_before = bundle.checksum("encoder.");
        let old_head_before = head_columns_checksum(&bundle, k_old);

        let old = if i > 0 { Some(bundle.clone()) } else { None };
        if i > 0 {
            bundle.expand_head(session.classes.len(), seed.wrapping_add(0xE7A0 + i as u64));
        }
        bundle.reinit_mask(seed.wrapping_add(0x3A5C + i as u64), cfg.reinit_partial_cls);
        adam.forget("mask_gen.");
        if cfg.reinit_partial_cls {
            adam.forget("partial_cls.");
        }
        seen.extend(session.classes.iter().copied());
        class_order.extend(session.classes.iter().copied());
        out.boundaries.push(BoundaryChecksum {
            session: i,
            encoder_before,
            encoder_after: bundle.checksum("encoder."),
            old_head_before,
            old_head_after: head_columns_checksum(&bundle, k_old),
        });

        let (train, test) = cil_session_data(spec, schedule, i);
        let labels_all: Vec<usize> = train
            .iter()
            .map(|s| class_order.iter().position(|&c| c == s.class_id).expect("class registered"))
            .collect();
        let k_new = class_order.len();
        let kd_weight = cfg.lambda_kd * (k_old as f64 / k_new as f64).sqrt();
        let b = cfg.optim.batch_size.min(train.len());
        let steps = (train.len() / b).max(1);

        let mut traces = Vec::with_capacity(cfg.optim.epochs);
        for _ in 0..cfg.optim.epochs {
            let order = shuffled_indices(train.len(), &mut rng);
            let mut sum = LossBreakdown::default();
            for s in 0..steps {
                let idx = &order[s * b..(s + 1) * b];
                let batch: Vec<&Sample> = idx.iter().map(|&j| &train[j]).collect();
                let labels: Vec<usize> = idx.iter().map(|&j| labels_all[j]).collect();
                let x = features_tensor(&batch);
                let old_logits = match &old {
                    Some(o) => Some(o.infer(&x, head_input)?.logits),
                    None => None,
                };
                let bd = train_step(&mut bundle, &mut adam, |g, m| {
                    let xv = g.constant(x);
                    let main = MainTerms::Cil {
                        labels: &labels,
                        old_logits: old_logits.as_ref(),
                        kd_weight,
                    };
                    build_objective(g, m, xv, main, cfg)
                })?;
                sum.accumulate(&bd);
            }
            traces.push(sum.scaled(1.0 / steps as f64));
        }
        out.traces.push(traces);
        out.masks.push(bundle.snapshot_mask(i));
        let (preds, truth) = session_predictions(&bundle, &test, &class_order, head_input)?;
        accs.push(crate::eval::accuracy(&preds, &truth)?);
    }

    out.metrics = CilMetrics::from_sessions(accs);
    out.class_order = class_order;
    out.bundle = bundle;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::model::BundleShape;
    use crate::protocols::{make_cil_schedule, CilStyle};
    use crate::trainer::OptimConfig;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 6,
            num_known: 3,
            samples_per_class: 20,
            test_samples_per_class: 10,
            noise_dims: 2,
            domain_dims: 0,
            seed: 11,
            ..Default::default()
        }
    }

    fn cfg(weights: LossWeights) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                lr: 1e-2,
                epochs: 4,
                batch_size: 16,
                seed: 2,
                ..Default::default()
            },
            weights,
            ..Default::default()
        }
    }

    fn run(sessions: usize) -> CilOutcome {
        let spec = spec();
        let schedule = make_cil_schedule(&spec, sessions, CilStyle::Ordered, 0).unwrap();
        let bundle = ModelBundle::init(
            BundleShape {
                input_dim: spec.input_dim(),
                dim: 8,
                num_classes: schedule.sessions[0].classes.len(),
                depth: 1,
            },
            1,
        )
        .unwrap();
        train_cil(&spec, &schedule, bundle, &cfg(LossWeights::new(1e-3, 1e-3, 1e-3).unwrap())).unwrap()
    }

    #[test]
    fn head_width_and_reports_follow_sessions() {
        let out = run(3);
        assert_eq!(out.masks.len(), 4);
        assert_eq!(out.metrics.per_session_acc.len(), 4);
        assert_eq!(out.bundle.num_classes(), 6);
        assert_eq!(out.class_order.len(), 6);
        assert_eq!(out.traces.len(), 4);
        assert!(out.traces.iter().all(|t| t.len() == 4 && t.iter().all(LossBreakdown::is_finite)));
        for (i, m) in out.masks.iter().enumerate() {
            assert_eq!(m.session, i);
        }
    }

    #[test]
    fn boundaries_never_reset_encoder_or_old_columns() {
        let out = run(3);
        for b in &out.boundaries {
            assert_eq!(b.encoder_before, b.encoder_after, "session {}", b.session);
            assert_eq!(b.old_head_before, b.old_head_after, "session {}", b.session);
        }
    }

    #[test]
    fn single_session_is_plain_supervised() {
        let out = run(0);
        assert_eq!(out.masks.len(), 1);
        assert_eq!(out.bundle.num_classes(), 6);
        assert!(out.traces[0].iter().all(|t| t.l_main.is_finite()));
    }

    #[test]
    fn deterministic() {
        let a = run(3);
        let b = run(3);
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn repeated_class_is_contract_error() {
        let spec = spec();
        let mut schedule = make_cil_schedule(&spec, 3, CilStyle::Ordered, 0).unwrap();
        schedule.sessions[2].classes[0] = schedule.sessions[0].classes[0];
        let bundle = ModelBundle::init(
            BundleShape {
                input_dim: spec.input_dim(),
                dim: 8,
                num_classes: 3,
                depth: 1,
            },
            1,
        )
        .unwrap();
        let err = train_cil(&spec, &schedule, bundle, &cfg(LossWeights::ZERO)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
