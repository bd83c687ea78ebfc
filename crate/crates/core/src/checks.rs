//! Named finite-difference checks of every loss and of the composite
//! training objective, over many random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{grad_check, Axis, Graph, Tensor, Var, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::losses::{
    loss_cross_entropy, loss_distill, loss_infomax, loss_lreg, loss_p1, loss_p2, loss_plreg,
    LossWeights,
};
use crate::model::{BoundLinear, BoundModel, BundleShape, HeadInput, ModelBundle};
use crate::trainer::{build_objective, MainTerms, TrainConfig};

pub const TOLERANCE: f64 = 1e-4;

/// Every check the suite runs, in order.
pub const CHECK_NAMES: [&str; 11] = [
    "l_p1",
    "l_p2",
    "l_lreg",
    "l_plreg",
    "l_final_gcd_masked",
    "l_final_gcd_raw",
    "l_final_cil_masked",
    "l_final_cil_raw",
    "cross_entropy",
    "infomax",
    "distill",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub instances: usize,
    pub seed: u64,
    /// Adds an untracked term to this check's objective so its analytic
    /// gradient is wrong; used as a negative control.
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    input: usize,
    dim: usize,
    classes: usize,
    depth: usize,
}

fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims {
        batch: rng.random_range(2..=5),
        input: rng.random_range(2..=4),
        dim: rng.random_range(2..=5),
        classes: rng.random_range(2..=4),
        depth: rng.random_range(1..=2),
    }
}

fn randn(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut *rng);
            scale * v
        })
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

fn random_bundle(d: Dims, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shape = BundleShape {
        input_dim: d.input,
        dim: d.dim,
        num_classes: d.classes,
        depth: d.depth,
    };
    let bundle = ModelBundle::init(shape, rng.random()).expect("valid dims");
    // glorot weights with small random biases so no unit sits at a kink
    bundle
        .params()
        .into_iter()
        .map(|(name, t)| {
            if name.ends_with("bias") {
                randn(t.rows(), t.cols(), 0.3, rng)
            } else {
                t.clone()
            }
        })
        .collect()
}

/// Rebuilds a bound model from vars laid out in registry order.
fn model_from_vars(vars: &[Var], depth: usize) -> BoundModel {
    let lin = |i: usize| BoundLinear {
        weight: vars[2 * i],
        bias: vars[2 * i + 1],
    };
    BoundModel {
        encoder: (0..depth).map(lin).collect(),
        head: lin(depth),
        mask_gen: lin(depth + 1),
        partial_cls: lin(depth + 2),
    }
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

type Objective = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Random instance of check `name`: the objective and its parameter values.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<Tensor>)> {
    let d = random_dims(rng);
    let b = d.batch;
    Ok(match name {
        "l_p1" | "l_plreg" => {
            let mut params = random_bundle(d, rng);
            params.push(randn(b, d.input, 1.0, rng));
            let depth = d.depth;
            let w = LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0))?;
            let plreg = name == "l_plreg";
            let f: Objective = Box::new(move |g, v| {
                let (x, model_vars) = v.split_last().expect("x present");
                let m = model_from_vars(model_vars, depth);
                let z = m.encode(g, *x)?;
                if plreg {
                    let logits = m.head_forward(g, z)?;
                    let yhat = g.softmax(logits, Axis::Cols);
                    Ok(loss_plreg(g, &m, z, yhat, &w)?.plreg)
                } else {
                    loss_p1(g, &m, z)
                }
            });
            (f, params)
        }
        "l_p2" => {
            let f: Objective = Box::new(|g, v| {
                let mask = g.sigmoid(v[0]);
                loss_p2(g, mask)
            });
            (f, vec![randn(b, d.dim, 1.5, rng)])
        }
        "l_lreg" => {
            let f: Objective = Box::new(|g, v| {
                let yhat = g.softmax(v[0], Axis::Cols);
                loss_lreg(g, yhat, v[1])
            });
            (f, vec![randn(b, d.classes, 1.0, rng), randn(b, d.dim, 1.0, rng)])
        }
        "l_final_gcd_masked" | "l_final_gcd_raw" | "l_final_cil_masked" | "l_final_cil_raw" => {
            let head_input = if name.ends_with("raw") {
                HeadInput::Raw
            } else {
                HeadInput::Masked
            };
            let gcd = name.contains("gcd");
            let rows = if gcd { 2 * b } else { b };
            let mut params = random_bundle(d, rng);
            params.push(randn(rows, d.input, 1.0, rng));
            let cfg = TrainConfig {
                weights: LossWeights::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0))?,
                head_input,
                lambda_infomax: rng.random_range(0.5..2.0),
                temperature: rng.random_range(1.0..3.0),
                ..Default::default()
            };
            let y = labels(if gcd { b } else { rows }, d.classes, rng);
            let k_old = rng.random_range(1..d.classes);
            let old = randn(rows, k_old, 1.0, rng);
            let kd = rng.random_range(0.1..2.0);
            let depth = d.depth;
            let f: Objective = Box::new(move |g, v| {
                let (x, model_vars) = v.split_last().expect("x present");
                let m = model_from_vars(model_vars, depth);
                let main = if gcd {
                    MainTerms::Gcd { labels: &y }
                } else {
                    MainTerms::Cil {
                        labels: &y,
                        old_logits: Some(&old),
                        kd_weight: kd,
                    }
                };
                Ok(build_objective(g, &m, *x, main, &cfg)?.total)
            });
            (f, params)
        }
        "cross_entropy" => {
            let y = labels(b, d.classes, rng);
            let f: Objective = Box::new(move |g, v| loss_cross_entropy(g, v[0], &y));
            (f, vec![randn(b, d.classes, 2.0, rng)])
        }
        "infomax" => {
            let f: Objective = Box::new(|g, v| loss_infomax(g, v[0]));
            (f, vec![randn(b, d.classes, 2.0, rng)])
        }
        "distill" => {
            let t = rng.random_range(0.5..4.0);
            let f: Objective = Box::new(move |g, v| loss_distill(g, v[0], v[1], t));
            (f, vec![randn(b, d.classes, 2.0, rng), randn(b, d.classes, 2.0, rng)])
        }
        other => return Err(Error::Usage(format!("unknown gradient check {other:?}"))),
    })
}

/// Adds `Σ p₀²` as a constant: it moves the value but not the tape.
fn with_fault(f: Objective) -> Objective {
    Box::new(move |g, v| {
        let out = f(g, v)?;
        let p = g.value(v[0]).data().iter().map(|x| x * x).sum::<f64>();
        let c = g.constant(Tensor::scalar(p));
        g.add(out, c)
    })
}

pub fn run_check(name: &str, opts: &SuiteOptions) -> Result<CheckResult> {
    let name: &'static str = CHECK_NAMES
        .iter()
        .find(|n| **n == name)
        .ok_or_else(|| Error::Usage(format!("unknown gradient check {name:?}")))?;
    let salt = CHECK_NAMES.iter().position(|n| *n == name).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (salt << 32));
    let mut result = CheckResult {
        name,
        instances: 0,
        entries: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..opts.instances {
        let (mut f, params) = instance(name, &mut rng)?;
        if opts.fault.as_deref() == Some(name) {
            f = with_fault(f);
        }
        let report = grad_check(|g: &mut Graph, v: &[Var]| f(g, v), &params, DEFAULT_STEP)?;
        result.instances += 1;
        result.entries += report.entries_checked;
        result.max_rel_error = result.max_rel_error.max(report.max_rel_error);
    }
    Ok(result)
}

/// Runs every check in [`CHECK_NAMES`].
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    if let Some(f) = &opts.fault {
        if !CHECK_NAMES.contains(&f.as_str()) {
            return Err(Error::Usage(format!("unknown gradient check {f:?}")));
        }
    }
    CHECK_NAMES.iter().map(|n| run_check(n, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_suite(&SuiteOptions::default()).unwrap();
        assert_eq!(results.len(), CHECK_NAMES.len());
        for r in &results {
            assert_eq!(r.instances, 20);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SuiteOptions {
            instances: 3,
            fault: Some("l_p2".into()),
            ..Default::default()
        };
        let results = run_suite(&opts).unwrap();
        let bad: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        assert_eq!(bad, vec!["l_p2"]);
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(run_check("l_p3", &SuiteOptions::default()).is_err());
        let opts = SuiteOptions {
            fault: Some("nope".into()),
            ..Default::default()
        };
        assert!(run_suite(&opts).is_err());
    }
}
