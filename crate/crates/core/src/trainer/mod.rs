//! Training loops for the GCD, multi-domain GCD and long-tailed CIL pipelines.

mod cil;
mod gcd;
mod optim;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    loss_cross_entropy, loss_distill, loss_infomax, loss_lreg, loss_plreg_from, masked_features,
    total_loss, weighted_sum, LossWeights, PlRegTerms, TotalLoss,
};
use crate::model::{BoundModel, HeadInput, ModelBundle};

pub use cil::{train_cil, BoundaryChecksum, CilOutcome};
pub use gcd::{
    evaluate_gcd, select_checkpoint, train_gcd, train_gcd_with, train_mdg_gcd, GcdOutcome,
    MdgOutcome,
};
pub use optim::{Adam, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub weights: LossWeights,
    /// Enables the mask generator and partial classifier. When off, the head
    /// reads `Z` directly and L-Reg is applied to `Z`.
    pub partial_logic: bool,
    pub head_input: HeadInput,
    pub lambda_infomax: f64,
    pub lambda_kd: f64,
    pub temperature: f64,
    pub reinit_partial_cls: bool,
    /// Epochs between validation passes in multi-domain GCD.
    pub eval_interval: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            weights: LossWeights::ZERO,
            partial_logic: true,
            head_input: HeadInput::Masked,
            lambda_infomax: 1.0,
            lambda_kd: 1.0,
            temperature: 2.0,
            reinit_partial_cls: true,
            eval_interval: 10,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        for (name, v) in [("lambda_infomax", self.lambda_infomax), ("lambda_kd", self.lambda_kd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Head input actually used: always `Z` without the partial-logic block.
    pub fn effective_head_input(&self) -> HeadInput {
        if self.partial_logic {
            self.head_input
        } else {
            HeadInput::Raw
        }
    }
}

/// Supervised and unsupervised pieces of `L_main` for one step.
pub(crate) enum MainTerms<'a> {
    /// CE on the first `labels.len()` rows, InfoMax on the remaining rows.
    Gcd { labels: &'a [usize] },
    /// CE on every row plus distillation of the first `old_logits.cols()`
    /// columns towards a frozen snapshot.
    Cil {
        labels: &'a [usize],
        old_logits: Option<&'a Tensor>,
        kd_weight: f64,
    },
}

/// Builds `L_final` for a batch `x` on a fresh graph.
pub(crate) fn build_objective(
    g: &mut Graph,
    model: &BoundModel,
    x: Var,
    main: MainTerms<'_>,
    cfg: &TrainConfig,
) -> Result<TotalLoss> {
    let z = model.encode(g, x)?;
    let rows = g.shape(z).0;

    let (logits, features) = if cfg.partial_logic {
        let f = masked_features(g, model, z)?;
        let hin = match cfg.head_input {
            HeadInput::Raw => z,
            HeadInput::Masked => f.defined,
        };
        (model.head_forward(g, hin)?, Some(f))
    } else {
        (model.head_forward(g, z)?, None)
    };

    let main_loss = match main {
        MainTerms::Gcd { labels } => {
            let nl = labels.len();
            if nl == 0 || nl >= rows {
                return Err(Error::Config(
                    "GCD step needs a non-empty labeled and unlabeled batch".into(),
                ));
            }
            let lab = g.slice_rows(logits, 0..nl)?;
            let unl = g.slice_rows(logits, nl..rows)?;
            let ce = loss_cross_entropy(g, lab, labels)?;
            let im = loss_infomax(g, unl)?;
            weighted_sum(g, &[(1.0, ce), (cfg.lambda_infomax, im)])?
        }
        MainTerms::Cil {
            labels,
            old_logits,
            kd_weight,
        } => {
            let ce = loss_cross_entropy(g, logits, labels)?;
            match old_logits {
                Some(old) => {
                    let k_old = old.cols();
                    let t = g.transpose(logits);
                    let head_rows = g.slice_rows(t, 0..k_old)?;
                    let new_old = g.transpose(head_rows);
                    let old_v = g.constant(old.clone());
                    let kd = loss_distill(g, new_old, old_v, cfg.temperature)?;
                    weighted_sum(g, &[(1.0, ce), (kd_weight, kd)])?
                }
                None => ce,
            }
        }
    };

    let yhat = g.softmax(logits, Axis::Cols);
    let terms = match features {
        Some(f) => loss_plreg_from(g, model, &f, yhat, &cfg.weights)?,
        None => {
            let lreg = loss_lreg(g, yhat, z)?;
            let zero = g.constant(Tensor::scalar(0.0));
            let plreg = weighted_sum(g, &[(cfg.weights.w_lreg, lreg)])?;
            PlRegTerms {
                p1: zero,
                p2: zero,
                lreg,
                plreg,
            }
        }
    };
    total_loss(g, terms, main_loss)
}

/// One optimizer step of `bundle` on the objective built by `f`.
pub(crate) fn train_step<F>(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    f: F,
) -> Result<crate::losses::LossBreakdown>
where
    F: FnOnce(&mut Graph, &BoundModel) -> Result<TotalLoss>,
{
    let mut g = Graph::new();
    let bound = bundle.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    let breakdown = loss.breakdown(&g);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            param: "l_final".into(),
            index: 0,
        });
    }
    let grads = g.backward(loss.total)?;
    let vars = bound.param_vars();
    let params = bundle.params_mut();
    let grad_tensors: Vec<Tensor> = vars
        .iter()
        .zip(&params)
        .map(|(v, (_, p))| grads.get_or_zeros(*v, p.shape()))
        .collect();
    adam.step(params, &grad_tensors)?;
    Ok(breakdown)
}
