//! Partial-logic regularizer terms and the desk-scale main losses.
//!
//! All functions build onto a caller-owned [`Graph`] and return the scalar
//! node, so any combination can be differentiated in one backward pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::BoundModel;

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_p1: f64,
    pub w_p2: f64,
    pub w_lreg: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        w_p1: 0.0,
        w_p2: 0.0,
        w_lreg: 0.0,
    };

    pub fn new(w_p1: f64, w_p2: f64, w_lreg: f64) -> Result<Self> {
        let w = Self { w_p1, w_p2, w_lreg };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_p1", self.w_p1), ("w_p2", self.w_p2), ("w_lreg", self.w_lreg)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mask and the two masked views of a latent batch.
#[derive(Clone, Copy, Debug)]
pub struct MaskedFeatures {
    pub mask: Var,
    /// `Z ⊙ Mask`
    pub defined: Var,
    /// `Z ⊙ (1 − Mask)`
    pub undefined: Var,
}

pub fn masked_features(g: &mut Graph, model: &BoundModel, z: Var) -> Result<MaskedFeatures> {
    let mask = model.mask_forward(g, z)?;
    masked_features_with(g, z, mask)
}

/// Same as [`masked_features`] with an externally supplied mask.
pub fn masked_features_with(g: &mut Graph, z: Var, mask: Var) -> Result<MaskedFeatures> {
    let defined = g.mul(z, mask)?;
    let inv = g.one_minus(mask);
    let undefined = g.mul(z, inv)?;
    Ok(MaskedFeatures {
        mask,
        defined,
        undefined,
    })
}

/// Mean binary cross-entropy of `probs` (n×1) against constant 0/1 `labels`.
/// Probabilities are clamped to `[1e-12, 1 − 1e-12]` so `log` stays finite.
pub fn binary_cross_entropy(g: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    let (n, c) = g.shape(probs);
    if c != 1 || labels.len() != n {
        return Err(Error::shape("binary_cross_entropy", (n, c), (labels.len(), 1)));
    }
    let y = g.constant(Tensor::column_vector(labels));
    let one_minus_y = g.constant(Tensor::column_vector(
        &labels.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
    ));
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = g.log(p)?;
    let q = g.one_minus(p);
    let log_q = g.log(q)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(one_minus_y, log_q)?;
    let s = g.add(a, b)?;
    let total = g.sum_all(s);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Defined/undefined separation loss for a given mask: the partial classifier
/// must label rows of `Z ⊙ Mask` as 1 and rows of `Z ⊙ (1 − Mask)` as 0.
pub fn loss_p1_with_mask(g: &mut Graph, model: &BoundModel, z: Var, mask: Var) -> Result<Var> {
    let f = masked_features_with(g, z, mask)?;
    loss_p1_from(g, model, &f)
}

pub fn loss_p1_from(g: &mut Graph, model: &BoundModel, f: &MaskedFeatures) -> Result<Var> {
    let zcat = g.concat_rows(f.defined, f.undefined)?;
    let probs = model.partial_forward(g, zcat)?;
    let b = g.shape(f.defined).0;
    let labels: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
    binary_cross_entropy(g, probs, &labels)
}

/// L_P1 with the mask produced by the model's own generator.
pub fn loss_p1(g: &mut Graph, model: &BoundModel, z: Var) -> Result<Var> {
    let f = masked_features(g, model, z)?;
    loss_p1_from(g, model, &f)
}

/// Mean entropy of the row-softmaxed mask, `−1/(B·dim) Σ m log m`.
pub fn loss_p2(g: &mut Graph, mask: Var) -> Result<Var> {
    let (b, dim) = g.shape(mask);
    if b == 0 || dim < 2 {
        return Err(Error::shape("loss_p2", (b, dim), (1, 2)));
    }
    let m = g.softmax(mask, Axis::Cols);
    let ent = g.xlogx(m);
    let s = g.sum_all(ent);
    Ok(g.scale(s, -1.0 / (b * dim) as f64))
}

/// L-Reg over class probabilities `yhat` (B×K) and features `zin` (B×dim).
///
/// `a = softmax(yhatᵀ·zin)` is normalised over the class axis, so column `i`
/// is the class distribution of feature dimension `i`.
pub fn loss_lreg(g: &mut Graph, yhat: Var, zin: Var) -> Result<Var> {
    let (b, k) = g.shape(yhat);
    let (bz, _) = g.shape(zin);
    if b != bz {
        return Err(Error::shape("loss_lreg", (b, k), g.shape(zin)));
    }
    let yv = g.value(yhat);
    for r in 0..b {
        let s: f64 = yv.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || yv.row(r).iter().any(|v| *v < 0.0) {
            return Err(Error::Contract(format!(
                "loss_lreg: row {r} of class probabilities sums to {s}"
            )));
        }
    }
    let yt = g.transpose(yhat);
    let gram = g.matmul(yt, zin)?;
    let a = g.softmax(gram, Axis::Rows);
    lreg_from_assignment(g, a)
}

/// L-Reg evaluated on an explicit K×dim assignment matrix whose columns are
/// class distributions:
/// `−1/dim Σ_i Σ_j a_ji log a_ji + Σ_j p_j log p_j`, `p_j = 1/dim Σ_i a_ji`.
pub fn lreg_from_assignment(g: &mut Graph, a: Var) -> Result<Var> {
    let (_, dim) = g.shape(a);
    let ent = g.xlogx(a);
    let ent_sum = g.sum_all(ent);
    let term1 = g.scale(ent_sum, -1.0 / dim as f64);
    let p = g.mean_axis(a, Axis::Cols);
    let pe = g.xlogx(p);
    let term2 = g.sum_all(pe);
    g.add(term1, term2)
}

#[derive(Clone, Copy, Debug)]
pub struct PlRegTerms {
    pub p1: Var,
    pub p2: Var,
    pub lreg: Var,
    pub plreg: Var,
}

/// Weighted PL-Reg from precomputed pieces. L-Reg sees the defined features.
pub fn loss_plreg_from(
    g: &mut Graph,
    model: &BoundModel,
    features: &MaskedFeatures,
    yhat: Var,
    weights: &LossWeights,
) -> Result<PlRegTerms> {
    let p1 = loss_p1_from(g, model, features)?;
    let p2 = loss_p2(g, features.mask)?;
    let lreg = loss_lreg(g, yhat, features.defined)?;
    let plreg = weighted_sum(g, &[(weights.w_p1, p1), (weights.w_p2, p2), (weights.w_lreg, lreg)])?;
    Ok(PlRegTerms {
        p1,
        p2,
        lreg,
        plreg,
    })
}

/// PL-Reg for latent batch `z` and class probabilities `yhat`.
pub fn loss_plreg(
    g: &mut Graph,
    model: &BoundModel,
    z: Var,
    yhat: Var,
    weights: &LossWeights,
) -> Result<PlRegTerms> {
    let f = masked_features(g, model, z)?;
    loss_plreg_from(g, model, &f, yhat, weights)
}

pub(crate) fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    acc.ok_or_else(|| Error::Usage("weighted_sum of nothing".into()))
}

/// Mean negative log-softmax probability of the true class.
pub fn loss_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = g.shape(logits);
    if labels.len() != b {
        return Err(Error::shape("loss_cross_entropy", (b, k), (labels.len(), 1)));
    }
    if b == 0 {
        return Err(Error::Contract("loss_cross_entropy: empty batch".into()));
    }
    let mut onehot = Tensor::zeros(b, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!(
                "loss_cross_entropy: label {y} at row {i} outside [0, {k})"
            )));
        }
        onehot.set(i, y, 1.0);
    }
    let ls = g.log_softmax(logits, Axis::Cols);
    let oh = g.constant(onehot);
    let picked = g.mul(ls, oh)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Mean per-sample prediction entropy minus the entropy of the batch-mean
/// prediction. Lower is better: confident, balanced cluster usage.
pub fn loss_infomax(g: &mut Graph, logits: Var) -> Result<Var> {
    let (b, k) = g.shape(logits);
    if b < 2 {
        return Err(Error::shape("loss_infomax", (b, k), (2, k)));
    }
    let p = g.softmax(logits, Axis::Cols);
    let plogp = g.xlogx(p);
    let s = g.sum_all(plogp);
    let cond_entropy = g.scale(s, -1.0 / b as f64);
    let marginal = g.mean_axis(p, Axis::Rows);
    let mlogm = g.xlogx(marginal);
    let neg_marginal_entropy = g.sum_all(mlogm);
    g.add(cond_entropy, neg_marginal_entropy)
}

/// `KL(softmax(old/T) ‖ softmax(new/T))`, averaged over rows.
pub fn loss_distill(g: &mut Graph, logits_new: Var, logits_old: Var, temperature: f64) -> Result<Var> {
    let (sn, so) = (g.shape(logits_new), g.shape(logits_old));
    if sn != so {
        return Err(Error::shape("loss_distill", sn, so));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("distillation temperature must be > 0, got {temperature}")));
    }
    let inv_t = 1.0 / temperature;
    let old_scaled = g.scale(logits_old, inv_t);
    let new_scaled = g.scale(logits_new, inv_t);
    let q = g.softmax(old_scaled, Axis::Cols);
    let log_p = g.log_softmax(new_scaled, Axis::Cols);
    let qlogq = g.xlogx(q);
    let neg_ent = g.sum_all(qlogq);
    let cross = g.mul(q, log_p)?;
    let cross_sum = g.sum_all(cross);
    let kl = g.sub(neg_ent, cross_sum)?;
    Ok(g.scale(kl, 1.0 / sn.0 as f64))
}

/// Scalar values of every loss component for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p1: f64,
    pub l_p2: f64,
    pub l_lreg: f64,
    pub l_main: f64,
    pub l_plreg: f64,
    pub l_final: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_p1, self.l_p2, self.l_lreg, self.l_main, self.l_plreg, self.l_final]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise running sum, used to average over an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_p1 += other.l_p1;
        self.l_p2 += other.l_p2;
        self.l_lreg += other.l_lreg;
        self.l_main += other.l_main;
        self.l_plreg += other.l_plreg;
        self.l_final += other.l_final;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_p1: self.l_p1 * f,
            l_p2: self.l_p2 * f,
            l_lreg: self.l_lreg * f,
            l_main: self.l_main * f,
            l_plreg: self.l_plreg * f,
            l_final: self.l_final * f,
        }
    }
}

/// Graph handles for a full training objective.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub terms: PlRegTerms,
    pub main: Var,
    pub total: Var,
}

impl TotalLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_p1: g.scalar(self.terms.p1),
            l_p2: g.scalar(self.terms.p2),
            l_lreg: g.scalar(self.terms.lreg),
            l_main: g.scalar(self.main),
            l_plreg: g.scalar(self.terms.plreg),
            l_final: g.scalar(self.total),
        }
    }
}

/// `L_final = L_PL-Reg + L_main`.
pub fn total_loss(g: &mut Graph, terms: PlRegTerms, main: Var) -> Result<TotalLoss> {
    let total = g.add(terms.plreg, main)?;
    Ok(TotalLoss { terms, main, total })
}
