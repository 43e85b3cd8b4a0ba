//! Loss functions and their gradients with respect to model outputs.
//!
//! Pairwise losses run over all `N²` ordered pairs of a batch, including the
//! diagonal, and divide by `N²`. Diagonal pairs contribute to the loss value
//! but never to the gradient: their logit `r_i − r_i` does not depend on the
//! scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities inside cross-entropy are clamped to `[P_MIN, 1 − P_MIN]`.
pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    #[default]
    Mae,
    Mse,
}

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }
}

/// Mean absolute or squared error. The MAE subgradient is zero at exact ties.
pub fn regression_loss(preds: &[f64], targets: &[f64], kind: RegressionKind) -> Result<LossGrad> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Shape("regression loss over an empty batch".into()));
    }
    let n = preds.len() as f64;
    let mut value = 0.0;
    let grad = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let r = p - t;
            match kind {
                RegressionKind::Mae => {
                    value += r.abs();
                    if r > 0.0 {
                        1.0 / n
                    } else if r < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                }
                RegressionKind::Mse => {
                    value += r * r;
                    2.0 * r / n
                }
            }
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−ln σ(z)` with σ clamped to `[P_MIN, 1 − P_MIN]`, and its derivative in
/// `z` (zero where the clamp is active).
fn nll_sigmoid(z: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if p < P_MIN {
        (-P_MIN.ln(), 0.0)
    } else if p > 1.0 - P_MIN {
        (-(-P_MIN).ln_1p(), 0.0)
    } else {
        (softplus(-z), p - 1.0)
    }
}

/// Probability that sample `i` outranks sample `j`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PairProb(pub f64);

/// `σ(s_i − s_j)`.
pub fn ranknet_pair_prob(s_i: f64, s_j: f64) -> PairProb {
    PairProb(sigmoid(s_i - s_j))
}

/// Pairwise RankNet cross-entropy over all ordered pairs with soft targets
/// `target(i, j) ∈ {0, 0.5, 1}`.
pub fn ranknet_loss<F>(scores: &[f64], target: F) -> LossGrad
where
    F: Fn(usize, usize) -> f64,
{
    let n = scores.len();
    let mut out = LossGrad::zeros(n);
    if n == 0 {
        return out;
    }
    let norm = 1.0 / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            let y = target(i, j);
            let d = scores[i] - scores[j];
            let (l_pos, g_pos) = nll_sigmoid(d);
            let (l_neg, g_neg) = nll_sigmoid(-d);
            out.value += y * l_pos + (1.0 - y) * l_neg;
            if i != j {
                let g = norm * (y * g_pos - (1.0 - y) * g_neg);
                out.grad[i] += g;
                out.grad[j] -= g;
            }
        }
    }
    out.value *= norm;
    out
}

/// Two-class softmax over the logits `(r_j − r_i, r_i − r_j)`; index 1 is
/// "i outranks j". Equivalently `[σ(−2d), σ(2d)]` with `d = r_i − r_j`.
pub fn arc_pair_softmax(r_i: f64, r_j: f64) -> [f64; 2] {
    let d = r_i - r_j;
    [sigmoid(-2.0 * d), sigmoid(2.0 * d)]
}

/// Cross-entropy of the pair softmax against a hard class, as a function of
/// `d = r_i − r_j`: (loss, dloss/dd).
fn arc_pair_ce(d: f64, class: usize) -> (f64, f64) {
    if class == 1 {
        let (l, g) = nll_sigmoid(2.0 * d);
        (l, 2.0 * g)
    } else {
        let (l, g) = nll_sigmoid(-2.0 * d);
        (l, -2.0 * g)
    }
}

/// Supervised ranking loss for the ranking head: pair `(i, j)` has target
/// class 1 iff `labels[i] > labels[j]`, so ties and the diagonal are class 0.
pub fn arc_labeled_loss(arc_scores: &[f64], labels: &[f64]) -> Result<LossGrad> {
    let n = arc_scores.len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} scores vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Shape("ranking loss over an empty batch".into()));
    }
    let norm = 1.0 / (n * n) as f64;
    let mut out = LossGrad::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let class = usize::from(labels[i] > labels[j]);
            let (l, g) = arc_pair_ce(arc_scores[i] - arc_scores[j], class);
            out.value += l;
            if i != j {
                out.grad[i] += norm * g;
                out.grad[j] -= norm * g;
            }
        }
    }
    out.value *= norm;
    Ok(out)
}

/// Confidence-thresholded pseudo-labeling for the ranking head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcLossConfig {
    /// Confidence threshold, strict `>`.
    pub tau: f64,
    /// Weight of the unlabeled ranking loss inside the ranking loss.
    pub omega_ulb: f64,
    /// Accepted for config compatibility; pseudo-labels are hard argmax so
    /// it has no effect.
    pub temperature: f64,
}

impl Default for ArcLossConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            omega_ulb: 1.0,
            temperature: 0.5,
        }
    }
}

impl ArcLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau <= 1.0) {
            return Err(Error::config("arc.tau", "must lie in (0.5, 1]"));
        }
        if !(self.omega_ulb >= 0.0 && self.omega_ulb.is_finite()) {
            return Err(Error::config("arc.omega_ulb", "must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("arc.temperature", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Unlabeled ranking loss with the gradient on the strong-view scores and
/// the fraction of pairs that passed the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FixMatchLoss {
    pub value: f64,
    pub grad_strong: Vec<f64>,
    pub mask_rate: f64,
}

/// For each ordered pair, if the weak-view pair softmax is confident
/// (`max > τ`), its argmax class becomes the target for the strong-view pair
/// softmax. Weak scores are constants. Sums over all pairs and divides by
/// `N²`, masked pairs included.
pub fn arc_unlabeled_fixmatch_loss(
    weak_scores: &[f64],
    strong_scores: &[f64],
    cfg: &ArcLossConfig,
) -> Result<FixMatchLoss> {
    let n = weak_scores.len();
    if strong_scores.len() != n {
        return Err(Error::Shape(format!(
            "{n} weak scores vs {} strong scores",
            strong_scores.len()
        )));
    }
    let mut out = FixMatchLoss {
        value: 0.0,
        grad_strong: vec![0.0; n],
        mask_rate: 0.0,
    };
    if n == 0 {
        return Ok(out);
    }
    let norm = 1.0 / (n * n) as f64;
    let mut passed = 0usize;
    for i in 0..n {
        for j in 0..n {
            let probs = arc_pair_softmax(weak_scores[i], weak_scores[j]);
            let class = usize::from(probs[1] > probs[0]);
            if probs[class] <= cfg.tau {
                continue;
            }
            passed += 1;
            let (l, g) = arc_pair_ce(strong_scores[i] - strong_scores[j], class);
            out.value += l;
            if i != j {
                out.grad_strong[i] += norm * g;
                out.grad_strong[j] -= norm * g;
            }
        }
    }
    out.value *= norm;
    out.mask_rate = passed as f64 * norm;
    Ok(out)
}

/// `min(iter / alpha_warm, 1)`.
pub fn warmup_factor(iter: u64, alpha_warm: u64) -> Result<f64> {
    if alpha_warm == 0 {
        return Err(Error::config("alpha_warm", "must be at least 1"));
    }
    Ok((iter as f64 / alpha_warm as f64).min(1.0))
}

/// `ℓ_reg + ω_rda·warmup(iter)·ℓ_rda + ω_arc·ℓ_arc`.
pub fn rankup_total_loss(
    l_reg: f64,
    l_rda: f64,
    l_arc: f64,
    omega_rda: f64,
    omega_arc: f64,
    iter: u64,
    alpha_warm: u64,
) -> Result<f64> {
    if omega_rda < 0.0 || omega_arc < 0.0 {
        return Err(Error::config("omega", "loss weights must be non-negative"));
    }
    Ok(l_reg + omega_rda * warmup_factor(iter, alpha_warm)? * l_rda + omega_arc * l_arc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn regression_loss_arithmetic() {
        let l = regression_loss(&[1.0, 3.0], &[0.0, 0.0], RegressionKind::Mae).unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(l.grad, vec![0.5, 0.5]);
        let l = regression_loss(&[0.5, -1.0], &[0.5, -1.0], RegressionKind::Mse).unwrap();
        assert_eq!(l.value, 0.0);
        let l = regression_loss(&[0.5, 2.0], &[0.5, 1.0], RegressionKind::Mae).unwrap();
        assert_eq!(l.grad, vec![0.0, 0.5]);
        assert!(regression_loss(&[1.0], &[1.0, 2.0], RegressionKind::Mae).is_err());
    }

    #[test]
    fn pair_prob_symmetry_and_saturation() {
        assert_eq!(ranknet_pair_prob(0.3, 0.3).0, 0.5);
        assert!((ranknet_pair_prob(50.0, 0.0).0 - 1.0).abs() < 1e-12);
        assert!(ranknet_pair_prob(0.0, 800.0).0.is_finite());
        let (a, b) = (1.7, -0.4);
        assert!((ranknet_pair_prob(a, b).0 + ranknet_pair_prob(b, a).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranknet_stationary_symmetric_point() {
        let single = ranknet_loss(&[0.7], |_, _| 0.5);
        assert!((single.value - LN_2).abs() < 1e-15);
        let l = ranknet_loss(&[0.2; 4], |_, _| 0.5);
        assert!((l.value - LN_2).abs() < 1e-15);
        assert!(l.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn arc_softmax_basics() {
        assert_eq!(arc_pair_softmax(1.0, 1.0), [0.5, 0.5]);
        let p = arc_pair_softmax(0.4, -0.3);
        let q = arc_pair_softmax(100.4, 99.7);
        assert!((p[1] - q[1]).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn arc_labeled_small_cases() {
        let l = arc_labeled_loss(&[0.9], &[3.0]).unwrap();
        assert!((l.value - LN_2).abs() < 1e-15);
        assert_eq!(l.grad, vec![0.0]);

        let l = arc_labeled_loss(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((l.value - LN_2).abs() < 1e-15);
        // pair (1,0) wants r_1 up, pair (0,1) wants r_0 down
        assert!(l.grad[1] < 0.0 && l.grad[0] > 0.0);
    }

    #[test]
    fn fixmatch_threshold_examples() {
        let cfg = ArcLossConfig {
            tau: 1.0,
            ..Default::default()
        };
        let l = arc_unlabeled_fixmatch_loss(&[3.0, -2.0, 0.1], &[0.0, 0.5, 1.0], &cfg).unwrap();
        assert_eq!((l.value, l.mask_rate), (0.0, 0.0));

        // σ(2d) = 0.96 and 0.90 for the weak pair (0, 1)
        let d_hi = 0.5 * (0.96f64 / 0.04).ln();
        let d_lo = 0.5 * (0.90f64 / 0.10).ln();
        let cfg = ArcLossConfig::default();
        let hi = arc_unlabeled_fixmatch_loss(&[d_hi, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(hi.mask_rate, 0.5); // (0,1) and (1,0)
        let lo = arc_unlabeled_fixmatch_loss(&[d_lo, 0.0], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(lo.mask_rate, 0.0);
    }

    #[test]
    fn warmup_and_total() {
        assert_eq!(warmup_factor(100, 100).unwrap(), 1.0);
        assert_eq!(warmup_factor(50, 100).unwrap(), 0.5);
        assert_eq!(warmup_factor(1000, 100).unwrap(), 1.0);
        assert!(warmup_factor(1, 0).is_err());

        assert_eq!(rankup_total_loss(1.5, 2.0, 3.0, 0.0, 0.0, 10, 10).unwrap(), 1.5);
        let t = rankup_total_loss(1.0, 2.0, 3.0, 1.0, 0.2, 10, 10).unwrap();
        assert!((t - 3.6).abs() < 1e-15);
        assert_eq!(rankup_total_loss(1.0, 2.0, 0.0, 1.0, 0.2, 0, 10).unwrap(), 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
    }
}
