//! Self-check suites: finite-difference gradient checks of every loss
//! composed with the model, and brute-force oracle comparisons for the
//! pairwise losses, alignment and metrics.
//!
//! The oracles in [`oracle`] are written independently of the production
//! code paths (explicit softmax, O(n²) rank counting, etc.) and share no
//! helpers with them.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    arc_labeled_loss, arc_unlabeled_fixmatch_loss, ranknet_loss, regression_loss, rankup_total_loss,
    warmup_factor, ArcLossConfig, RegressionKind,
};
use crate::metrics::{mae, r2, srcc};
use crate::model::{check_gradient, Layout, TwoHeadModel};
use crate::rda::{align, align_with, interpolate_labeled_distribution, PseudoLabelTable, RdaConfig, SortDirection};

/// Brute-force reference implementations.
pub mod oracle {
    const P_MIN: f64 = 1e-12;

    fn clamp_p(p: f64) -> f64 {
        p.max(P_MIN).min(1.0 - P_MIN)
    }

    /// Two-class softmax of explicit logits.
    pub fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    pub fn ranknet(scores: &[f64], target: impl Fn(usize, usize) -> f64) -> f64 {
        let n = scores.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = clamp_p(1.0 / (1.0 + (-(scores[i] - scores[j])).exp()));
                let y = target(i, j);
                total += -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
            }
        }
        total / (n * n) as f64
    }

    pub fn arc_labeled(scores: &[f64], labels: &[f64]) -> f64 {
        let n = scores.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = scores[i] - scores[j];
                let p = softmax2(-d, d);
                let class = if labels[i] > labels[j] { 1 } else { 0 };
                total += -clamp_p(p[class]).ln();
            }
        }
        total / (n * n) as f64
    }

    /// Returns (loss, mask rate).
    pub fn fixmatch(weak: &[f64], strong: &[f64], tau: f64) -> (f64, f64) {
        let n = weak.len();
        let mut total = 0.0;
        let mut kept = 0;
        for i in 0..n {
            for j in 0..n {
                let dw = weak[i] - weak[j];
                let pw = softmax2(-dw, dw);
                let (class, conf) = if pw[1] > pw[0] { (1, pw[1]) } else { (0, pw[0]) };
                if conf > tau {
                    kept += 1;
                    let ds = strong[i] - strong[j];
                    let ps = softmax2(-ds, ds);
                    total += -clamp_p(ps[class]).ln();
                }
            }
        }
        let nn = (n * n) as f64;
        (total / nn, kept as f64 / nn)
    }

    /// Assigns to each pseudo-label the distribution value at its rank,
    /// where rank counts strictly smaller values plus equal values at lower
    /// indices.
    pub fn align(pseudo: &[f64], dist: &[f64]) -> Vec<f64> {
        (0..pseudo.len())
            .map(|i| {
                let rank = (0..pseudo.len())
                    .filter(|&j| pseudo[j] < pseudo[i] || (pseudo[j] == pseudo[i] && j < i))
                    .count();
                dist[rank]
            })
            .collect()
    }

    /// Linear interpolation evaluated point by point from the definition.
    pub fn interpolate(labels: &[f64], m: usize) -> Vec<f64> {
        let mut v = labels.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = v.len();
        if m == 1 {
            return vec![v[(k - 1) / 2]];
        }
        (0..m)
            .map(|t| {
                let pos = t as f64 * (k - 1) as f64 / (m - 1) as f64;
                let lo = (pos as usize).min(k - 2);
                let w = pos - lo as f64;
                (1.0 - w) * v[lo] + w * v[lo + 1]
            })
            .collect()
    }

    pub fn mae(p: &[f64], t: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - t[i]).abs();
        }
        s / p.len() as f64
    }

    pub fn r2(p: &[f64], t: &[f64]) -> f64 {
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let mut res = 0.0;
        let mut tot = 0.0;
        for i in 0..t.len() {
            res += (t[i] - p[i]) * (t[i] - p[i]);
            tot += (t[i] - mean) * (t[i] - mean);
        }
        1.0 - res / tot
    }

    /// Average ranks by counting: `1 + #smaller + (#equal − 1)/2`.
    pub fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let smaller = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                1.0 + smaller + (equal - 1.0) / 2.0
            })
            .collect()
    }

    /// Pearson correlation from raw sums.
    pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|y| y * y).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    pub fn srcc(p: &[f64], t: &[f64]) -> f64 {
        pearson(&ranks(p), &ranks(t))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_error,
            tolerance,
            passed: max_error < tolerance,
        }
    }

    fn boolean(name: &str, instances: usize, failures: usize) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_error: failures as f64,
            tolerance: 0.5,
            passed: failures == 0,
        }
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Labels drawn from a handful of values so ties are common.
fn tied_vec(rng: &mut ChaCha8Rng, n: usize, distinct: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..distinct) as f64).collect()
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Which loss a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientCase {
    Mae,
    RankNet,
    ArcLabeled,
    ArcFixMatch,
    RdaBatch,
    Composite,
}

impl GradientCase {
    pub const ALL: [GradientCase; 6] = [
        GradientCase::Mae,
        GradientCase::RankNet,
        GradientCase::ArcLabeled,
        GradientCase::ArcFixMatch,
        GradientCase::RdaBatch,
        GradientCase::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradientCase::Mae => "gradient/mae",
            GradientCase::RankNet => "gradient/ranknet",
            GradientCase::ArcLabeled => "gradient/arc_labeled",
            GradientCase::ArcFixMatch => "gradient/arc_fixmatch",
            GradientCase::RdaBatch => "gradient/rda_batch",
            GradientCase::Composite => "gradient/rankup_composite",
        }
    }
}

/// Max relative finite-difference error of one random instance: a fresh
/// 3→5→4 model, a labeled batch of 4 and an unlabeled batch of 5.
pub fn gradient_instance(case: GradientCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TwoHeadModel::init(Layout::new(3, vec![5, 4])?, seed);
    let x_l = uniform_matrix(&mut rng, 4, 3);
    let y_l = uniform_vec(&mut rng, 4, 0.0, 1.0);
    let x_w = uniform_matrix(&mut rng, 5, 3);
    let x_s = uniform_matrix(&mut rng, 5, 3);
    let soft: Vec<f64> = tied_vec(&mut rng, 4, 3);
    let weak_scores = model.forward(x_w.view())?.arc_score;
    let arc_cfg = ArcLossConfig {
        tau: 0.55,
        ..ArcLossConfig::default()
    };

    let mut table = PseudoLabelTable::new(9);
    table.update(&(0..9).collect::<Vec<_>>(), &uniform_vec(&mut rng, 9, 0.0, 1.0))?;
    table.maybe_refresh(&uniform_vec(&mut rng, 6, 0.0, 1.0), 0, &RdaConfig::default())?;
    let ids = [0usize, 3, 4, 7, 8];

    let zeros = |n: usize| vec![0.0; n];
    let objective = |m: &TwoHeadModel| -> Result<(f64, Vec<f64>)> {
        match case {
            GradientCase::Mae => {
                let f = m.forward(x_l.view())?;
                let l = regression_loss(&f.reg_out, &y_l, RegressionKind::Mae)?;
                Ok((l.value, m.backward(&f.cache, &l.grad, &zeros(4))?))
            }
            GradientCase::RankNet => {
                let f = m.forward(x_l.view())?;
                let target = |i: usize, j: usize| {
                    if soft[i] > soft[j] {
                        1.0
                    } else if soft[i] < soft[j] {
                        0.0
                    } else {
                        0.5
                    }
                };
                let l = ranknet_loss(&f.arc_score, target);
                Ok((l.value, m.backward(&f.cache, &zeros(4), &l.grad)?))
            }
            GradientCase::ArcLabeled => {
                let f = m.forward(x_l.view())?;
                let l = arc_labeled_loss(&f.arc_score, &y_l)?;
                Ok((l.value, m.backward(&f.cache, &zeros(4), &l.grad)?))
            }
            GradientCase::ArcFixMatch => {
                let f = m.forward(x_s.view())?;
                let l = arc_unlabeled_fixmatch_loss(&weak_scores, &f.arc_score, &arc_cfg)?;
                Ok((l.value, m.backward(&f.cache, &zeros(5), &l.grad_strong)?))
            }
            GradientCase::RdaBatch => {
                let f = m.forward(x_w.view())?;
                let l = table.batch_loss(&ids, &f.reg_out, RegressionKind::Mae)?;
                Ok((l.loss.value, m.backward(&f.cache, &l.loss.grad, &zeros(5))?))
            }
            GradientCase::Composite => {
                let (omega_rda, omega_arc, iter, warm) = (1.0, 0.2, 3, 8);
                let factor = warmup_factor(iter, warm)?;
                let fl = m.forward(x_l.view())?;
                let sup = regression_loss(&fl.reg_out, &y_l, RegressionKind::Mae)?;
                let lb = arc_labeled_loss(&fl.arc_score, &y_l)?;
                let fw = m.forward(x_w.view())?;
                let rda = table.batch_loss(&ids, &fw.reg_out, RegressionKind::Mae)?;
                let fs = m.forward(x_s.view())?;
                let ulb = arc_unlabeled_fixmatch_loss(&weak_scores, &fs.arc_score, &arc_cfg)?;
                let l_arc = lb.value + arc_cfg.omega_ulb * ulb.value;
                let value = rankup_total_loss(sup.value, rda.loss.value, l_arc, omega_rda, omega_arc, iter, warm)?;

                let scale = |v: &[f64], w: f64| v.iter().map(|g| g * w).collect::<Vec<_>>();
                let mut g = m.backward(&fl.cache, &sup.grad, &scale(&lb.grad, omega_arc))?;
                let gw = m.backward(&fw.cache, &scale(&rda.loss.grad, omega_rda * factor), &zeros(5))?;
                let gs = m.backward(&fs.cache, &zeros(5), &scale(&ulb.grad_strong, omega_arc * arc_cfg.omega_ulb))?;
                for ((a, b), c) in g.iter_mut().zip(gw).zip(gs) {
                    *a += b + c;
                }
                Ok((value, g))
            }
        }
    };
    check_gradient(&model, FD_STEP, &objective)
}

pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    GradientCase::ALL
        .iter()
        .map(|&case| {
            let mut worst: f64 = 0.0;
            for k in 0..instances as u64 {
                worst = worst.max(gradient_instance(case, seed.wrapping_mul(1_000).wrapping_add(k))?);
            }
            Ok(CheckResult::new(case.name(), instances, worst, GRADIENT_TOLERANCE))
        })
        .collect()
}

pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// Pairwise losses against the brute-force oracles for batch sizes 1..=6,
/// with tied labels and tiny score gaps mixed in.
pub fn pairwise_oracle_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_rank, mut e_lb, mut e_fm, mut e_mask) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..instances {
        let n = 1 + k % 6;
        let mut scores = uniform_vec(&mut rng, n, -3.0, 3.0);
        if k % 4 == 0 && n > 1 {
            scores[1] = scores[0];
        }
        let labels = if k % 2 == 0 {
            tied_vec(&mut rng, n, 3)
        } else {
            uniform_vec(&mut rng, n, 0.0, 1.0)
        };
        let target = |i: usize, j: usize| {
            if labels[i] > labels[j] {
                1.0
            } else if labels[i] < labels[j] {
                0.0
            } else {
                0.5
            }
        };
        let ours = ranknet_loss(&scores, target);
        e_rank = e_rank.max((ours.value - oracle::ranknet(&scores, target)).abs());

        let ours = arc_labeled_loss(&scores, &labels)?;
        e_lb = e_lb.max((ours.value - oracle::arc_labeled(&scores, &labels)).abs());

        let strong = uniform_vec(&mut rng, n, -3.0, 3.0);
        let tau = rng.random_range(0.51..1.0);
        let cfg = ArcLossConfig {
            tau,
            ..ArcLossConfig::default()
        };
        let ours = arc_unlabeled_fixmatch_loss(&scores, &strong, &cfg)?;
        let (value, mask) = oracle::fixmatch(&scores, &strong, tau);
        e_fm = e_fm.max((ours.value - value).abs());
        e_mask = e_mask.max((ours.mask_rate - mask).abs());
    }
    Ok(vec![
        CheckResult::new("oracle/ranknet", instances, e_rank, ORACLE_TOLERANCE),
        CheckResult::new("oracle/arc_labeled", instances, e_lb, ORACLE_TOLERANCE),
        CheckResult::new("oracle/arc_fixmatch", instances, e_fm, ORACLE_TOLERANCE),
        CheckResult::new("oracle/arc_fixmatch_mask", instances, e_mask, ORACLE_TOLERANCE),
    ])
}

fn multiset_eq(a: &[f64], b: &[f64]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len()
}

/// Alignment properties on random instances with `m ≤ 64`, `k ≤ 16`.
pub fn rda_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = [0usize; 7];
    let mut interp_err: f64 = 0.0;
    for k_inst in 0..instances {
        let k = rng.random_range(2..=16);
        let m = rng.random_range(1..=64);
        let labels = if k_inst % 3 == 0 {
            tied_vec(&mut rng, k, 4)
        } else {
            uniform_vec(&mut rng, k, -2.0, 5.0)
        };
        let pseudo = if k_inst % 5 == 0 {
            tied_vec(&mut rng, m, 6)
        } else {
            uniform_vec(&mut rng, m, -3.0, 6.0)
        };
        let dist = interpolate_labeled_distribution(&labels, m)?;
        let aligned = align(&pseudo, &dist)?;
        for (a, b) in dist.values().iter().zip(oracle::interpolate(&labels, m)) {
            interp_err = interp_err.max((a - b).abs());
        }

        if !multiset_eq(&aligned, dist.values()) {
            fails[0] += 1;
        }
        let rank_ok = (0..m).all(|i| (0..m).all(|j| !(pseudo[i] < pseudo[j]) || aligned[i] <= aligned[j]));
        if !rank_ok {
            fails[1] += 1;
        }
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !aligned.iter().all(|v| (lo..=hi).contains(v)) {
            fails[2] += 1;
        }
        let distinct = dist.values().windows(2).all(|w| w[0] < w[1]);
        if distinct && align(&aligned, &dist)? != aligned {
            fails[3] += 1;
        }
        if align_with(&pseudo, &dist, SortDirection::Descending)? != aligned {
            fails[4] += 1;
        }
        if m <= 8 && oracle::align(&pseudo, dist.values()) != aligned {
            fails[5] += 1;
        }
        let strict_ok = !distinct
            || (0..m).all(|i| (0..m).all(|j| !(pseudo[i] < pseudo[j]) || aligned[i] < aligned[j]));
        if !strict_ok {
            fails[6] += 1;
        }
    }
    let worked = {
        let d = interpolate_labeled_distribution(&[2.0, 5.0, 8.0], 5)?;
        let a = align(&[1.0, 9.0, 4.0, 3.0, 7.0], &d)?;
        usize::from(d.values() != [2.0, 3.5, 5.0, 6.5, 8.0] || a != [2.0, 8.0, 5.0, 3.5, 6.5])
    };
    Ok(vec![
        CheckResult::boolean("rda/multiset_conservation", instances, fails[0]),
        CheckResult::boolean("rda/rank_preservation", instances, fails[1]),
        CheckResult::boolean("rda/range_containment", instances, fails[2]),
        CheckResult::boolean("rda/idempotence", instances, fails[3]),
        CheckResult::boolean("rda/sort_direction_indifference", instances, fails[4]),
        CheckResult::boolean("rda/exhaustive_assignment_oracle", instances, fails[5]),
        CheckResult::boolean("rda/strict_rank_preservation", instances, fails[6]),
        CheckResult::new("rda/interpolation_oracle", instances, interp_err, 1e-12),
        CheckResult::boolean("rda/worked_example", 1, worked),
    ])
}

/// Metrics against the scratch oracles, half the instances tie-heavy
/// (at most five distinct values).
pub fn metrics_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e_mae, mut e_r2, mut e_srcc) = (0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=40);
        let (p, t) = if done % 2 == 0 {
            (tied_vec(&mut rng, n, 5), tied_vec(&mut rng, n, 5))
        } else {
            (uniform_vec(&mut rng, n, -5.0, 5.0), uniform_vec(&mut rng, n, -5.0, 5.0))
        };
        let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
        if constant(&p) || constant(&t) {
            continue;
        }
        e_mae = e_mae.max((mae(&p, &t)? - oracle::mae(&p, &t)).abs());
        e_r2 = e_r2.max((r2(&p, &t)? - oracle::r2(&p, &t)).abs());
        e_srcc = e_srcc.max((srcc(&p, &t)? - oracle::srcc(&p, &t)).abs());
        done += 1;
    }
    Ok(vec![
        CheckResult::new("metrics/mae", instances, e_mae, ORACLE_TOLERANCE),
        CheckResult::new("metrics/r2", instances, e_r2, ORACLE_TOLERANCE),
        CheckResult::new("metrics/srcc", instances, e_srcc, ORACLE_TOLERANCE),
    ])
}

/// Every suite at the sizes used by the acceptance tests.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = gradient_suite(20, seed)?;
    out.extend(pairwise_oracle_suite(200, seed)?);
    out.extend(rda_suite(500, seed)?);
    out.extend(metrics_suite(100, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_softmax_matches_sigmoid_form() {
        let p = oracle::softmax2(-0.7, 0.7);
        assert!((p[1] - 1.0 / (1.0 + (-1.4f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn oracle_ranks_and_align_examples() {
        assert_eq!(oracle::ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let a = oracle::align(&[1.0, 9.0, 4.0, 3.0, 7.0], &[2.0, 3.5, 5.0, 6.5, 8.0]);
        assert_eq!(a, vec![2.0, 8.0, 5.0, 3.5, 6.5]);
        assert_eq!(oracle::interpolate(&[2.0, 5.0, 8.0], 5), vec![2.0, 3.5, 5.0, 6.5, 8.0]);
    }

    #[test]
    fn small_suites_pass() {
        for r in gradient_suite(2, 7).unwrap()
            .into_iter()
            .chain(pairwise_oracle_suite(24, 7).unwrap())
            .chain(rda_suite(40, 7).unwrap())
            .chain(metrics_suite(20, 7).unwrap())
        {
            assert!(r.passed, "{r:?}");
        }
    }
}
