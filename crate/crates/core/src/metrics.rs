//! MAE, R² and Spearman rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(preds: &[f64], targets: &[f64], min: usize) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.len() < min {
        return Err(Error::Shape(format!("need at least {min} samples, got {}", preds.len())));
    }
    Ok(())
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets, 1)?;
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / preds.len() as f64)
}

/// Coefficient of determination, `1 − SS_res / SS_tot`.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets, 2)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("R² of constant targets".into()));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant vector".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets, 2)?;
    pearson(&average_ranks(preds), &average_ranks(targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub r2: f64,
    pub srcc: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(preds: &[f64], targets: &[f64]) -> Result<Self> {
        Ok(Self {
            mae: mae(preds, targets)?,
            r2: r2(preds, targets)?,
            srcc: srcc(preds, targets)?,
            n: preds.len(),
        })
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("mean/std of zero values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mae: MeanStd,
    pub r2: MeanStd,
    pub srcc: MeanStd,
    pub n_runs: usize,
}

impl AggregateMetrics {
    pub fn of(reports: &[MetricsReport]) -> Result<Self> {
        let pick = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            mae: MeanStd::of(&pick(|r| r.mae))?,
            r2: MeanStd::of(&pick(|r| r.r2))?,
            srcc: MeanStd::of(&pick(|r| r.srcc))?,
            n_runs: reports.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn r2_examples() {
        let t = [1.0, 4.0, 2.0, 8.0];
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[3.75; 4], &t).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -3.0);
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn srcc_examples() {
        assert_eq!(srcc(&[0.1, 0.5, 2.0, 9.0], &[-3.0, 1.0, 1.5, 4.0]).unwrap(), 1.0);
        assert_eq!(srcc(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), -1.0);
        let tied = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        // ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]: cov 4.5, var 4.5 and 5
        assert!((tied - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
        assert!(srcc(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_handles_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(average_ranks(&[5.0; 3]), vec![2.0; 3]);
    }

    #[test]
    fn population_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.2]).unwrap().std, 0.0);
    }
}
