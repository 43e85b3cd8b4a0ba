//! Datasets, labeled/unlabeled splitting, label normalization and
//! vector-space augmentation.
//!
//! Every data-producing function takes an explicit seed or rng and is
//! bit-deterministic for fixed arguments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix with scalar targets in raw label units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Vec<f64>,
    ids: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset with ids `0..n` in row order.
    pub fn new(features: Array2<f64>, targets: Vec<f64>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Shape("dataset must contain at least one sample".into()));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} feature rows but {} targets",
                n,
                targets.len()
            )));
        }
        if let Some((row, _)) = targets.iter().enumerate().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("target of sample {row}")));
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {col} of sample {row}")));
        }
        Ok(Self {
            features,
            targets,
            ids: (0..n).collect(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// New dataset made of the given rows, re-indexed from zero.
    fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            ids: (0..rows.len()).collect(),
        }
    }

    /// Rescales every feature column linearly onto `[-1, 1]` using its
    /// min/max. Constant columns map to zero.
    pub fn scale_features_to_unit_range(&mut self) {
        for mut col in self.features.columns_mut() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            col.mapv_inplace(|v| if span > 0.0 { 2.0 * (v - lo) / span - 1.0 } else { 0.0 });
        }
    }
}

/// Synthetic regression tasks standing in for real datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    /// `y = sin(3πx)`, one feature.
    Sine,
    /// `y = x1³ − x1·x2 + 0.5·x2²`, two features.
    Polynomial,
    /// Friedman #1 on five features, evaluated at `u = (x + 1) / 2`.
    Friedman,
}

impl SyntheticTask {
    pub fn n_features(self) -> usize {
        match self {
            SyntheticTask::Sine => 1,
            SyntheticTask::Polynomial => 2,
            SyntheticTask::Friedman => 5,
        }
    }

    /// Noise-free target for a feature vector in `[-1, 1]^d`.
    pub fn target(self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            SyntheticTask::Sine => (3.0 * PI * x[0]).sin(),
            SyntheticTask::Polynomial => x[0].powi(3) - x[0] * x[1] + 0.5 * x[1] * x[1],
            SyntheticTask::Friedman => {
                let u: Vec<f64> = x.iter().map(|v| 0.5 * (v + 1.0)).collect();
                10.0 * (PI * u[0] * u[1]).sin()
                    + 20.0 * (u[2] - 0.5).powi(2)
                    + 10.0 * u[3]
                    + 5.0 * u[4]
            }
        }
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SyntheticTask::Sine),
            "polynomial" => Ok(SyntheticTask::Polynomial),
            "friedman" => Ok(SyntheticTask::Friedman),
            other => Err(Error::config(
                "task",
                format!("unknown synthetic task {other:?} (expected sine, polynomial or friedman)"),
            )),
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Sine => "sine",
            SyntheticTask::Polynomial => "polynomial",
            SyntheticTask::Friedman => "friedman",
        })
    }
}

/// Samples `n_samples` points uniformly from `[-1, 1]^d` and labels them
/// with the task function plus Gaussian noise.
///
/// Per sample the stream yields the `d` feature draws followed by one
/// standard-normal noise draw, in that order.
pub fn generate_synthetic(
    task: SyntheticTask,
    n_samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(Error::config("n_samples", "must be at least 2"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma", "must be finite and non-negative"));
    }
    let d = task.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut features = Array2::zeros((n_samples, d));
    let mut targets = Vec::with_capacity(n_samples);
    let mut x = vec![0.0; d];
    for i in 0..n_samples {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = uniform.sample(&mut rng);
            features[[i, j]] = *xj;
        }
        let eps: f64 = StandardNormal.sample(&mut rng);
        targets.push(task.target(&x) + noise_sigma * eps);
    }
    Dataset::new(features, targets)
}

/// Reads a headered, comma-separated numeric table. Every column other than
/// `target_column` becomes a feature, in file order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .clone();
    let target_idx = headers
        .iter()
        .position(|h| h.trim() == target_column)
        .ok_or_else(|| Error::Ingestion(format!("column {target_column} not found")))?;

    let n_cols = headers.len();
    let mut flat = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingestion(format!("row {}: {e}", row + 1)))?;
        if record.len() != n_cols {
            return Err(Error::Ingestion(format!(
                "row {}: expected {n_cols} cells, found {}",
                row + 1,
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Ingestion(format!(
                    "row {}, column {}: non-numeric cell {cell:?}",
                    row + 1,
                    &headers[col]
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Ingestion(format!(
                    "row {}, column {}: non-finite cell {cell:?}",
                    row + 1,
                    &headers[col]
                )));
            }
            if col == target_idx {
                targets.push(value);
            } else {
                flat.push(value);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Ingestion(format!("{}: no data rows", path.display())));
    }
    let features = Array2::from_shape_vec((targets.len(), n_cols - 1), flat)
        .map_err(|e| Error::Ingestion(e.to_string()))?;
    Dataset::new(features, targets)
}

/// Held-out evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet(pub Dataset);

/// Random train/test partition; `test_fraction` of the rows (at least one)
/// go to the test set.
pub fn train_test_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, TestSet)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("test_fraction", "must lie strictly between 0 and 1"));
    }
    let n = d.n_samples();
    let n_test = ((n as f64 * test_fraction).round() as usize).max(1);
    if n_test >= n {
        return Err(Error::config("test_fraction", "leaves no training samples"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((d.select(&train), TestSet(d.select(&test))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub seed: u64,
}

/// Labeled training examples, raw label units.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub targets: Vec<f64>,
    /// Ids in the source dataset.
    pub ids: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Unlabeled training examples.
///
/// True targets are kept so fully-supervised reference runs can use them,
/// but they are only reachable through [`UnlabeledSet::reveal_targets`],
/// which counts every access.
#[derive(Debug)]
pub struct UnlabeledSet {
    features: Array2<f64>,
    ids: Vec<usize>,
    hidden_targets: Vec<f64>,
    target_reads: AtomicUsize,
}

impl Clone for UnlabeledSet {
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            ids: self.ids.clone(),
            hidden_targets: self.hidden_targets.clone(),
            target_reads: AtomicUsize::new(self.target_reads.load(Ordering::Relaxed)),
        }
    }
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Ids in the source dataset. Position `i` here is the unlabeled index
    /// used by the pseudo-label table.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Ground-truth targets. Only fully-supervised reference runs may call this.
    pub fn reveal_targets(&self) -> &[f64] {
        self.target_reads.fetch_add(1, Ordering::Relaxed);
        &self.hidden_targets
    }

    /// How many times the hidden targets have been read.
    pub fn target_reads(&self) -> usize {
        self.target_reads.load(Ordering::Relaxed)
    }
}

/// Randomly picks `n_labeled` samples as labeled; the rest are unlabeled.
/// Both sides keep ascending source-id order.
pub fn split_labeled(d: &Dataset, s: SplitSpec) -> Result<(LabeledSet, UnlabeledSet)> {
    let n = d.n_samples();
    if s.n_labeled == 0 || s.n_labeled >= n {
        return Err(Error::config(
            "n_labeled",
            format!("must satisfy 1 <= n_labeled < n_samples ({n}), got {}", s.n_labeled),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));
    let (lb, ulb) = order.split_at(s.n_labeled);
    let mut lb = lb.to_vec();
    let mut ulb = ulb.to_vec();
    lb.sort_unstable();
    ulb.sort_unstable();
    let labeled = LabeledSet {
        features: d.features.select(Axis(0), &lb),
        targets: lb.iter().map(|&i| d.targets[i]).collect(),
        ids: lb.iter().map(|&i| d.ids[i]).collect(),
    };
    let unlabeled = UnlabeledSet {
        features: d.features.select(Axis(0), &ulb),
        hidden_targets: ulb.iter().map(|&i| d.targets[i]).collect(),
        ids: ulb.iter().map(|&i| d.ids[i]).collect(),
        target_reads: AtomicUsize::new(0),
    };
    Ok((labeled, unlabeled))
}

/// Min/max label normalization onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub y_min: f64,
    pub y_max: f64,
}

impl LabelScaler {
    pub fn fit(targets: &[f64]) -> Result<Self> {
        let y_min = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let y_max = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if targets.is_empty() {
            return Err(Error::Shape("cannot fit a scaler on zero targets".into()));
        }
        if !(y_max > y_min) {
            return Err(Error::DegenerateScale(y_min));
        }
        Ok(Self { y_min, y_max })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * (self.y_max - self.y_min) + self.y_min
    }

    pub fn normalize_all(&self, ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.normalize(y)).collect()
    }

    pub fn denormalize_all(&self, zs: &[f64]) -> Vec<f64> {
        zs.iter().map(|&z| self.denormalize(z)).collect()
    }
}

/// Fits the label scaler on labeled targets only.
pub fn fit_scaler(labeled: &LabeledSet) -> Result<LabelScaler> {
    LabelScaler::fit(&labeled.targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Weak view: Gaussian jitter. Strong view: larger jitter followed by
/// per-feature zero masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.02,
            strong_noise_sigma: 0.1,
            strong_mask_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_sigma >= 0.0 && self.weak_noise_sigma.is_finite()) {
            return Err(Error::config("augment.weak_noise_sigma", "must be finite and >= 0"));
        }
        if !(self.strong_noise_sigma >= self.weak_noise_sigma && self.strong_noise_sigma.is_finite())
        {
            return Err(Error::config(
                "augment.strong_noise_sigma",
                "must be finite and >= weak_noise_sigma",
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::config("augment.strong_mask_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Augments one feature vector. Consumes one normal draw per feature, plus
/// one uniform draw per feature for the strong view.
pub fn augment<R: Rng + ?Sized>(
    x: &[f64],
    kind: AugmentKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = x.to_vec();
    augment_in_place(&mut out, kind, cfg, rng);
    Ok(out)
}

fn augment_in_place<R: Rng + ?Sized>(x: &mut [f64], kind: AugmentKind, cfg: &AugmentConfig, rng: &mut R) {
    let sigma = match kind {
        AugmentKind::Weak => cfg.weak_noise_sigma,
        AugmentKind::Strong => cfg.strong_noise_sigma,
    };
    for v in x.iter_mut() {
        let eps: f64 = StandardNormal.sample(rng);
        *v += sigma * eps;
    }
    if kind == AugmentKind::Strong {
        for v in x.iter_mut() {
            if rng.random::<f64>() < cfg.strong_mask_prob {
                *v = 0.0;
            }
        }
    }
}

/// Row-wise [`augment`] over a batch, rows processed in order.
pub fn augment_batch<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    kind: AugmentKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let slice = row.as_slice_mut().expect("owned rows are contiguous");
        augment_in_place(slice, kind, cfg, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn sine_is_deterministic_and_follows_formula() {
        let a = generate_synthetic(SyntheticTask::Sine, 4, 0.0, 0).unwrap();
        let b = generate_synthetic(SyntheticTask::Sine, 4, 0.0, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples(), 4);
        for (x, y) in a.features().rows().into_iter().zip(a.targets()) {
            assert!((-1.0..=1.0).contains(&x[0]));
            assert_eq!(*y, (3.0 * std::f64::consts::PI * x[0]).sin());
        }
    }

    #[test]
    fn synthetic_rejects_tiny_sets_and_unknown_tasks() {
        assert!(matches!(
            generate_synthetic(SyntheticTask::Sine, 1, 0.0, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!("cosine".parse::<SyntheticTask>(), Err(Error::Config { .. })));
        assert!(generate_synthetic(SyntheticTask::Sine, 5, -0.1, 0).is_err());
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_reads_rows_in_order() {
        let f = write_csv("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n");
        let d = load_csv(f.path(), "y").unwrap();
        assert_eq!(d.n_samples(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.targets(), &[3.0, 6.0, 9.0]);
        assert_eq!(d.ids(), &[0, 1, 2]);
        assert_eq!(d.features()[[1, 1]], 5.0);
    }

    #[test]
    fn csv_error_paths_name_the_problem() {
        let f = write_csv("x1,x2,y\n1,2,3\n");
        let err = load_csv(f.path(), "z").unwrap_err().to_string();
        assert!(err.contains("column z not found"), "{err}");

        let f = write_csv("x1,x2,y\n1,2,3\n1,NaN,3\n");
        let err = load_csv(f.path(), "y").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("x2"), "{err}");

        let f = write_csv("x1,y\n1,abc\n");
        let err = load_csv(f.path(), "y").unwrap_err().to_string();
        assert!(err.contains("column y"), "{err}");

        assert!(matches!(
            load_csv("/nonexistent/file.csv", "y"),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn split_boundaries_and_determinism() {
        let d = generate_synthetic(SyntheticTask::Sine, 10, 0.1, 3).unwrap();
        assert!(split_labeled(&d, SplitSpec { n_labeled: 10, seed: 0 }).is_err());
        assert!(split_labeled(&d, SplitSpec { n_labeled: 0, seed: 0 }).is_err());
        let (l1, u1) = split_labeled(&d, SplitSpec { n_labeled: 3, seed: 0 }).unwrap();
        let (l2, u2) = split_labeled(&d, SplitSpec { n_labeled: 3, seed: 0 }).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(u1.ids(), u2.ids());
        assert_eq!(l1.len(), 3);
        assert_eq!(u1.len(), 7);
        assert_eq!(u1.target_reads(), 0);
    }

    #[test]
    fn scaler_arithmetic_and_degenerate_case() {
        let s = LabelScaler::fit(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!((s.y_min, s.y_max), (10.0, 30.0));
        assert_eq!(s.normalize(20.0), 0.5);
        for y in [10.0, 20.0, 30.0] {
            assert!((s.denormalize(s.normalize(y)) - y).abs() <= 1e-12);
        }
        assert!(matches!(LabelScaler::fit(&[5.0, 5.0]), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn augmentation_edge_cases() {
        let x = [0.3, -0.7, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 1.0,
        };
        assert_eq!(augment(&x, AugmentKind::Weak, &cfg, &mut rng).unwrap(), x.to_vec());
        assert_eq!(augment(&x, AugmentKind::Strong, &cfg, &mut rng).unwrap(), vec![0.0; 3]);

        let cfg = AugmentConfig::default();
        let a = augment(&x, AugmentKind::Strong, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment(&x, AugmentKind::Strong, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);

        let bad = AugmentConfig {
            weak_noise_sigma: 0.2,
            strong_noise_sigma: 0.1,
            strong_mask_prob: 0.0,
        };
        assert!(augment(&x, AugmentKind::Weak, &bad, &mut rng).is_err());
    }

    #[test]
    fn batch_augmentation_matches_row_augmentation() {
        let d = generate_synthetic(SyntheticTask::Friedman, 6, 0.0, 2).unwrap();
        let cfg = AugmentConfig::default();
        let batch = augment_batch(d.features(), AugmentKind::Strong, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (i, row) in d.features().rows().into_iter().enumerate() {
            let single = augment(row.as_slice().unwrap(), AugmentKind::Strong, &cfg, &mut rng).unwrap();
            assert_eq!(batch.row(i).to_vec(), single);
        }
    }
}
