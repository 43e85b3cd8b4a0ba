//! Training loops for RankUp and the baselines, evaluation, and the
//! multi-seed protocol.
//!
//! Each run owns four independent ChaCha streams derived from its seed:
//! parameter init, labeled sampling/augmentation, unlabeled
//! sampling/augmentation, and mixing. Keeping the labeled stream separate
//! means a method whose unlabeled terms carry zero weight follows exactly
//! the supervised trajectory.

use std::fmt;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_batch, generate_synthetic, load_csv, split_labeled, train_test_split, AugmentConfig, AugmentKind,
    Dataset, LabelScaler, LabeledSet, SplitSpec, SyntheticTask, TestSet, UnlabeledSet,
};
use crate::error::{Error, Result};
use crate::losses::{
    arc_labeled_loss, arc_unlabeled_fixmatch_loss, regression_loss, warmup_factor, ArcLossConfig, RegressionKind,
};
use crate::metrics::{AggregateMetrics, MetricsReport};
use crate::model::{sgd_step, EmaState, Layout, OptimState, TwoHeadModel};
use crate::rda::{warmup_iters, PseudoLabelTable, RdaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    FullySupervised,
    PiModel,
    MeanTeacher,
    MixmatchReg,
    Rankup,
    RankupRda,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Supervised,
        Method::FullySupervised,
        Method::PiModel,
        Method::MeanTeacher,
        Method::MixmatchReg,
        Method::Rankup,
        Method::RankupRda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::FullySupervised => "fully_supervised",
            Method::PiModel => "pi_model",
            Method::MeanTeacher => "mean_teacher",
            Method::MixmatchReg => "mixmatch_reg",
            Method::Rankup => "rankup",
            Method::RankupRda => "rankup_rda",
        }
    }

    /// Unlabeled-to-labeled batch ratio used when the config leaves it unset.
    pub fn default_unlabeled_ratio(self) -> f64 {
        match self {
            Method::Rankup | Method::RankupRda => 7.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

/// Weight and warm-up of the unlabeled regression term used by the
/// Π-model, Mean Teacher and MixMatch baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub weight: f64,
    /// Warm-up length as a fraction of total iterations.
    pub warmup: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { weight: 0.1, warmup: 0.4 }
    }
}

/// Full hyperparameter record of one training method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub total_iters: u64,
    pub eval_every: u64,
    pub labeled_batch: usize,
    /// `N_ulb = round(ratio · N_lb)`; the method default applies when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unlabeled_batch_ratio: Option<f64>,
    pub hidden: Vec<usize>,
    pub criterion: RegressionKind,
    pub optimizer: OptimizerConfig,
    pub omega_arc: f64,
    pub arc: ArcLossConfig,
    pub rda: RdaConfig,
    pub augment: AugmentConfig,
    pub consistency: ConsistencyConfig,
    pub mixup_alpha: f64,
    pub ema_decay: f64,
    /// Evaluate with EMA weights instead of the raw weights.
    pub eval_with_ema: bool,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Supervised,
            total_iters: 20_000,
            eval_every: 1_000,
            labeled_batch: 32,
            unlabeled_batch_ratio: None,
            hidden: vec![64, 64],
            criterion: RegressionKind::Mae,
            optimizer: OptimizerConfig::default(),
            omega_arc: 0.2,
            arc: ArcLossConfig::default(),
            rda: RdaConfig::default(),
            augment: AugmentConfig::default(),
            consistency: ConsistencyConfig::default(),
            mixup_alpha: 0.5,
            ema_decay: 0.999,
            eval_with_ema: false,
            seeds: vec![0, 1, 2],
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn unlabeled_ratio(&self) -> f64 {
        self.unlabeled_batch_ratio
            .unwrap_or_else(|| self.method.default_unlabeled_ratio())
    }

    pub fn unlabeled_batch(&self) -> usize {
        (self.unlabeled_ratio() * self.labeled_batch as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.labeled_batch == 0 {
            return Err(Error::config("labeled_batch", "must be at least 1"));
        }
        if let Some(r) = self.unlabeled_batch_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::config("unlabeled_batch_ratio", "must be finite and >= 0"));
            }
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if !(self.omega_arc >= 0.0 && self.omega_arc.is_finite()) {
            return Err(Error::config("omega_arc", "must be finite and >= 0"));
        }
        let c = &self.consistency;
        if !(c.weight >= 0.0 && c.weight.is_finite()) {
            return Err(Error::config("consistency.weight", "must be finite and >= 0"));
        }
        if !(c.warmup >= 0.0 && c.warmup.is_finite()) {
            return Err(Error::config("consistency.warmup", "must be finite and >= 0"));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config("mixup_alpha", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        OptimState::new(
            self.optimizer.learning_rate,
            self.optimizer.momentum,
            self.optimizer.weight_decay,
            0,
        )?;
        self.arc.validate()?;
        self.rda.validate()?;
        self.augment.validate()
    }
}

/// The three data views a run sees.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub test: TestSet,
}

/// Scalars logged after every iteration. Terms a method does not use are
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: u64,
    pub loss: f64,
    pub loss_sup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_arc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_unsup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub iter: u64,
    pub metrics: MetricsReport,
}

/// Everything a single training run produces.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub logs: Vec<IterLog>,
    pub evals: Vec<EvalLog>,
    /// Metrics of the final-iteration model.
    pub final_metrics: MetricsReport,
    pub model: TwoHeadModel,
    pub scaler: LabelScaler,
    /// Alignment count of the pseudo-label table, for RDA runs.
    pub align_calls: Option<u64>,
    /// Final pseudo-label table, for RDA runs.
    pub rda_table: Option<PseudoLabelTable>,
}

/// What an observer sees after each optimizer step.
pub struct StepView<'a> {
    pub iter: u64,
    pub model: &'a TwoHeadModel,
    pub teacher: Option<&'a EmaState>,
    pub table: Option<&'a PseudoLabelTable>,
}

/// Predicts the test set, maps predictions back to raw label units and
/// scores them. SRCC of a constant prediction vector is reported as 0.
pub fn evaluate(model: &TwoHeadModel, test: &TestSet, scaler: &LabelScaler) -> Result<MetricsReport> {
    let d = &test.0;
    if d.n_samples() < 2 {
        return Err(Error::config("test", "need at least two test samples"));
    }
    let preds = scaler.denormalize_all(&model.predict(d.features())?);
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("prediction for test sample {i}")));
    }
    let targets = d.targets();
    let srcc = match crate::metrics::srcc(&preds, targets) {
        Ok(v) => v,
        Err(Error::UndefinedMetric(_)) if preds.iter().all(|p| *p == preds[0]) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        mae: crate::metrics::mae(&preds, targets)?,
        r2: crate::metrics::r2(&preds, targets)?,
        srcc,
        n: preds.len(),
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_indices(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..pool)).collect()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn scaled(v: &[f64], w: f64) -> Vec<f64> {
    v.iter().map(|x| w * x).collect()
}

/// Gradient-stopped regression predictions.
fn predict_detached(m: &TwoHeadModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    m.predict(x)
}

/// Trains one method with one seed.
pub fn train(cfg: &TrainConfig, data: &TrainData, seed: u64) -> Result<RunRecord> {
    train_observed(cfg, data, seed, |_| {})
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed<F>(cfg: &TrainConfig, data: &TrainData, seed: u64, mut observe: F) -> Result<RunRecord>
where
    F: FnMut(&StepView<'_>),
{
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::config("data", "labeled set is empty"));
    }
    let method = cfg.method;
    let fail = |iter: u64, what: &str| Error::NonFinite(format!("{method} iteration {iter}: {what}"));

    // Labeled pool; the fully-supervised reference also consumes the
    // unlabeled ground truth.
    let (pool_x, pool_y_raw): (Array2<f64>, Vec<f64>) = if method == Method::FullySupervised {
        let mut ys = data.labeled.targets.clone();
        ys.extend_from_slice(data.unlabeled.reveal_targets());
        let xs = concatenate(Axis(0), &[data.labeled.features.view(), data.unlabeled.features()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        (xs, ys)
    } else {
        (data.labeled.features.clone(), data.labeled.targets.clone())
    };
    let scaler = LabelScaler::fit(&pool_y_raw)?;
    let pool_y = scaler.normalize_all(&pool_y_raw);

    let layout = Layout::new(pool_x.ncols(), cfg.hidden.clone())?;
    let mut model = TwoHeadModel::init(layout.clone(), seed);
    let o = cfg.optimizer;
    let mut opt = OptimState::new(o.learning_rate, o.momentum, o.weight_decay, model.n_params())?;
    let mut ema = EmaState::new(cfg.ema_decay, &model)?;

    let mut rng_lb = stream(seed, 1);
    let mut rng_ulb = stream(seed, 2);
    let mut rng_mix = stream(seed, 3);

    let uses_unlabeled = matches!(
        method,
        Method::PiModel | Method::MeanTeacher | Method::MixmatchReg | Method::Rankup | Method::RankupRda
    );
    let n_ulb = if uses_unlabeled && !data.unlabeled.is_empty() {
        cfg.unlabeled_batch()
    } else {
        0
    };
    let consistency_warm = warmup_iters(cfg.consistency.warmup, cfg.total_iters);
    let rda_warm = cfg.rda.alpha_warm(cfg.total_iters);

    let mut table = if method == Method::RankupRda {
        let mut t = PseudoLabelTable::new(data.unlabeled.len());
        if !t.is_empty() {
            let preds = model.predict(data.unlabeled.features())?;
            let ids: Vec<usize> = (0..preds.len()).collect();
            t.update(&ids, &preds)?;
            t.maybe_refresh(&pool_y, 0, &cfg.rda)?;
        }
        Some(t)
    } else {
        None
    };

    let mut logs = Vec::with_capacity(cfg.total_iters as usize);
    let mut evals = Vec::new();
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| Error::config("mixup_alpha", e.to_string()))?;

    for iter in 1..=cfg.total_iters {
        let lb_idx = sample_indices(&mut rng_lb, pool_y.len(), cfg.labeled_batch);
        let x_lb_raw = pool_x.select(Axis(0), &lb_idx);
        let x_lb = augment_batch(x_lb_raw.view(), AugmentKind::Weak, &cfg.augment, &mut rng_lb);
        let y_lb: Vec<f64> = lb_idx.iter().map(|&i| pool_y[i]).collect();

        let mut grads = vec![0.0; model.n_params()];
        let mut log = IterLog {
            iter,
            loss: 0.0,
            loss_sup: 0.0,
            loss_arc: None,
            loss_unsup: None,
            mask_rate: None,
            warmup: None,
        };

        if method == Method::MixmatchReg {
            mixmatch_step(
                &model, cfg, data, &x_lb, &y_lb, n_ulb, iter, consistency_warm, &mut rng_ulb, &mut rng_mix, &beta,
                &mut grads, &mut log,
            )?;
        } else {
            let fwd_lb = model.forward(x_lb.view())?;
            let sup = regression_loss(&fwd_lb.reg_out, &y_lb, cfg.criterion)?;
            log.loss_sup = sup.value;
            log.loss = sup.value;
            let mut g_arc_lb = vec![0.0; y_lb.len()];
            let rankup = matches!(method, Method::Rankup | Method::RankupRda);

            if rankup && cfg.omega_arc > 0.0 {
                let arc = arc_labeled_loss(&fwd_lb.arc_score, &y_lb)?;
                g_arc_lb = scaled(&arc.grad, cfg.omega_arc);
                log.loss_arc = Some(arc.value);
            }
            add_into(&mut grads, &model.backward(&fwd_lb.cache, &sup.grad, &g_arc_lb)?);

            match method {
                Method::Rankup | Method::RankupRda if n_ulb > 0 => {
                    let ulb_idx = sample_indices(&mut rng_ulb, data.unlabeled.len(), n_ulb);
                    let x_u = data.unlabeled.features().select(Axis(0), &ulb_idx);
                    let x_w = augment_batch(x_u.view(), AugmentKind::Weak, &cfg.augment, &mut rng_ulb);
                    let x_s = augment_batch(x_u.view(), AugmentKind::Strong, &cfg.augment, &mut rng_ulb);
                    let fwd_w = model.forward(x_w.view())?;

                    if cfg.omega_arc > 0.0 {
                        let fwd_s = model.forward(x_s.view())?;
                        let fm = arc_unlabeled_fixmatch_loss(&fwd_w.arc_score, &fwd_s.arc_score, &cfg.arc)?;
                        let w = cfg.omega_arc * cfg.arc.omega_ulb;
                        if w > 0.0 {
                            let zero = vec![0.0; n_ulb];
                            let g = model.backward(&fwd_s.cache, &zero, &scaled(&fm.grad_strong, w))?;
                            add_into(&mut grads, &g);
                        }
                        log.loss_arc = Some(log.loss_arc.unwrap_or(0.0) + cfg.arc.omega_ulb * fm.value);
                        log.mask_rate = Some(fm.mask_rate);
                    }

                    if let Some(table) = table.as_mut() {
                        let factor = warmup_factor(iter, rda_warm)?;
                        let rda = table.batch_loss(&ulb_idx, &fwd_w.reg_out, cfg.criterion)?;
                        let w = cfg.rda.omega_rda * factor;
                        if w > 0.0 && rda.initialized {
                            let zero = vec![0.0; n_ulb];
                            let g = model.backward(&fwd_w.cache, &scaled(&rda.loss.grad, w), &zero)?;
                            add_into(&mut grads, &g);
                        }
                        table.update(&ulb_idx, &fwd_w.reg_out)?;
                        log.loss_unsup = Some(rda.loss.value);
                        log.warmup = Some(factor);
                        log.loss += w * rda.loss.value;
                    }
                }
                Method::PiModel | Method::MeanTeacher if n_ulb > 0 => {
                    let ulb_idx = sample_indices(&mut rng_ulb, data.unlabeled.len(), n_ulb);
                    let x_u = data.unlabeled.features().select(Axis(0), &ulb_idx);
                    let x_student = augment_batch(x_u.view(), AugmentKind::Weak, &cfg.augment, &mut rng_ulb);
                    let x_target = augment_batch(x_u.view(), AugmentKind::Weak, &cfg.augment, &mut rng_ulb);
                    let fwd = model.forward(x_student.view())?;
                    let target = if method == Method::MeanTeacher {
                        predict_detached(&ema.to_model(&layout)?, x_target.view())?
                    } else {
                        predict_detached(&model, x_target.view())?
                    };
                    let cons = regression_loss(&fwd.reg_out, &target, RegressionKind::Mse)?;
                    let factor = warmup_factor(iter, consistency_warm)?;
                    let w = cfg.consistency.weight * factor;
                    if w > 0.0 {
                        let zero = vec![0.0; n_ulb];
                        add_into(&mut grads, &model.backward(&fwd.cache, &scaled(&cons.grad, w), &zero)?);
                    }
                    log.loss_unsup = Some(cons.value);
                    log.warmup = Some(factor);
                    log.loss += w * cons.value;
                }
                _ => {}
            }
            if let Some(l) = log.loss_arc {
                log.loss += cfg.omega_arc * l;
            }
        }

        if !log.loss.is_finite() {
            return Err(fail(iter, "loss"));
        }
        sgd_step(&mut model, &grads, &mut opt).map_err(|e| fail(iter, &e.to_string()))?;
        if method == Method::MeanTeacher || cfg.eval_with_ema {
            ema.update(&model)?;
        }
        if let Some(table) = table.as_mut() {
            table.maybe_refresh(&pool_y, iter, &cfg.rda)?;
        }
        observe(&StepView {
            iter,
            model: &model,
            teacher: (method == Method::MeanTeacher).then_some(&ema),
            table: table.as_ref(),
        });
        logs.push(log);

        if iter % cfg.eval_every == 0 || iter == cfg.total_iters {
            let metrics = if cfg.eval_with_ema {
                evaluate(&ema.to_model(&layout)?, &data.test, &scaler)?
            } else {
                evaluate(&model, &data.test, &scaler)?
            };
            evals.push(EvalLog { iter, metrics });
        }
    }

    let final_metrics = evals.last().expect("final iteration is always evaluated").metrics;
    let model = if cfg.eval_with_ema { ema.to_model(&layout)? } else { model };
    Ok(RunRecord {
        method,
        seed,
        logs,
        evals,
        final_metrics,
        model,
        scaler,
        align_calls: table.as_ref().map(|t| t.align_calls()),
        rda_table: table,
    })
}

/// One MixMatch-for-regression step: two weak views of the unlabeled batch
/// are averaged into gradient-stopped targets, then labeled and unlabeled
/// inputs are mixed with a shuffled copy of the whole batch using
/// `λ' = max(λ, 1 − λ)`, `λ ~ Beta(α, α)`.
#[allow(clippy::too_many_arguments)]
fn mixmatch_step(
    model: &TwoHeadModel,
    cfg: &TrainConfig,
    data: &TrainData,
    x_lb: &Array2<f64>,
    y_lb: &[f64],
    n_ulb: usize,
    iter: u64,
    warm: u64,
    rng_ulb: &mut ChaCha8Rng,
    rng_mix: &mut ChaCha8Rng,
    beta: &Beta<f64>,
    grads: &mut [f64],
    log: &mut IterLog,
) -> Result<()> {
    let (x_u, y_u) = if n_ulb > 0 {
        let ulb_idx = sample_indices(rng_ulb, data.unlabeled.len(), n_ulb);
        let raw = data.unlabeled.features().select(Axis(0), &ulb_idx);
        let u1 = augment_batch(raw.view(), AugmentKind::Weak, &cfg.augment, rng_ulb);
        let u2 = augment_batch(raw.view(), AugmentKind::Weak, &cfg.augment, rng_ulb);
        let p1 = predict_detached(model, u1.view())?;
        let p2 = predict_detached(model, u2.view())?;
        let guess: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| 0.5 * (a + b)).collect();
        let x = concatenate(Axis(0), &[u1.view(), u2.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let mut y = guess.clone();
        y.extend_from_slice(&guess);
        (x, y)
    } else {
        (Array2::zeros((0, x_lb.ncols())), Vec::new())
    };

    let all_x = concatenate(Axis(0), &[x_lb.view(), x_u.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let mut all_y = y_lb.to_vec();
    all_y.extend_from_slice(&y_u);
    let mut perm: Vec<usize> = (0..all_y.len()).collect();
    perm.shuffle(rng_mix);
    let lambda: f64 = beta.sample(rng_mix);
    let lam = lambda.max(1.0 - lambda);

    let mix = |rows: std::ops::Range<usize>| -> (Array2<f64>, Vec<f64>) {
        let idx: Vec<usize> = rows.clone().collect();
        let partner: Vec<usize> = rows.map(|r| perm[r]).collect();
        let a = all_x.select(Axis(0), &idx);
        let b = all_x.select(Axis(0), &partner);
        let x = &a * lam + &b * (1.0 - lam);
        let y = idx
            .iter()
            .zip(&partner)
            .map(|(&i, &j)| lam * all_y[i] + (1.0 - lam) * all_y[j])
            .collect();
        (x, y)
    };

    let n_lb = y_lb.len();
    let (mx_lb, my_lb) = mix(0..n_lb);
    let fwd = model.forward(mx_lb.view())?;
    let sup = regression_loss(&fwd.reg_out, &my_lb, cfg.criterion)?;
    add_into(grads, &model.backward(&fwd.cache, &sup.grad, &vec![0.0; n_lb])?);
    log.loss_sup = sup.value;
    log.loss = sup.value;

    if !y_u.is_empty() {
        let (mx_u, my_u) = mix(n_lb..all_y.len());
        let fwd = model.forward(mx_u.view())?;
        let cons = regression_loss(&fwd.reg_out, &my_u, RegressionKind::Mse)?;
        let factor = warmup_factor(iter, warm)?;
        let w = cfg.consistency.weight * factor;
        if w > 0.0 {
            let zero = vec![0.0; my_u.len()];
            add_into(grads, &model.backward(&fwd.cache, &scaled(&cons.grad, w), &zero)?);
        }
        log.loss_unsup = Some(cons.value);
        log.warmup = Some(factor);
        log.loss += w * cons.value;
    }
    Ok(())
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        task: SyntheticTask,
        n_samples: usize,
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: std::path::PathBuf,
        target_column: String,
        /// Rescale feature columns onto `[-1, 1]`.
        #[serde(default = "default_true")]
        scale_features: bool,
    },
}

fn default_true() -> bool {
    true
}

/// How to build the labeled/unlabeled/test views for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    pub n_labeled: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the fixed train/test partition.
    #[serde(default)]
    pub test_split_seed: u64,
    /// Seed of the labeled subset; unset means the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_split_seed: Option<u64>,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie strictly between 0 and 1"));
        }
        if self.n_labeled < 2 {
            return Err(Error::config("data.n_labeled", "must be at least 2"));
        }
        match &self.source {
            DataSource::Synthetic {
                n_samples, noise_sigma, ..
            } => {
                if *n_samples < 2 {
                    return Err(Error::config("data.source.n_samples", "must be at least 2"));
                }
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return Err(Error::config("data.source.noise_sigma", "must be finite and >= 0"));
                }
            }
            DataSource::Csv { target_column, .. } => {
                if target_column.is_empty() {
                    return Err(Error::config("data.source.target_column", "must not be empty"));
                }
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic {
                task,
                n_samples,
                noise_sigma,
                seed,
            } => generate_synthetic(*task, *n_samples, *noise_sigma, *seed),
            DataSource::Csv {
                path,
                target_column,
                scale_features,
            } => {
                let mut d = load_csv(path, target_column)?;
                if *scale_features {
                    d.scale_features_to_unit_range();
                }
                Ok(d)
            }
        }
    }

    /// Train/test partition is fixed; the labeled subset depends on
    /// `run_seed` unless pinned.
    pub fn prepare(&self, dataset: &Dataset, run_seed: u64) -> Result<TrainData> {
        let (train, test) = train_test_split(dataset, self.test_fraction, self.test_split_seed)?;
        let split = SplitSpec {
            n_labeled: self.n_labeled,
            seed: self.label_split_seed.unwrap_or(run_seed),
        };
        let (labeled, unlabeled) = split_labeled(&train, split)?;
        Ok(TrainData { labeled, unlabeled, test })
    }
}

/// Per-seed runs plus their mean ± population std.
#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub method: Method,
    pub runs: Vec<RunRecord>,
    pub aggregate: AggregateMetrics,
}

/// A protocol in which at least one seed failed; successful runs are kept.
#[derive(Debug)]
pub struct ProtocolFailure {
    pub completed: Vec<RunRecord>,
    pub failures: Vec<(u64, Error)>,
}

impl fmt::Display for ProtocolFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} seed run(s) failed", self.failures.len())?;
        for (seed, e) in &self.failures {
            write!(f, "; seed {seed}: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ProtocolFailure {}

impl From<Error> for ProtocolFailure {
    fn from(e: Error) -> Self {
        Self {
            completed: Vec::new(),
            failures: vec![(u64::MAX, e)],
        }
    }
}

/// Runs `train` once per seed in `cfg.seeds` (in parallel; each run is
/// independent and deterministic) and aggregates the final metrics.
pub fn run_protocol(cfg: &TrainConfig, spec: &DataSpec) -> Result<ProtocolReport, ProtocolFailure> {
    cfg.validate()?;
    spec.validate()?;
    let dataset = spec.load()?;
    let outcomes: Vec<(u64, Result<RunRecord>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, spec.prepare(&dataset, seed).and_then(|d| train(cfg, &d, seed))))
        .collect();
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(run) => completed.push(run),
            Err(e) => failures.push((seed, e)),
        }
    }
    if !failures.is_empty() {
        return Err(ProtocolFailure { completed, failures });
    }
    let finals: Vec<MetricsReport> = completed.iter().map(|r| r.final_metrics).collect();
    let aggregate = AggregateMetrics::of(&finals)?;
    Ok(ProtocolReport {
        method: cfg.method,
        runs: completed,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DataSpec {
        DataSpec {
            source: DataSource::Synthetic {
                task: SyntheticTask::Sine,
                n_samples: 300,
                noise_sigma: 0.1,
                seed: 0,
            },
            n_labeled: 20,
            test_fraction: 0.2,
            test_split_seed: 0,
            label_split_seed: None,
        }
    }

    fn tiny_cfg(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            total_iters: 30,
            eval_every: 10,
            labeled_batch: 8,
            hidden: vec![8],
            seeds: vec![0],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            total_iters: 0,
            ..tiny_cfg(Method::Supervised)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let cfg = TrainConfig {
            unlabeled_batch_ratio: Some(-1.0),
            ..tiny_cfg(Method::Supervised)
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("unlabeled_batch_ratio"));
    }

    #[test]
    fn every_method_trains_and_logs_each_iteration() {
        let spec = tiny_spec();
        let d = spec.load().unwrap();
        for method in Method::ALL {
            let data = spec.prepare(&d, 0).unwrap();
            let run = train(&tiny_cfg(method), &data, 0).unwrap();
            assert_eq!(run.logs.len(), 30, "{method}");
            assert_eq!(run.evals.len(), 3, "{method}");
            assert!(run.model.params().iter().all(|p| p.is_finite()));
            let reads = data.unlabeled.target_reads();
            if method == Method::FullySupervised {
                assert!(reads > 0);
            } else {
                assert_eq!(reads, 0, "{method} read hidden targets");
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let spec = tiny_spec();
        let d = spec.load().unwrap();
        let data = spec.prepare(&d, 1).unwrap();
        let cfg = tiny_cfg(Method::RankupRda);
        let a = train(&cfg, &data, 1).unwrap();
        let b = train(&cfg, &data, 1).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn evaluate_perfect_and_constant_models() {
        // A linear model y = 2x + 1 fitted exactly by hand.
        let layout = Layout::new(1, vec![]).unwrap();
        let model = TwoHeadModel::from_params(layout.clone(), vec![2.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Array2::from_shape_vec((4, 1), vec![-1.0, -0.5, 0.25, 1.0]).unwrap();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let test = TestSet(Dataset::new(x.clone(), y).unwrap());
        let scaler = LabelScaler { y_min: 0.0, y_max: 1.0 };
        let m = evaluate(&model, &test, &scaler).unwrap();
        assert_eq!((m.mae, m.r2, m.srcc), (0.0, 1.0, 1.0));
        assert_eq!(evaluate(&model, &test, &scaler).unwrap(), m);

        let constant = TwoHeadModel::from_params(layout, vec![0.0, 0.3, 0.0, 0.0]).unwrap();
        let m = evaluate(&constant, &test, &scaler).unwrap();
        assert!(m.r2 <= 0.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fixmatch".parse::<Method>().is_err());
    }
}
