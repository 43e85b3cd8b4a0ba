//! Two-headed tanh MLP with hand-written backprop, SGD with momentum,
//! EMA weights and a finite-difference gradient checker.
//!
//! Parameters live in one flat `Vec<f64>`. For each trunk layer the weight
//! matrix (`fan_in × fan_out`, row-major) is followed by its bias; the
//! regression head (`trunk_dim` weights, one bias) and the ranking head come
//! last, in that order.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Architecture of a [`TwoHeadModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    /// Hidden widths; empty means both heads are affine in the input.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Affine {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    fn end(&self) -> usize {
        self.offset + (self.fan_in + 1) * self.fan_out
    }
}

impl Layout {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        Ok(Self { input_dim, hidden })
    }

    pub fn trunk_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn affines(&self) -> (Vec<Affine>, Affine, Affine) {
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        let mut trunk = Vec::with_capacity(self.hidden.len());
        for &fan_out in &self.hidden {
            let a = Affine { fan_in, fan_out, offset };
            offset = a.end();
            fan_in = fan_out;
            trunk.push(a);
        }
        let reg = Affine { fan_in, fan_out: 1, offset };
        let arc = Affine { fan_in, fan_out: 1, offset: reg.end() };
        (trunk, reg, arc)
    }

    pub fn n_params(&self) -> usize {
        self.affines().2.end()
    }
}

/// Shared tanh trunk feeding a scalar regression head and a scalar ranking
/// score head.
#[derive(Debug, Clone)]
pub struct TwoHeadModel {
    layout: Layout,
    trunk: Vec<Affine>,
    reg_head: Affine,
    arc_head: Affine,
    params: Vec<f64>,
    generation: u64,
}

impl PartialEq for TwoHeadModel {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.params == other.params
    }
}

/// Activations recorded by [`TwoHeadModel::forward`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input batch followed by each trunk layer's tanh output.
    activations: Vec<Array2<f64>>,
    generation: u64,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub reg_out: Vec<f64>,
    pub arc_score: Vec<f64>,
    pub cache: ForwardCache,
}

impl TwoHeadModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layout: Layout, seed: u64) -> Self {
        let (trunk, reg_head, arc_head) = layout.affines();
        let mut params = vec![0.0; arc_head.end()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in trunk.iter().chain([&reg_head, &arc_head]) {
            let bound = (6.0 / (a.fan_in + a.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut params[a.weight_range()] {
                *w = dist.sample(&mut rng);
            }
        }
        Self {
            layout,
            trunk,
            reg_head,
            arc_head,
            params,
            generation: next_generation(),
        }
    }

    pub fn from_params(layout: Layout, params: Vec<f64>) -> Result<Self> {
        let (trunk, reg_head, arc_head) = layout.affines();
        if params.len() != arc_head.end() {
            return Err(Error::Shape(format!(
                "layout needs {} parameters, got {}",
                arc_head.end(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self {
            layout,
            trunk,
            reg_head,
            arc_head,
            params,
            generation: next_generation(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameters; invalidates outstanding caches.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        self.generation = next_generation();
        Ok(())
    }

    /// Mutable access to the flat parameter vector; invalidates caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    /// Index range of the regression head (weights then bias).
    pub fn reg_head_range(&self) -> std::ops::Range<usize> {
        self.reg_head.offset..self.reg_head.end()
    }

    /// Index range of the ranking head (weights then bias).
    pub fn arc_head_range(&self) -> std::ops::Range<usize> {
        self.arc_head.offset..self.arc_head.end()
    }

    fn weight(&self, a: &Affine) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((a.fan_in, a.fan_out), &self.params[a.weight_range()])
            .expect("layout matches parameter vector")
    }

    fn bias(&self, a: &Affine) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[a.bias_range()])
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.layout.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} features, batch has {}",
                self.layout.input_dim,
                x.ncols()
            )));
        }
        let mut activations = Vec::with_capacity(self.trunk.len() + 1);
        activations.push(x.to_owned());
        for a in &self.trunk {
            let prev = activations.last().expect("input pushed");
            let mut z = prev.dot(&self.weight(a));
            z += &self.bias(a);
            z.mapv_inplace(f64::tanh);
            activations.push(z);
        }
        let h = activations.last().expect("input pushed");
        let head = |a: &Affine| -> Vec<f64> {
            let w = self.weight(a).column(0).to_owned();
            let b = self.params[a.bias_range().start];
            (h.dot(&w) + b).to_vec()
        };
        let reg_out = head(&self.reg_head);
        let arc_score = head(&self.arc_head);
        Ok(Forward {
            reg_out,
            arc_score,
            cache: ForwardCache {
                activations,
                generation: self.generation,
            },
        })
    }

    /// Gradient of `Σ_b grad_reg[b]·reg_out[b] + grad_arc[b]·arc_score[b]`
    /// with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_reg: &[f64], grad_arc: &[f64]) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let h = cache.activations.last().expect("cache holds the input");
        let batch = h.nrows();
        if grad_reg.len() != batch || grad_arc.len() != batch {
            return Err(Error::Shape(format!(
                "batch of {batch} but output gradients of length {} and {}",
                grad_reg.len(),
                grad_arc.len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let g_reg = ArrayView1::from(grad_reg);
        let g_arc = ArrayView1::from(grad_arc);

        let mut d_h = Array2::<f64>::zeros(h.raw_dim());
        for (a, g) in [(&self.reg_head, &g_reg), (&self.arc_head, &g_arc)] {
            let gw = h.t().dot(g);
            grads[a.weight_range()].copy_from_slice(gw.as_slice().expect("contiguous"));
            grads[a.bias_range().start] = g.sum();
            let w = self.weight(a).column(0).to_owned();
            d_h += &outer(g, &w.view());
        }

        for (l, a) in self.trunk.iter().enumerate().rev() {
            let out = &cache.activations[l + 1];
            let input = &cache.activations[l];
            let d_z = d_h * &out.mapv(|t| 1.0 - t * t);
            let d_w = input.t().dot(&d_z);
            for (dst, src) in grads[a.weight_range()].iter_mut().zip(d_w.iter()) {
                *dst = *src;
            }
            let d_b = d_z.sum_axis(Axis(0));
            grads[a.bias_range()].copy_from_slice(d_b.as_slice().expect("contiguous"));
            d_h = if l > 0 {
                d_z.dot(&self.weight(a).t())
            } else {
                Array2::zeros((0, 0))
            };
        }
        Ok(grads)
    }

    /// Regression-head predictions without keeping the cache around.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.reg_out)
    }
}

fn outer(a: &ArrayView1<'_, f64>, b: &ArrayView1<'_, f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    &col * &row
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, n_params: usize) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be finite and >= 0"));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; n_params],
        })
    }
}

/// `v ← momentum·v + g + weight_decay·θ`, then `θ ← θ − lr·v`.
pub fn sgd_step(m: &mut TwoHeadModel, grads: &[f64], opt: &mut OptimState) -> Result<()> {
    if grads.len() != m.params.len() || opt.velocity.len() != m.params.len() {
        return Err(Error::Shape(format!(
            "model has {} parameters, gradient {} and velocity {}",
            m.params.len(),
            grads.len(),
            opt.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} is {}", grads[i])));
    }
    let (lr, mu, wd) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    for ((p, v), g) in m.params.iter_mut().zip(opt.velocity.iter_mut()).zip(grads) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    m.generation = next_generation();
    if let Some(i) = m.params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} after SGD step")));
    }
    Ok(())
}

/// Exponential moving average of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<f64>,
}

impl EmaState {
    /// Shadow starts at the model's current parameters.
    pub fn new(decay: f64, m: &TwoHeadModel) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        Ok(Self {
            decay,
            shadow: m.params.clone(),
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·θ`.
    pub fn update(&mut self, m: &TwoHeadModel) -> Result<()> {
        if self.shadow.len() != m.params.len() {
            return Err(Error::Shape("EMA shadow and model layouts differ".into()));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(&m.params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }

    /// A model carrying the shadow weights.
    pub fn to_model(&self, layout: &Layout) -> Result<TwoHeadModel> {
        TwoHeadModel::from_params(layout.clone(), self.shadow.clone())
    }
}

pub fn ema_update(ema: &mut EmaState, m: &TwoHeadModel) -> Result<()> {
    ema.update(m)
}

/// Scalar objective over the model with its analytic parameter gradient.
pub trait Objective {
    fn eval(&self, m: &TwoHeadModel) -> Result<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&TwoHeadModel) -> Result<(f64, Vec<f64>)>,
{
    fn eval(&self, m: &TwoHeadModel) -> Result<(f64, Vec<f64>)> {
        self(m)
    }
}

const EPS_RANGE: std::ops::RangeInclusive<f64> = 1e-7..=1e-3;

/// Denominator floor of the relative error. Pairwise losses are exactly
/// invariant to the ranking-head bias, and rounding leaves ~1e-11 of
/// central-difference noise on that zero gradient; below this magnitude the
/// comparison is effectively absolute.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient of
/// `objective` and central differences with step `eps`, over all parameters.
pub fn check_gradient(m: &TwoHeadModel, eps: f64, objective: &impl Objective) -> Result<f64> {
    if !EPS_RANGE.contains(&eps) {
        return Err(Error::Contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = objective.eval(m)?;
    if analytic.len() != m.n_params() {
        return Err(Error::Shape("objective gradient has the wrong length".into()));
    }
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for i in 0..m.n_params() {
        let orig = m.params[i];
        probe.params_mut()[i] = orig + eps;
        let (up, _) = objective.eval(&probe)?;
        probe.params_mut()[i] = orig - eps;
        let (down, _) = objective.eval(&probe)?;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Gradient check for a loss defined on the two head outputs of one batch.
/// `loss_fn` returns the loss and its gradients with respect to the
/// regression outputs and ranking scores.
pub fn gradient_check<L>(m: &TwoHeadModel, x: ArrayView2<'_, f64>, loss_fn: L, eps: f64) -> Result<f64>
where
    L: Fn(&[f64], &[f64]) -> (f64, Vec<f64>, Vec<f64>),
{
    let objective = |model: &TwoHeadModel| -> Result<(f64, Vec<f64>)> {
        let fwd = model.forward(x)?;
        let (loss, g_reg, g_arc) = loss_fn(&fwd.reg_out, &fwd.arc_score);
        Ok((loss, model.backward(&fwd.cache, &g_reg, &g_arc)?))
    };
    check_gradient(m, eps, &objective)
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model: layout descriptor plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(m: &TwoHeadModel) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layout: m.layout.clone(),
            params: m.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<TwoHeadModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported checkpoint version {}", self.format_version),
            ));
        }
        TwoHeadModel::from_params(self.layout, self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
