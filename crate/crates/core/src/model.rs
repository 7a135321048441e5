//! The two-level network: activations, the (optionally normalized) feature
//! map, forward pass, regularized objective, and the analytic drift fields
//! used by both the particle trainer and the density solver.
//!
//! Convention used throughout this crate: the objective is
//!
//! ```text
//! Q(u, theta) = mean_i loss(f(x_i), y_i)
//!             + (l1/2) mean_j u_j^2 + (l2/2) mean_j |theta_j|^2
//! ```
//!
//! and the per-particle drifts are g1 = -m dQ/du_j, g2 = -m dQ/dtheta_j,
//! i.e. g1 = -E[loss' h'] - l1 u and g2 = -E[loss' u grad h'] - l2 theta.
//! The half coefficients make the noisy-descent stationary density come out
//! as exp(-(l1/2l3)u^2 - (l2/2l3)|theta|^2 - g(theta)u/l3) with conditional
//! variance l3/l1, which is the form the theory checks target.

use crate::data::Dataset;
use crate::exec::{self, ExecMode};
use crate::{Error, Result};

/// Hidden-unit activation. All three are smooth; the gated relu uses a
/// logistic gate of width 0.1 so it stays twice differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    SmoothedRelu,
}

const GATE_WIDTH: f64 = 0.1;

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => logistic(z),
            Activation::SmoothedRelu => z * logistic(z / GATE_WIDTH),
        }
    }

    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = logistic(z);
                s * (1.0 - s)
            }
            Activation::SmoothedRelu => {
                let s = logistic(z / GATE_WIDTH);
                s + z * s * (1.0 - s) / GATE_WIDTH
            }
        }
    }
}

/// Whether hidden features are used raw or scaled to unit empirical second
/// moment over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    Normalized,
}

/// Feature map h'(theta, x). In normalized mode the scale is recomputed from
/// the whole dataset on every evaluation; `floor` guards the division.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub activation: Activation,
    pub normalization: Normalization,
    pub floor: f64,
}

impl FeatureMap {
    pub fn raw(activation: Activation) -> Self {
        FeatureMap { activation, normalization: Normalization::Raw, floor: 1e-12 }
    }

    pub fn normalized(activation: Activation) -> Self {
        FeatureMap { activation, normalization: Normalization::Normalized, floor: 1e-12 }
    }
}

/// Regularization / noise / step-size parameters plus optional envelope
/// constants for the diagnostic bound checks.
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub dt: f64,
    /// Feature second-moment bound (1 in normalized mode).
    pub bv: Option<f64>,
    /// Loss-derivative bound and Lipschitz constant.
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    /// Feature-map envelope constants.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
}

impl Hyper {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, dt: f64) -> Result<Self> {
        let hp = Hyper {
            lambda1,
            lambda2,
            lambda3,
            dt,
            bv: None,
            l1: None,
            l2: None,
            c1: None,
            c2: None,
            c3: None,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config("dt must be finite and positive".into()));
        }
        Ok(())
    }
}

/// m particles: hidden weights `thetas` (row-major m x d) and top weights
/// `us`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    thetas: Vec<f64>,
    us: Vec<f64>,
    d: usize,
}

impl Ensemble {
    pub fn new(thetas: Vec<f64>, us: Vec<f64>, d: usize) -> Result<Self> {
        if us.is_empty() || d == 0 {
            return Err(Error::InvalidArgument("ensemble needs m >= 1 and d >= 1".into()));
        }
        if thetas.len() != us.len() * d {
            return Err(Error::DimensionMismatch { expected: us.len() * d, got: thetas.len() });
        }
        if thetas.iter().chain(us.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite particle entry".into()));
        }
        Ok(Ensemble { thetas, us, d })
    }

    pub fn zeros(m: usize, d: usize) -> Result<Self> {
        Ensemble::new(vec![0.0; m * d], vec![0.0; m], d)
    }

    pub fn m(&self) -> usize {
        self.us.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j * self.d..(j + 1) * self.d]
    }

    pub fn u(&self, j: usize) -> f64 {
        self.us[j]
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn us(&self) -> &[f64] {
        &self.us
    }

    pub fn thetas_mut(&mut self) -> &mut [f64] {
        &mut self.thetas
    }

    pub fn us_mut(&mut self) -> &mut [f64] {
        &mut self.us
    }

    pub fn is_finite(&self) -> bool {
        self.thetas.iter().chain(self.us.iter()).all(|v| v.is_finite())
    }
}

/// Logistic loss ln(1 + exp(-y y')) and its derivative in y'.
///
/// The derivative is bounded by 1 in magnitude and 1/4-Lipschitz.
pub fn phi_loss(margin_input: f64, label: f64) -> Result<(f64, f64)> {
    if !margin_input.is_finite() {
        return Err(Error::InvalidArgument("non-finite margin input".into()));
    }
    if label != 1.0 && label != -1.0 {
        return Err(Error::InvalidArgument("label must be +1 or -1".into()));
    }
    let a = -label * margin_input;
    // softplus(a), stable for large |a|
    let value = a.max(0.0) + (-a.abs()).exp().ln_1p();
    let derivative = -label * logistic(a);
    Ok((value, derivative))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalizer state for one theta: the clamped scale and whether the floor
/// was hit (in which case the scale has zero gradient).
#[derive(Debug, Clone, Copy, Default)]
struct Normalizer {
    scale: f64,
    clamped: bool,
}

fn normalizer(map: &FeatureMap, theta: &[f64], ds: &Dataset) -> Result<Normalizer> {
    match map.normalization {
        Normalization::Raw => Ok(Normalizer { scale: 1.0, clamped: false }),
        Normalization::Normalized => {
            if ds.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let n = ds.len() as f64;
            let m2 = (0..ds.len())
                .map(|i| {
                    let h = map.activation.value(dot(theta, ds.x(i)));
                    h * h
                })
                .sum::<f64>()
                / n;
            let root = m2.sqrt();
            if root > map.floor {
                Ok(Normalizer { scale: root, clamped: false })
            } else {
                Ok(Normalizer { scale: map.floor, clamped: true })
            }
        }
    }
}

/// Multiplier applied to the raw activation: 1 in raw mode, the reciprocal
/// of the dataset-wide root second moment (floored) in normalized mode.
pub fn feature_scale(map: &FeatureMap, theta: &[f64], ds: &Dataset) -> Result<f64> {
    Ok(1.0 / normalizer(map, theta, ds)?.scale)
}

/// h'(theta, x): the activation of theta.x, divided by the dataset-wide
/// root second moment in normalized mode.
pub fn feature_value(map: &FeatureMap, theta: &[f64], x: &[f64], ds: &Dataset) -> Result<f64> {
    if theta.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: x.len() });
    }
    let norm = normalizer(map, theta, ds)?;
    Ok(map.activation.value(dot(theta, x)) / norm.scale)
}

/// f(x) = (1/m) sum_j u_j h'(theta_j, x).
pub fn forward(ens: &Ensemble, map: &FeatureMap, x: &[f64], ds: &Dataset) -> Result<f64> {
    if x.len() != ens.d() {
        return Err(Error::DimensionMismatch { expected: ens.d(), got: x.len() });
    }
    let mut acc = 0.0;
    for j in 0..ens.m() {
        acc += ens.u(j) * feature_value(map, ens.theta(j), x, ds)?;
    }
    Ok(acc / ens.m() as f64)
}

/// f(x_i) for every dataset row, with the per-theta normalizers computed
/// once. Parallel over samples; the over-particles sum is in index order.
pub fn predictions(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    if ds.dim() != ens.d() {
        return Err(Error::DimensionMismatch { expected: ens.d(), got: ds.dim() });
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scales = particle_scales(ens, map, ds, mode)?;
    let m = ens.m() as f64;
    Ok(exec::map_indexed(mode, ds.len(), |i| {
        let x = ds.x(i);
        let mut acc = 0.0;
        for j in 0..ens.m() {
            acc += ens.u(j) * map.activation.value(dot(ens.theta(j), x)) / scales[j].scale;
        }
        acc / m
    }))
}

fn particle_scales(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
    mode: ExecMode,
) -> Result<Vec<Normalizer>> {
    match map.normalization {
        Normalization::Raw => Ok(vec![Normalizer { scale: 1.0, clamped: false }; ens.m()]),
        Normalization::Normalized => {
            if ds.is_empty() {
                return Err(Error::EmptyDataset);
            }
            Ok(exec::map_indexed(mode, ens.m(), |j| {
                normalizer(map, ens.theta(j), ds).expect("dataset checked nonempty")
            }))
        }
    }
}

/// Per-sample loss derivatives at the given predictions.
pub fn loss_gradients(predictions: &[f64], ds: &Dataset) -> Result<Vec<f64>> {
    if predictions.len() != ds.len() {
        return Err(Error::DimensionMismatch { expected: ds.len(), got: predictions.len() });
    }
    predictions
        .iter()
        .zip(ds.ys())
        .map(|(&f, &y)| phi_loss(f, y).map(|(_, d)| d))
        .collect()
}

/// The regularized objective Q (see the module docs for the convention).
pub fn objective(ens: &Ensemble, map: &FeatureMap, ds: &Dataset, hp: &Hyper) -> Result<f64> {
    objective_with_mode(ens, map, ds, hp, ExecMode::default())
}

pub fn objective_with_mode(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: ExecMode,
) -> Result<f64> {
    hp.validate()?;
    let preds = predictions(ens, map, ds, mode)?;
    let mut loss = 0.0;
    for (i, &f) in preds.iter().enumerate() {
        loss += phi_loss(f, ds.y(i))?.0;
    }
    loss /= ds.len() as f64;
    let m = ens.m() as f64;
    let r1 = ens.us().iter().map(|u| u * u).sum::<f64>() / m;
    let r2 = ens.thetas().iter().map(|t| t * t).sum::<f64>() / m;
    Ok(loss + 0.5 * hp.lambda1 * r1 + 0.5 * hp.lambda2 * r2)
}

/// Drift of a single particle given the per-sample loss derivatives of the
/// current predictor. Returns (g1, g2). `g2` is written into `g2_out`.
///
/// In normalized mode the theta-gradient of h' carries the quotient-rule
/// term through the dataset-wide scale; a floor-clamped scale is treated as
/// a constant.
pub fn point_drift(
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    phi_primes: &[f64],
    theta: &[f64],
    u: f64,
    g2_out: &mut [f64],
) -> Result<f64> {
    if phi_primes.len() != ds.len() {
        return Err(Error::DimensionMismatch { expected: ds.len(), got: phi_primes.len() });
    }
    if theta.len() != ds.dim() || g2_out.len() != ds.dim() {
        return Err(Error::DimensionMismatch { expected: ds.dim(), got: theta.len() });
    }
    let d = ds.dim();
    let n = ds.len() as f64;
    let norm = normalizer(map, theta, ds)?;

    // grad of the scale: (1/scale) * mean_i h_i sigma'_i x_i, zero if clamped
    let mut grad_scale = vec![0.0; d];
    if !norm.clamped && map.normalization == Normalization::Normalized {
        for i in 0..ds.len() {
            let x = ds.x(i);
            let z = dot(theta, x);
            let w = map.activation.value(z) * map.activation.deriv(z) / n;
            for (g, &xv) in grad_scale.iter_mut().zip(x) {
                *g += w * xv;
            }
        }
        grad_scale.iter_mut().for_each(|g| *g /= norm.scale);
    }

    let mut g1 = 0.0;
    g2_out.fill(0.0);
    for i in 0..ds.len() {
        let x = ds.x(i);
        let z = dot(theta, x);
        let h = map.activation.value(z);
        let hp_feat = h / norm.scale;
        let phi = phi_primes[i];
        g1 -= phi * hp_feat / n;
        // grad h' = sigma'(z) x / scale - h grad_scale / scale^2
        let w = phi * u / n;
        let a = map.activation.deriv(z) / norm.scale;
        let b = h / (norm.scale * norm.scale);
        for k in 0..d {
            g2_out[k] -= w * (a * x[k] - b * grad_scale[k]);
        }
    }
    g1 -= hp.lambda1 * u;
    for (g, &t) in g2_out.iter_mut().zip(theta) {
        *g -= hp.lambda2 * t;
    }
    Ok(g1)
}

/// Drifts for every particle: g1 (length m) and g2 (row-major m x d).
/// Equals -m times the objective gradient; the 1/m in the objective cancels
/// against the per-particle scaling so step sizes are m-independent.
pub fn particle_drifts(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: ExecMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    hp.validate()?;
    let preds = predictions(ens, map, ds, mode)?;
    let phi_primes = loss_gradients(&preds, ds)?;
    let d = ens.d();
    let rows = exec::map_indexed(mode, ens.m(), |j| {
        let mut g2 = vec![0.0; d];
        let g1 = point_drift(map, ds, hp, &phi_primes, ens.theta(j), ens.u(j), &mut g2)
            .expect("dimensions pre-checked");
        (g1, g2)
    });
    let mut g1 = Vec::with_capacity(ens.m());
    let mut g2 = Vec::with_capacity(ens.m() * d);
    for (a, b) in rows {
        g1.push(a);
        g2.extend_from_slice(&b);
    }
    Ok((g1, g2))
}
