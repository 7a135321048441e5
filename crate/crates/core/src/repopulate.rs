//! Feature repopulation: fit a resampling model to the hidden layer of a
//! trained network, draw a smaller hidden layer from it, retrain the top
//! layer only, and compare against task-independent random features.

use crate::data::Dataset;
use crate::exec::{self, ExecMode};
use crate::model::{self, Ensemble, FeatureMap, Hyper};
use crate::rng::{substream, Domain};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Resampling weights proportional to |u_j|. All-zero top weights fall back
/// to uniform; the flag reports that degeneracy.
pub fn importance_weights(ens: &Ensemble) -> (Vec<f64>, bool) {
    let total: f64 = ens.us().iter().map(|u| u.abs()).sum();
    if total <= 0.0 {
        return (vec![1.0 / ens.m() as f64; ens.m()], true);
    }
    (ens.us().iter().map(|u| u.abs() / total).collect(), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Uniform bootstrap of the source rows.
    Empirical,
    /// Bootstrap weighted by |u_j|.
    Importance,
    /// Gaussian kernel smoothing around uniformly resampled rows.
    Kde,
}

/// A sampleable model of the hidden-weight population.
#[derive(Debug, Clone)]
pub struct DensityModel {
    pub method: Method,
    thetas: Vec<f64>,
    d: usize,
    weights: Vec<f64>,
    /// Per-dimension kernel scale (kde only).
    pub bandwidth: Option<Vec<f64>>,
    /// True when importance weights degenerated to uniform.
    pub degenerate_weights: bool,
}

impl DensityModel {
    pub fn source_rows(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Fit the resampling model. Deterministic: the randomness lives entirely in
/// [`sample_features`].
pub fn fit_density(ens: &Ensemble, method: Method) -> Result<DensityModel> {
    let m = ens.m();
    let d = ens.d();
    let (weights, degenerate) = match method {
        Method::Empirical | Method::Kde => (vec![1.0 / m as f64; m], false),
        Method::Importance => importance_weights(ens),
    };
    let bandwidth = match method {
        Method::Kde => {
            if m < 2 {
                return Err(Error::Degenerate("kernel smoothing needs at least 2 rows".into()));
            }
            let rate = (m as f64).powf(-1.0 / (d as f64 + 4.0));
            let mut bw = vec![0.0; d];
            for (k, b) in bw.iter_mut().enumerate() {
                let mean =
                    (0..m).map(|j| ens.theta(j)[k]).sum::<f64>() / m as f64;
                let var =
                    (0..m).map(|j| (ens.theta(j)[k] - mean).powi(2)).sum::<f64>() / m as f64;
                *b = var.sqrt() * rate;
            }
            Some(bw)
        }
        _ => None,
    };
    Ok(DensityModel {
        method,
        thetas: ens.thetas().to_vec(),
        d,
        weights,
        bandwidth,
        degenerate_weights: degenerate,
    })
}

/// Draw `m_new` hidden-weight rows from the model, reproducible by seed.
pub fn sample_features(model: &DensityModel, m_new: usize, seed: u64) -> Result<Vec<f64>> {
    if m_new == 0 {
        return Err(Error::InvalidArgument("need at least one sampled feature".into()));
    }
    let d = model.d;
    let mut out = vec![0.0; m_new * d];
    for j in 0..m_new {
        let mut rng = substream(seed, Domain::Sample, j as u64, 1);
        let mut target: f64 = rng.random();
        let mut pick = model.weights.len() - 1;
        for (i, w) in model.weights.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        let row = &model.thetas[pick * d..(pick + 1) * d];
        let slot = &mut out[j * d..(j + 1) * d];
        slot.copy_from_slice(row);
        if let Some(bw) = &model.bandwidth {
            for (v, b) in slot.iter_mut().zip(bw) {
                *v += b * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(out)
}

/// Precomputed feature matrix for a fixed hidden layer: values of
/// h'(theta_j, x_i), with normalization statistics taken from `norm_ds`.
pub struct FeatureBasis {
    pub values: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl FeatureBasis {
    /// Features of `eval_ds` rows; in normalized mode the per-node scale
    /// comes from `norm_ds` (train statistics applied to test data).
    pub fn build(
        thetas: &[f64],
        d: usize,
        map: &FeatureMap,
        norm_ds: &Dataset,
        eval_ds: &Dataset,
        mode: ExecMode,
    ) -> Result<Self> {
        if eval_ds.dim() != d || norm_ds.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: eval_ds.dim() });
        }
        let m = thetas.len() / d;
        let n = eval_ds.len();
        // fold the per-node normalizer into one multiplier
        let scales: Vec<f64> = exec::map_indexed(mode, m, |j| {
            model::feature_scale(map, &thetas[j * d..(j + 1) * d], norm_ds)
                .expect("dims checked")
        });
        let mut values = vec![0.0; m * n];
        exec::fill_indexed(mode, &mut values, |idx| {
            let (j, i) = (idx / n, idx % n);
            let theta = &thetas[j * d..(j + 1) * d];
            let z: f64 = theta.iter().zip(eval_ds.x(i)).map(|(a, b)| a * b).sum();
            map.activation.value(z) * scales[j]
        });
        Ok(FeatureBasis { values, m, n })
    }

    pub fn margin(&self, us: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.m {
            acc += us[j] * self.values[j * self.n + i];
        }
        acc / self.m as f64
    }
}

/// Result of convex top-layer training.
#[derive(Debug, Clone)]
pub struct TopLayerFit {
    pub us: Vec<f64>,
    /// Empirical loss (no regularizer) after each step, step 0 first.
    pub loss_curve: Vec<f64>,
    pub final_grad_norm: f64,
}

/// Gradient descent on the top weights only, from u = 0, hidden layer
/// fixed. The objective is convex, so under the step-size guard it is
/// non-increasing; a violation is reported as divergence.
pub fn train_top_layer(
    thetas: &[f64],
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    steps: usize,
    mode: ExecMode,
) -> Result<TopLayerFit> {
    let d = ds.dim();
    if thetas.is_empty() || thetas.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: thetas.len() });
    }
    crate::dynamics::step_size_guard(hp)?;
    let basis = FeatureBasis::build(thetas, d, map, ds, ds, mode)?;
    let m = basis.m;
    let n = ds.len();
    let mut us = vec![0.0; m];
    let mut loss_curve = Vec::with_capacity(steps + 1);
    let mut grad = vec![0.0; m];
    let mut prev_obj = f64::INFINITY;
    for step in 0..=steps {
        // margins, loss, gradient at the current u
        let mut loss = 0.0;
        let mut phi = vec![0.0; n];
        for i in 0..n {
            let (v, g) = model::phi_loss(basis.margin(&us, i), ds.y(i))?;
            loss += v;
            phi[i] = g;
        }
        loss /= n as f64;
        loss_curve.push(loss);
        let obj = loss + 0.5 * hp.lambda1 * us.iter().map(|u| u * u).sum::<f64>() / m as f64;
        if obj > prev_obj + 1e-10 {
            return Err(Error::Diverged { step, what: "top-layer objective".into() });
        }
        prev_obj = obj;
        if step == steps {
            break;
        }
        exec::fill_indexed(mode, &mut grad, |j| {
            let mut g = 0.0;
            for i in 0..n {
                g -= phi[i] * basis.values[j * n + i];
            }
            g / n as f64 - hp.lambda1 * us[j]
        });
        for (u, g) in us.iter_mut().zip(&grad) {
            *u += hp.dt * g;
        }
    }
    let final_grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(TopLayerFit { us, loss_curve, final_grad_norm })
}

/// Fraction of misclassified points of the fixed-feature predictor on
/// `eval_ds`, with normalization statistics from `norm_ds`.
pub fn test_error(
    thetas: &[f64],
    us: &[f64],
    map: &FeatureMap,
    norm_ds: &Dataset,
    eval_ds: &Dataset,
    mode: ExecMode,
) -> Result<f64> {
    let basis = FeatureBasis::build(thetas, eval_ds.dim(), map, norm_ds, eval_ds, mode)?;
    let mut wrong = 0usize;
    for i in 0..eval_ds.len() {
        let margin = basis.margin(us, i);
        let pred = if margin >= 0.0 { 1.0 } else { -1.0 };
        if pred != eval_ds.y(i) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / eval_ds.len() as f64)
}

/// How one comparison arm obtains its hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Task-independent standard-Gaussian features.
    RandomGaussian,
    /// Features sampled from a density model of the trained layer.
    Model(Method),
}

/// Per-seed outcomes of one arm.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub train_loss_curves: Vec<Vec<f64>>,
    pub test_errors: Vec<f64>,
}

impl ArmResult {
    pub fn mean_test_error(&self) -> f64 {
        self.test_errors.iter().sum::<f64>() / self.test_errors.len() as f64
    }

    pub fn std_test_error(&self) -> f64 {
        let mean = self.mean_test_error();
        (self.test_errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / self.test_errors.len() as f64)
            .sqrt()
    }

    pub fn mean_loss_curve(&self) -> Vec<f64> {
        let steps = self.train_loss_curves[0].len();
        (0..steps)
            .map(|t| {
                self.train_loss_curves.iter().map(|c| c[t]).sum::<f64>()
                    / self.train_loss_curves.len() as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub m_new: usize,
    pub seeds: Vec<u64>,
    pub arm_a: ArmResult,
    pub arm_b: ArmResult,
}

fn run_arm(
    arm: Arm,
    trained: &Ensemble,
    map: &FeatureMap,
    train_ds: &Dataset,
    test_ds: &Dataset,
    hp: &Hyper,
    m_new: usize,
    seeds: &[u64],
    steps: usize,
    mode: ExecMode,
) -> Result<ArmResult> {
    let d = trained.d();
    let model = match arm {
        Arm::RandomGaussian => None,
        Arm::Model(method) => Some(fit_density(trained, method)?),
    };
    let mut curves = Vec::with_capacity(seeds.len());
    let mut errors = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let thetas = match &model {
            Some(m) => sample_features(m, m_new, seed)?,
            None => {
                let mut out = vec![0.0; m_new * d];
                for (j, chunk) in out.chunks_exact_mut(d).enumerate() {
                    let mut rng = substream(seed, Domain::Arm, j as u64, 0);
                    for v in chunk {
                        *v = rng.sample::<f64, _>(StandardNormal);
                    }
                }
                out
            }
        };
        let fit = train_top_layer(&thetas, map, train_ds, hp, steps, mode)?;
        errors.push(test_error(&thetas, &fit.us, map, train_ds, test_ds, mode)?);
        curves.push(fit.loss_curve);
    }
    Ok(ArmResult { arm, train_loss_curves: curves, test_errors: errors })
}

/// Run two arms over identical seed sets and training budgets, so any gap is
/// attributable to the feature distributions alone.
#[allow(clippy::too_many_arguments)]
pub fn run_comparison(
    trained: &Ensemble,
    map: &FeatureMap,
    train_ds: &Dataset,
    test_ds: &Dataset,
    hp: &Hyper,
    m_new: usize,
    seeds: &[u64],
    arm_a: Arm,
    arm_b: Arm,
    steps: usize,
) -> Result<ComparisonReport> {
    if train_ds.dim() != test_ds.dim() || train_ds.dim() != trained.d() {
        return Err(Error::DimensionMismatch { expected: trained.d(), got: test_ds.dim() });
    }
    if seeds.len() < 5 {
        return Err(Error::Config("need at least 5 comparison seeds".into()));
    }
    let mode = ExecMode::default();
    let a = run_arm(arm_a, trained, map, train_ds, test_ds, hp, m_new, seeds, steps, mode)?;
    let b = run_arm(arm_b, trained, map, train_ds, test_ds, hp, m_new, seeds, steps, mode)?;
    Ok(ComparisonReport { m_new, seeds: seeds.to_vec(), arm_a: a, arm_b: b })
}

/// Data-dependent efficiency surrogate: rescale every hidden-node output to
/// unit empirical variance (folding the scale into its top weight) and sum
/// the squared adjusted weights. Nodes with zero output variance are
/// excluded; their count is returned alongside.
pub fn empirical_efficiency(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
) -> Result<(f64, usize)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = ExecMode::default();
    let basis = FeatureBasis::build(ens.thetas(), ens.d(), map, ds, ds, mode)?;
    let n = ds.len() as f64;
    let mut total = 0.0;
    let mut excluded = 0usize;
    for j in 0..ens.m() {
        let row = &basis.values[j * basis.n..(j + 1) * basis.n];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-24 {
            excluded += 1;
            continue;
        }
        total += ens.u(j) * ens.u(j) * var;
    }
    Ok((total, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use approx::assert_relative_eq;

    fn toy() -> (Dataset, FeatureMap) {
        let ds = Dataset::new(vec![1.0, -0.5, 0.25, 2.0, -1.5], vec![1.0, -1.0, 1.0, 1.0, -1.0], 1)
            .unwrap();
        (ds, FeatureMap::raw(Activation::Tanh))
    }

    #[test]
    fn importance_weight_examples() {
        let ens = Ensemble::new(vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], 1).unwrap();
        let (w, flag) = importance_weights(&ens);
        assert_eq!(w, vec![1.0 / 3.0; 3]);
        assert!(!flag);

        let ens = Ensemble::new(vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 2.0], 1).unwrap();
        let (w, flag) = importance_weights(&ens);
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
        assert!(!flag);

        let ens = Ensemble::new(vec![0.0, 0.0], vec![0.0, 0.0], 1).unwrap();
        let (w, flag) = importance_weights(&ens);
        assert_eq!(w, vec![0.5, 0.5]);
        assert!(flag);
    }

    #[test]
    fn empirical_sampling_stays_on_source_rows() {
        let ens =
            Ensemble::new(vec![0.1, 0.2, 0.3, 0.4, 0.5], vec![1.0, -1.0, 0.5, 2.0, 0.0], 1).unwrap();
        let model = fit_density(&ens, Method::Empirical).unwrap();
        let draws = sample_features(&model, 200, 7).unwrap();
        for v in draws {
            assert!(ens.thetas().iter().any(|t| (t - v).abs() < 1e-15));
        }
        assert!(sample_features(&model, 0, 7).is_err());
        let again = sample_features(&model, 50, 9).unwrap();
        assert_eq!(again, sample_features(&model, 50, 9).unwrap());
    }

    #[test]
    fn importance_sampling_with_one_live_weight_is_a_point_mass() {
        let ens = Ensemble::new(vec![0.1, 0.2, 0.9], vec![0.0, 0.0, 3.0], 1).unwrap();
        let model = fit_density(&ens, Method::Importance).unwrap();
        let draws = sample_features(&model, 40, 11).unwrap();
        assert!(draws.iter().all(|&v| v == 0.9));
    }

    #[test]
    fn empirical_frequencies_follow_the_weights() {
        let ens = Ensemble::new(vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 0.0], 1).unwrap();
        let model = fit_density(&ens, Method::Importance).unwrap();
        let n = 40_000;
        let draws = sample_features(&model, n, 13).unwrap();
        for (value, weight) in [(0.0, 0.25), (1.0, 0.75), (2.0, 0.0)] {
            let freq =
                draws.iter().filter(|&&v| (v - value).abs() < 1e-15).count() as f64 / n as f64;
            let se = (weight * (1.0 - weight) / n as f64).sqrt();
            assert!((freq - weight).abs() <= 3.0 * se + 1e-12, "{value}: {freq} vs {weight}");
        }
    }

    #[test]
    fn kde_samples_match_the_source_distribution() {
        use rand_distr::StandardNormal;
        let mut rng = substream(17, Domain::Init, 0, 0);
        let m = 4000;
        let thetas: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ens = Ensemble::new(thetas, vec![1.0; m], 1).unwrap();
        let model = fit_density(&ens, Method::Kde).unwrap();
        assert!(model.bandwidth.as_ref().unwrap()[0] > 0.0);
        let mut draws = sample_features(&model, m, 19).unwrap();
        // two-sample Kolmogorov-Smirnov against fresh Gaussian draws, 1% level
        let mut fresh: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        fresh.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut dstat = 0.0f64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < m && j < m {
            if draws[i] <= fresh[j] {
                i += 1;
            } else {
                j += 1;
            }
            dstat = dstat.max((i as f64 / m as f64 - j as f64 / m as f64).abs());
        }
        let critical = 1.63 * (2.0 / m as f64).sqrt();
        assert!(dstat < critical, "KS statistic {dstat} exceeds {critical}");
        // kde needs at least two rows
        let tiny = Ensemble::new(vec![0.0], vec![1.0], 1).unwrap();
        assert!(fit_density(&tiny, Method::Kde).is_err());
    }

    #[test]
    fn top_layer_training_drives_a_separable_toy_to_zero_loss() {
        // one feature that perfectly predicts the label sign
        let (ds, map) = toy();
        let hp = Hyper::new(0.0, 0.0, 0.0, 0.5).unwrap();
        let fit = train_top_layer(&[5.0], &map, &ds, &hp, 4000, ExecMode::Sequential).unwrap();
        let last = *fit.loss_curve.last().unwrap();
        assert!(last < 0.05, "loss {last}");
        for pair in fit.loss_curve.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn huge_regularizer_pins_top_weights_at_zero() {
        let (ds, map) = toy();
        let hp = Hyper::new(400.0, 0.0, 0.0, 0.001).unwrap();
        let fit = train_top_layer(&[1.0, -2.0], &map, &ds, &hp, 2000, ExecMode::Sequential).unwrap();
        for u in fit.us {
            assert!(u.abs() < 1e-2, "u = {u}");
        }
    }

    #[test]
    fn full_resampling_reproduces_source_performance() {
        let (ds, map) = toy();
        let hp = Hyper::new(0.01, 0.0, 0.0, 0.2).unwrap();
        let trained = Ensemble::new(vec![2.0, -1.0, 0.5], vec![1.0, 0.2, -0.3], 1).unwrap();
        let seeds: Vec<u64> = (0..6).collect();
        let report = run_comparison(
            &trained,
            &map,
            &ds,
            &ds,
            &hp,
            trained.m(),
            &seeds,
            Arm::Model(Method::Empirical),
            Arm::Model(Method::Empirical),
            300,
        )
        .unwrap();
        // identical arms and seeds give identical results
        assert_eq!(report.arm_a.test_errors, report.arm_b.test_errors);
        // error in the ballpark of retraining the source features directly
        let source_fit =
            train_top_layer(trained.thetas(), &map, &ds, &hp, 300, ExecMode::Sequential).unwrap();
        let source_err =
            test_error(trained.thetas(), &source_fit.us, &map, &ds, &ds, ExecMode::Sequential)
                .unwrap();
        assert!((report.arm_a.mean_test_error() - source_err).abs() <= 0.4);
        // fewer than 5 seeds is refused
        assert!(run_comparison(
            &trained,
            &map,
            &ds,
            &ds,
            &hp,
            3,
            &seeds[..2],
            Arm::RandomGaussian,
            Arm::Model(Method::Empirical),
            10,
        )
        .is_err());
    }

    #[test]
    fn efficiency_surrogate_reference_values() {
        // raw tanh output of theta = 5 on labels +-1 inputs is +-tanh(5):
        // variance is tanh(5)^2, so u = 1/tanh(5) gives exactly 1
        let ds = Dataset::new(vec![1.0, -1.0], vec![1.0, -1.0], 1).unwrap();
        let map = FeatureMap::raw(Activation::Tanh);
        let t = 5.0f64.tanh();
        let ens = Ensemble::new(vec![5.0], vec![1.0 / t], 1).unwrap();
        let (v, excluded) = empirical_efficiency(&ens, &map, &ds).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-12);
        assert_eq!(excluded, 0);

        // duplicating every node with halved weights halves the value
        let ens2 = Ensemble::new(vec![5.0, 5.0], vec![0.5 / t, 0.5 / t], 1).unwrap();
        let (v2, _) = empirical_efficiency(&ens2, &map, &ds).unwrap();
        assert_relative_eq!(v2, 0.5, max_relative = 1e-12);

        // constant-output node is excluded with a count
        let ens3 = Ensemble::new(vec![5.0, 0.0], vec![1.0 / t, 7.0], 1).unwrap();
        let (v3, excluded3) = empirical_efficiency(&ens3, &map, &ds).unwrap();
        assert_relative_eq!(v3, 1.0, max_relative = 1e-12);
        assert_eq!(excluded3, 1);
    }
}
