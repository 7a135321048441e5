//! Feature-efficiency criterion: the sampling variance V(mu, rho) of a
//! signed target measure mu under a feature population rho, the optimal
//! population |mu| / C, the two-boxcar example, and the m-node sampling
//! error bound.

use crate::rng::{substream, Domain};
use crate::{Error, Result};
use rand::Rng;

/// Cells with population below this are treated as unpopulated; the ratio
/// mu / rho is defined as 0 there.
pub const POP_FLOOR: f64 = 1e-14;

/// Signed measure on a uniform 1-D grid (cell-center values).
#[derive(Debug, Clone)]
pub struct SignedMeasureGrid {
    pub theta_min: f64,
    pub h: f64,
    pub mu: Vec<f64>,
}

impl SignedMeasureGrid {
    pub fn new(theta_min: f64, h: f64, mu: Vec<f64>) -> Result<Self> {
        if !(h > 0.0) || mu.is_empty() {
            return Err(Error::InvalidArgument("need positive cell width and cells".into()));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite measure value".into()));
        }
        let g = SignedMeasureGrid { theta_min, h, mu };
        if g.total_abs() <= 0.0 {
            return Err(Error::ZeroMeasure);
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn theta_center(&self, i: usize) -> f64 {
        self.theta_min + (i as f64 + 0.5) * self.h
    }

    /// Integral of |mu|.
    pub fn total_abs(&self) -> f64 {
        self.mu.iter().map(|v| v.abs()).sum::<f64>() * self.h
    }

    /// Integral of mu.
    pub fn total(&self) -> f64 {
        self.mu.iter().sum::<f64>() * self.h
    }

    /// The same measure scaled by a constant factor.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        SignedMeasureGrid::new(
            self.theta_min,
            self.h,
            self.mu.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Probability density on the same grid layout as [`SignedMeasureGrid`].
#[derive(Debug, Clone)]
pub struct FeaturePopulation {
    pub theta_min: f64,
    pub h: f64,
    pub rho: Vec<f64>,
    /// Normalization constant when built as |mu| / C.
    pub c: Option<f64>,
}

impl FeaturePopulation {
    pub fn new(theta_min: f64, h: f64, rho: Vec<f64>) -> Result<Self> {
        if !(h > 0.0) || rho.is_empty() {
            return Err(Error::InvalidArgument("need positive cell width and cells".into()));
        }
        if rho.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("population must be nonnegative".into()));
        }
        let mass: f64 = rho.iter().sum::<f64>() * h;
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("population mass {mass} is not 1")));
        }
        Ok(FeaturePopulation { theta_min, h, rho, c: None })
    }

    /// Evaluate a density shape at cell centers on the layout of `like` and
    /// normalize.
    pub fn from_fn(like: &SignedMeasureGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let vals: Vec<f64> = (0..like.n()).map(|i| f(like.theta_center(i))).collect();
        if vals.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("population must be nonnegative".into()));
        }
        let mass: f64 = vals.iter().sum::<f64>() * like.h;
        if mass <= 0.0 {
            return Err(Error::ZeroMeasure);
        }
        FeaturePopulation::new(like.theta_min, like.h, vals.iter().map(|v| v / mass).collect())
    }

    pub fn theta_center(&self, i: usize) -> f64 {
        self.theta_min + (i as f64 + 0.5) * self.h
    }
}

fn check_layout(mu: &SignedMeasureGrid, rho: &FeaturePopulation) -> Result<()> {
    if mu.mu.len() != rho.rho.len()
        || (mu.theta_min - rho.theta_min).abs() > 1e-12
        || (mu.h - rho.h).abs() > 1e-12
    {
        return Err(Error::GridMismatch("measure and population layouts differ".into()));
    }
    Ok(())
}

/// V(mu, rho) = integral of (mu/rho)^2 rho over the populated cells.
///
/// Cauchy-Schwarz gives V >= (integral |mu|)^2 with equality exactly when
/// rho is proportional to |mu| on its support.
pub fn variance_criterion(mu: &SignedMeasureGrid, rho: &FeaturePopulation) -> Result<f64> {
    check_layout(mu, rho)?;
    let mut v = 0.0;
    for (m, r) in mu.mu.iter().zip(&rho.rho) {
        if *r > POP_FLOOR {
            v += m * m / r;
        }
    }
    Ok(v * mu.h)
}

/// V(mu, rho) for a population given in closed form on the whole line.
/// Only the density values on the support of mu enter, so rho need not be
/// representable (or carry all its mass) on the grid.
pub fn variance_vs_density(
    mu: &SignedMeasureGrid,
    density: impl Fn(f64) -> f64,
) -> Result<f64> {
    let mut v = 0.0;
    for (i, m) in mu.mu.iter().enumerate() {
        if *m == 0.0 {
            continue;
        }
        let r = density(mu.theta_center(i));
        if !(r > POP_FLOOR) {
            return Err(Error::Degenerate("population vanishes on the measure support".into()));
        }
        v += m * m / r;
    }
    Ok(v * mu.h)
}

/// The variance-minimizing population |mu| / C with C = integral |mu|.
pub fn optimal_population(mu: &SignedMeasureGrid) -> Result<FeaturePopulation> {
    let c = mu.total_abs();
    if c <= 0.0 {
        return Err(Error::ZeroMeasure);
    }
    let rho: Vec<f64> = mu.mu.iter().map(|v| v.abs() / c).collect();
    let mut pop = FeaturePopulation::new(mu.theta_min, mu.h, rho)?;
    pop.c = Some(c);
    Ok(pop)
}

/// Two boxcars of half-width `a` centered at +1 and -1, normalized to unit
/// total mass (height 1 / 4a). The grid resolves each boxcar with 40 cells
/// and must align exactly with the boxcar edges.
pub fn boxcar_measure(a: f64) -> Result<SignedMeasureGrid> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::InvalidArgument("boxcar half-width must be in (0, 1)".into()));
    }
    let h = a / 20.0;
    let limit = 2.0;
    let n = (2.0 * limit / h).round() as usize;
    // every edge of {-1-a, -1+a, 1-a, 1+a} must land on a cell boundary
    for edge in [-1.0 - a, -1.0 + a, 1.0 - a, 1.0 + a] {
        let steps = (edge + limit) / h;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "grid with cell width {h} cannot resolve the boxcar edge at {edge}"
            )));
        }
    }
    let height = 1.0 / (4.0 * a);
    let mu: Vec<f64> = (0..n)
        .map(|i| {
            let th = -limit + (i as f64 + 0.5) * h;
            if (th - 1.0).abs() < a || (th + 1.0).abs() < a {
                height
            } else {
                0.0
            }
        })
        .collect();
    SignedMeasureGrid::new(-limit, h, mu)
}

/// Mean-squared sampling error bound V * Bv^2 / m for an m-node network.
pub fn sampling_error_bound(v: f64, bv: f64, m: usize) -> Result<f64> {
    if !(v > 0.0 && bv > 0.0) || m == 0 {
        return Err(Error::InvalidArgument("bound needs positive V, Bv, m".into()));
    }
    Ok(v * bv * bv / m as f64)
}

/// Draw `m` feature locations from the population (cell centers weighted by
/// cell mass), reproducible by seed.
pub fn sample_population(rho: &FeaturePopulation, m: usize, seed: u64) -> Vec<f64> {
    let weights: Vec<f64> = rho.rho.iter().map(|v| v * rho.h).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut rng = substream(seed, Domain::Sample, j as u64, 0);
        let mut target = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        out.push(rho.theta_center(pick));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn optimal_population_attains_the_lower_bound() {
        let mu = boxcar_measure(0.1).unwrap();
        assert_relative_eq!(mu.total_abs(), 1.0, epsilon = 1e-9);
        let rho = optimal_population(&mu).unwrap();
        let v = variance_criterion(&mu, &rho).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-6);
        // general lower bound (integral |mu|)^2 for a non-unit-mass measure
        let mu2 = mu.scaled(3.0).unwrap();
        let rho2 = optimal_population(&mu2).unwrap();
        assert_relative_eq!(variance_criterion(&mu2, &rho2).unwrap(), 9.0, epsilon = 1e-5);
    }

    #[test]
    fn uniform_measure_gives_uniform_optimal_population() {
        let mu = SignedMeasureGrid::new(0.0, 0.01, vec![2.5; 100]).unwrap();
        let rho = optimal_population(&mu).unwrap();
        for &r in &rho.rho {
            assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        }
        // sign flip leaves the optimal population unchanged
        let neg = mu.scaled(-1.0).unwrap();
        let rho_neg = optimal_population(&neg).unwrap();
        assert_eq!(rho.rho, rho_neg.rho);
    }

    #[test]
    fn suboptimal_population_increases_the_criterion() {
        let mu = boxcar_measure(0.1).unwrap();
        let lower = mu.total_abs().powi(2);
        let gauss = FeaturePopulation::from_fn(&mu, |th| (-0.5 * th * th).exp()).unwrap();
        let v = variance_criterion(&mu, &gauss).unwrap();
        assert!(v > lower + 1.0, "V = {v}");
    }

    #[test]
    fn moving_population_mass_off_the_support_hurts() {
        let mu = boxcar_measure(0.1).unwrap();
        let opt = optimal_population(&mu).unwrap();
        let v_opt = variance_criterion(&mu, &opt).unwrap();
        // blend in a uniform component: mass leaks outside supp mu
        let n = opt.rho.len();
        let uniform = 1.0 / (n as f64 * opt.h);
        let blended: Vec<f64> = opt.rho.iter().map(|r| 0.7 * r + 0.3 * uniform).collect();
        let pop = FeaturePopulation::new(opt.theta_min, opt.h, blended).unwrap();
        assert!(variance_criterion(&mu, &pop).unwrap() > v_opt);
    }

    #[test]
    fn boxcar_shape_and_symmetry() {
        for a in [0.05, 0.1, 0.2] {
            let mu = boxcar_measure(a).unwrap();
            assert_relative_eq!(mu.total(), 1.0, epsilon = 1e-9);
            let support = mu.mu.iter().filter(|&&v| v > 0.0).count() as f64 * mu.h;
            assert_relative_eq!(support, 4.0 * a, epsilon = 1e-9);
            let n = mu.n();
            for i in 0..n {
                assert_eq!(mu.mu[i].to_bits(), mu.mu[n - 1 - i].to_bits());
            }
        }
        assert!(boxcar_measure(0.0).is_err());
        assert!(boxcar_measure(1.0).is_err());
        // edges off the lattice are refused rather than smeared
        assert!(boxcar_measure(0.13).is_err());
    }

    #[test]
    fn gaussian_scan_respects_the_closed_form_bound() {
        // the bound is stated for the unnormalized two-boxcar measure of
        // total mass 2 (height 1 / 2a)
        let a = 0.1;
        let mu = boxcar_measure(a).unwrap().scaled(2.0).unwrap();
        let bound = (2.0 * std::f64::consts::PI).sqrt() * 0.5f64.exp() / a;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let norm = sigma * (2.0 * std::f64::consts::PI).sqrt();
            let v = variance_vs_density(&mu, |th| {
                (-0.5 * th * th / (sigma * sigma)).exp() / norm
            })
            .unwrap();
            assert!(v >= bound, "sigma = {sigma}: V = {v} < {bound}");
        }
        // the derivation's inner function sigma * exp(2 / sigma^2) is
        // minimized at sigma = 2
        let g = |s: f64| s * (2.0 / (s * s)).exp();
        let mut best = (0.0, f64::INFINITY);
        let mut s = 0.5;
        while s <= 4.0 {
            if g(s) < best.1 {
                best = (s, g(s));
            }
            s += 0.01;
        }
        assert_relative_eq!(best.0, 2.0, epsilon = 0.011);
        assert_relative_eq!(best.1, 2.0 * 0.5f64.exp(), max_relative = 1e-4);
    }

    #[test]
    fn bound_formula_and_scaling() {
        assert_relative_eq!(sampling_error_bound(1.0, 1.0, 10).unwrap(), 0.1);
        let b1 = sampling_error_bound(3.0, 2.0, 50).unwrap();
        let b2 = sampling_error_bound(3.0, 2.0, 100).unwrap();
        assert_relative_eq!(b1, 2.0 * b2, epsilon = 1e-15);
        assert!(sampling_error_bound(0.0, 1.0, 10).is_err());
    }

    #[test]
    fn population_sampling_matches_cell_weights() {
        let mu = SignedMeasureGrid::new(0.0, 0.5, vec![0.2, 0.0, 1.8]).unwrap();
        let rho = optimal_population(&mu).unwrap();
        let draws = sample_population(&rho, 20_000, 5);
        let repeat = sample_population(&rho, 20_000, 5);
        assert_eq!(draws, repeat);
        let hi = draws.iter().filter(|&&t| t > 1.0).count() as f64 / draws.len() as f64;
        assert_relative_eq!(hi, 0.9, epsilon = 0.01);
        assert!(draws.iter().all(|&t| (t - 0.25).abs() < 1e-12 || (t - 1.25).abs() < 1e-12));
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let mu = SignedMeasureGrid::new(0.0, 0.1, vec![1.0; 10]).unwrap();
        let rho = FeaturePopulation::new(0.0, 0.1, vec![1.0 / 1.2; 12]).unwrap();
        assert!(variance_criterion(&mu, &rho).is_err());
    }
}
