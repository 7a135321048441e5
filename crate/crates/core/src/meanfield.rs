//! Finite-volume solver for the joint-density evolution in the mean-field
//! limit, restricted to d = 1 so the state is a 2-D grid over (theta, u).
//!
//! Scheme: first-order upwind advection, central diffusion, explicit Euler,
//! no-flux boundaries. Face fluxes are evaluated with identical expressions
//! from both neighboring cells, so mass is conserved to rounding and the
//! parallel update is bit-identical to the sequential one.

use crate::data::Dataset;
use crate::exec::{self, ExecMode};
use crate::model::{self, FeatureMap, Hyper};
use crate::{Error, Result};

/// Cells with less marginal mass than this are treated as empty.
pub const RHO_FLOOR: f64 = 1e-14;

/// Discretized joint density p(theta, u), row-major over theta then u.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub theta_min: f64,
    pub theta_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub n_theta: usize,
    pub n_u: usize,
    pub p: Vec<f64>,
    pub t: f64,
}

impl DensityGrid {
    pub fn new(
        theta_range: (f64, f64),
        u_range: (f64, f64),
        n_theta: usize,
        n_u: usize,
        p: Vec<f64>,
        t: f64,
    ) -> Result<Self> {
        if theta_range.1 <= theta_range.0 || u_range.1 <= u_range.0 {
            return Err(Error::GridMismatch("degenerate range".into()));
        }
        if n_theta == 0 || n_u == 0 || p.len() != n_theta * n_u {
            return Err(Error::GridMismatch("cell count does not match values".into()));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::GridMismatch("negative or non-finite density".into()));
        }
        let grid = DensityGrid {
            theta_min: theta_range.0,
            theta_max: theta_range.1,
            u_min: u_range.0,
            u_max: u_range.1,
            n_theta,
            n_u,
            p,
            t,
        };
        if (grid.mass() - 1.0).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!("mass {} is not 1", grid.mass())));
        }
        Ok(grid)
    }

    /// Evaluate `f` at cell centers and normalize to unit mass.
    pub fn from_fn(
        theta_range: (f64, f64),
        u_range: (f64, f64),
        n_theta: usize,
        n_u: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut grid = DensityGrid {
            theta_min: theta_range.0,
            theta_max: theta_range.1,
            u_min: u_range.0,
            u_max: u_range.1,
            n_theta,
            n_u,
            p: vec![0.0; n_theta * n_u],
            t: 0.0,
        };
        for i in 0..n_theta {
            for j in 0..n_u {
                grid.p[i * n_u + j] = f(grid.theta_center(i), grid.u_center(j));
            }
        }
        if grid.p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::GridMismatch("negative or non-finite density".into()));
        }
        let mass = grid.mass();
        if mass <= 0.0 {
            return Err(Error::ZeroMeasure);
        }
        grid.p.iter_mut().for_each(|v| *v /= mass);
        DensityGrid::new(theta_range, u_range, n_theta, n_u, grid.p, 0.0)
    }

    pub fn h_theta(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.n_theta as f64
    }

    pub fn h_u(&self) -> f64 {
        (self.u_max - self.u_min) / self.n_u as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.h_theta() * self.h_u()
    }

    pub fn theta_center(&self, i: usize) -> f64 {
        self.theta_min + (i as f64 + 0.5) * self.h_theta()
    }

    pub fn u_center(&self, j: usize) -> f64 {
        self.u_min + (j as f64 + 0.5) * self.h_u()
    }

    pub fn mass(&self) -> f64 {
        self.p.iter().sum::<f64>() * self.cell_area()
    }

    /// E[theta^2 + u^2] under the grid.
    pub fn second_moment(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_theta {
            let th = self.theta_center(i);
            for j in 0..self.n_u {
                let u = self.u_center(j);
                acc += (th * th + u * u) * self.p[i * self.n_u + j];
            }
        }
        acc * self.cell_area()
    }

    /// Integral of p ln p (cell-sum quadrature; empty cells contribute 0).
    pub fn p_log_p(&self) -> f64 {
        self.p
            .iter()
            .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
            .sum::<f64>()
            * self.cell_area()
    }
}

/// Domain wide enough that the Gaussian envelope of the quadratic part of
/// the stationary law carries negligible mass outside: six standard
/// deviations per coordinate.
pub fn auto_domain(hp: &Hyper) -> Result<((f64, f64), (f64, f64))> {
    if hp.lambda1 <= 0.0 || hp.lambda2 <= 0.0 || hp.lambda3 <= 0.0 {
        return Err(Error::Config("auto domain needs positive lambda1, lambda2, lambda3".into()));
    }
    let theta_std = (hp.lambda3 / hp.lambda2).sqrt();
    let u_std = (hp.lambda3 / hp.lambda1).sqrt();
    Ok(((-6.0 * theta_std, 6.0 * theta_std), (-6.0 * u_std, 6.0 * u_std)))
}

/// Cell-centered drift components: `g_theta` and `g_u` per cell, same layout
/// as the grid values.
#[derive(Debug, Clone)]
pub struct DriftArrays {
    pub g_theta: Vec<f64>,
    pub g_u: Vec<f64>,
}

impl DriftArrays {
    pub fn max_norm(&self) -> f64 {
        self.g_theta
            .iter()
            .zip(&self.g_u)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Evaluate a pointwise drift (g_theta, g_u) at every cell center.
pub fn drift_from_fn(grid: &DensityGrid, f: impl Fn(f64, f64) -> (f64, f64)) -> DriftArrays {
    let mut g_theta = vec![0.0; grid.p.len()];
    let mut g_u = vec![0.0; grid.p.len()];
    for i in 0..grid.n_theta {
        for j in 0..grid.n_u {
            let (gt, gu) = f(grid.theta_center(i), grid.u_center(j));
            g_theta[i * grid.n_u + j] = gt;
            g_u[i * grid.n_u + j] = gu;
        }
    }
    DriftArrays { g_theta, g_u }
}

/// Predictions of the grid-integrated model: f(x) = sum over cells of
/// h'(theta, x) u p dA.
pub fn grid_predictions(
    grid: &DensityGrid,
    map: &FeatureMap,
    ds: &Dataset,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    if ds.dim() != 1 {
        return Err(Error::InvalidArgument("grid dynamics require d = 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // per-theta-row feature values, shared across u
    let feats: Vec<f64> = exec::map_indexed(mode, grid.n_theta * ds.len(), |idx| {
        let (i, s) = (idx / ds.len(), idx % ds.len());
        model::feature_value(map, &[grid.theta_center(i)], ds.x(s), ds)
            .expect("d = 1 checked above")
    });
    let area = grid.cell_area();
    Ok(exec::map_indexed(mode, ds.len(), |s| {
        let mut acc = 0.0;
        for i in 0..grid.n_theta {
            let feat = feats[i * ds.len() + s];
            let mut row = 0.0;
            for j in 0..grid.n_u {
                row += grid.u_center(j) * grid.p[i * grid.n_u + j];
            }
            acc += feat * row;
        }
        acc * area
    }))
}

/// Drift arrays of the coupled model dynamics at the grid's current state:
/// the loss derivatives come from the grid-integrated predictor.
pub fn model_drift(
    grid: &DensityGrid,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: ExecMode,
) -> Result<DriftArrays> {
    let preds = grid_predictions(grid, map, ds, mode)?;
    let phi_primes = model::loss_gradients(&preds, ds)?;
    let n_u = grid.n_u;
    let rows: Vec<(f64, Vec<f64>)> = exec::map_indexed(mode, grid.n_theta, |i| {
        let theta = [grid.theta_center(i)];
        let mut g_theta_row = vec![0.0; n_u];
        let mut g_u_row = vec![0.0; n_u];
        let mut g2 = [0.0];
        for j in 0..n_u {
            let g1 = model::point_drift(map, ds, hp, &phi_primes, &theta, grid.u_center(j), &mut g2)
                .expect("dimension checked");
            g_theta_row[j] = g2[0];
            g_u_row[j] = g1;
        }
        (0.0, {
            let mut both = g_theta_row;
            both.extend_from_slice(&g_u_row);
            both
        })
    });
    let mut g_theta = Vec::with_capacity(grid.p.len());
    let mut g_u = Vec::with_capacity(grid.p.len());
    for (_, both) in rows {
        g_theta.extend_from_slice(&both[..n_u]);
        g_u.extend_from_slice(&both[n_u..]);
    }
    Ok(DriftArrays { g_theta, g_u })
}

/// Largest stable step for the scheme given the drift magnitudes.
pub fn admissible_dtau(grid: &DensityGrid, drift: &DriftArrays, lambda3: f64) -> f64 {
    let h = grid.h_theta().min(grid.h_u());
    let mut dtau = f64::INFINITY;
    if lambda3 > 0.0 {
        dtau = dtau.min(h * h / (4.0 * lambda3));
    }
    let gmax = drift.max_norm();
    if gmax > 0.0 {
        dtau = dtau.min(h / gmax);
    }
    dtau
}

/// One explicit finite-volume update of the advection-diffusion equation
/// dp/dt = -div(p g) + lambda3 lap p with no-flux boundaries.
pub fn fp_step(
    grid: &DensityGrid,
    drift: &DriftArrays,
    lambda3: f64,
    dtau: f64,
    mode: ExecMode,
) -> Result<DensityGrid> {
    if drift.g_theta.len() != grid.p.len() || drift.g_u.len() != grid.p.len() {
        return Err(Error::GridMismatch("drift arrays do not match the grid".into()));
    }
    let admissible = admissible_dtau(grid, drift, lambda3);
    if !(dtau > 0.0) || dtau > admissible {
        return Err(Error::Config(format!(
            "step {dtau} violates the stability condition; need dtau <= {admissible}"
        )));
    }
    let (nt, nu) = (grid.n_theta, grid.n_u);
    let (ht, hu) = (grid.h_theta(), grid.h_u());
    let p = &grid.p;

    // upwind advective plus central diffusive flux through the face between
    // cells lo and hi along a direction with spacing h; boundary faces carry
    // zero flux
    let face = |lo: usize, hi: usize, gl: f64, gh: f64, h: f64| -> f64 {
        let v = 0.5 * (gl + gh);
        let adv = if v >= 0.0 { v * p[lo] } else { v * p[hi] };
        adv - lambda3 * (p[hi] - p[lo]) / h
    };

    let mut next = vec![0.0; p.len()];
    exec::fill_indexed(mode, &mut next, |idx| {
        let (i, j) = (idx / nu, idx % nu);
        let left = if i > 0 {
            face(idx - nu, idx, drift.g_theta[idx - nu], drift.g_theta[idx], ht)
        } else {
            0.0
        };
        let right = if i + 1 < nt {
            face(idx, idx + nu, drift.g_theta[idx], drift.g_theta[idx + nu], ht)
        } else {
            0.0
        };
        let down = if j > 0 {
            face(idx - 1, idx, drift.g_u[idx - 1], drift.g_u[idx], hu)
        } else {
            0.0
        };
        let up = if j + 1 < nu {
            face(idx, idx + 1, drift.g_u[idx], drift.g_u[idx + 1], hu)
        } else {
            0.0
        };
        p[idx] - dtau * ((right - left) / ht + (up - down) / hu)
    });
    let mut out = grid.clone();
    out.p = next;
    out.t = grid.t + dtau;
    // clip rounding-level negatives only; genuine undershoot is a bug
    for v in out.p.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-12 {
                return Err(Error::Diverged { step: 0, what: "density positivity".into() });
            }
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Theta-marginal rho, conditional mean u given theta, and the mass mask.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub omega: Vec<f64>,
    pub valid: Vec<bool>,
    pub h_theta: f64,
}

pub fn marginals(grid: &DensityGrid) -> Marginals {
    let (nt, nu) = (grid.n_theta, grid.n_u);
    let hu = grid.h_u();
    let mut rho = vec![0.0; nt];
    let mut omega = vec![0.0; nt];
    let mut valid = vec![false; nt];
    for i in 0..nt {
        let mut mass = 0.0;
        let mut mean = 0.0;
        for j in 0..nu {
            let v = grid.p[i * nu + j];
            mass += v;
            mean += grid.u_center(j) * v;
        }
        rho[i] = mass * hu;
        if rho[i] > RHO_FLOOR {
            omega[i] = mean * hu / rho[i];
            valid[i] = true;
        }
    }
    Marginals {
        theta: (0..nt).map(|i| grid.theta_center(i)).collect(),
        rho,
        omega,
        valid,
        h_theta: grid.h_theta(),
    }
}

/// Free energy split into its three terms; `total` is their weighted sum
/// loss + quadratic + lambda3 * p_log_p.
#[derive(Debug, Clone, Copy)]
pub struct FreeEnergy {
    pub loss: f64,
    pub quadratic: f64,
    pub p_log_p: f64,
    pub total: f64,
}

pub fn free_energy(
    grid: &DensityGrid,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: ExecMode,
) -> Result<FreeEnergy> {
    let preds = grid_predictions(grid, map, ds, mode)?;
    let mut loss = 0.0;
    for (i, &f) in preds.iter().enumerate() {
        loss += model::phi_loss(f, ds.y(i))?.0;
    }
    loss /= ds.len() as f64;
    let mut quad = 0.0;
    for i in 0..grid.n_theta {
        let th = grid.theta_center(i);
        for j in 0..grid.n_u {
            let u = grid.u_center(j);
            quad += (0.5 * hp.lambda1 * u * u + 0.5 * hp.lambda2 * th * th)
                * grid.p[i * grid.n_u + j];
        }
    }
    quad *= grid.cell_area();
    let plp = grid.p_log_p();
    Ok(FreeEnergy { loss, quadratic: quad, p_log_p: plp, total: loss + quad + hp.lambda3 * plp })
}

/// The dissipation integral of the descent identity:
/// integral of p (|g_theta - lambda3 d ln p/d theta|^2 + |g_u - ...|^2),
/// evaluated with central differences of ln p on interior cells carrying
/// mass above the floor.
pub fn dissipation(grid: &DensityGrid, drift: &DriftArrays, lambda3: f64) -> f64 {
    let (nt, nu) = (grid.n_theta, grid.n_u);
    let (ht, hu) = (grid.h_theta(), grid.h_u());
    let mut acc = 0.0;
    for i in 1..nt - 1 {
        for j in 1..nu - 1 {
            let idx = i * nu + j;
            let p = grid.p[idx];
            if p <= RHO_FLOOR {
                continue;
            }
            let (pl, pr) = (grid.p[idx - nu], grid.p[idx + nu]);
            let (pd, pu) = (grid.p[idx - 1], grid.p[idx + 1]);
            if pl <= 0.0 || pr <= 0.0 || pd <= 0.0 || pu <= 0.0 {
                continue;
            }
            let dln_t = (pr.ln() - pl.ln()) / (2.0 * ht);
            let dln_u = (pu.ln() - pd.ln()) / (2.0 * hu);
            let rt = drift.g_theta[idx] - lambda3 * dln_t;
            let ru = drift.g_u[idx] - lambda3 * dln_u;
            acc += p * (rt * rt + ru * ru);
        }
    }
    acc * grid.cell_area()
}

/// Free-energy values along a trajectory of grids plus the largest positive
/// increment (0 for a monotone sequence, and for fewer than two grids).
#[derive(Debug, Clone)]
pub struct DescentReport {
    pub values: Vec<f64>,
    pub max_increase: f64,
    pub dissipation: Vec<f64>,
}

pub fn check_descent(
    grids: &[DensityGrid],
    drifts: &[DriftArrays],
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: ExecMode,
) -> Result<DescentReport> {
    let mut values = Vec::with_capacity(grids.len());
    for g in grids {
        values.push(free_energy(g, map, ds, hp, mode)?.total);
    }
    let max_increase = values
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0f64, f64::max)
        .max(0.0);
    let dissipation = grids
        .iter()
        .zip(drifts)
        .map(|(g, dr)| dissipation(g, dr, hp.lambda3))
        .collect();
    Ok(DescentReport { values, max_increase, dissipation })
}

/// Residual of the theta-marginal evolution equation
/// d rho/dt = -d/d theta (rho g_theta(theta, omega(theta))) + lambda3 rho''
/// between two consecutive grids, in sup norm over interior cells.
pub fn rho_residual(
    grid_t: &DensityGrid,
    grid_next: &DensityGrid,
    drift: impl Fn(f64, f64) -> (f64, f64),
    lambda3: f64,
) -> Result<f64> {
    if grid_next.n_theta != grid_t.n_theta || grid_next.n_u != grid_t.n_u {
        return Err(Error::GridMismatch("grids differ in layout".into()));
    }
    let dtau = grid_next.t - grid_t.t;
    if !(dtau > 0.0) {
        return Err(Error::InvalidArgument("grids must be time-ordered".into()));
    }
    let m_t = marginals(grid_t);
    let m_next = marginals(grid_next);
    let ht = grid_t.h_theta();
    let nt = grid_t.n_theta;
    // flux rho * g_theta(theta, omega(theta)) per cell center
    let flux: Vec<f64> = (0..nt)
        .map(|i| {
            let (gt, _) = drift(m_t.theta[i], m_t.omega[i]);
            m_t.rho[i] * gt
        })
        .collect();
    let mut sup: f64 = 0.0;
    for i in 1..nt - 1 {
        let drho_dt = (m_next.rho[i] - m_t.rho[i]) / dtau;
        let adv = -(flux[i + 1] - flux[i - 1]) / (2.0 * ht);
        let diff = lambda3 * (m_t.rho[i + 1] - 2.0 * m_t.rho[i] + m_t.rho[i - 1]) / (ht * ht);
        sup = sup.max((drho_dt - adv - diff).abs());
    }
    Ok(sup)
}

/// Both sides of the differential-entropy bound
/// -int p ln p <= 1 + E|z|^2 / z + 2 ln(2 pi z) for the 2-D grid.
pub fn entropy_bound_check(grid: &DensityGrid, z: f64) -> Result<(f64, f64)> {
    if !(z > 0.0) {
        return Err(Error::InvalidArgument("z must be positive".into()));
    }
    let lhs = -grid.p_log_p();
    let rhs = 1.0 + grid.second_moment() / z + 2.0 * (2.0 * std::f64::consts::PI * z).ln();
    Ok((lhs, rhs))
}
