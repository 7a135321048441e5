//! Particle-system trainer: plain gradient descent and noisy gradient
//! descent with per-particle counter-based noise streams, plus trajectory
//! recording.

use crate::data::Dataset;
use crate::exec::{self, ExecMode};
use crate::model::{self, Ensemble, FeatureMap, Hyper};
use crate::rng::{substream, Domain};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Deterministic descent or noise-injected descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Gd,
    Ngd,
}

/// Initial law for the top weights.
#[derive(Debug, Clone, Copy)]
pub enum UInit {
    Gaussian { mean: f64, std: f64 },
    /// Every particle starts at the same u (the deterministic-coupling case).
    Constant(f64),
}

/// Initial particle law: isotropic Gaussian thetas, top weights per `UInit`.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub theta_mean: f64,
    pub theta_std: f64,
    pub u: UInit,
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub steps: usize,
    pub seed: u64,
    pub record_every: usize,
    pub init: Init,
}

impl TrainerConfig {
    pub fn validate(&self, hp: &Hyper) -> Result<()> {
        hp.validate()?;
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        match self.mode {
            Mode::Ngd if hp.lambda3 <= 0.0 => {
                return Err(Error::Config("noisy mode requires lambda3 > 0".into()));
            }
            Mode::Gd if hp.lambda3 != 0.0 => {
                return Err(Error::Config("plain descent requires lambda3 = 0".into()));
            }
            _ => {}
        }
        step_size_guard(hp)
    }
}

/// Refuse step sizes that overshoot the quadratic regularizer.
pub fn step_size_guard(hp: &Hyper) -> Result<()> {
    let stiff = (2.0 * hp.lambda1).max(2.0 * hp.lambda2);
    if hp.dt * stiff >= 1.0 {
        return Err(Error::Config(format!(
            "dt = {} too large for the regularizers; need dt < {}",
            hp.dt,
            1.0 / stiff
        )));
    }
    Ok(())
}

/// One ensemble snapshot with its recorded objective value.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub ensemble: Ensemble,
    pub objective: f64,
}

/// Ordered run record; the first snapshot is the initial state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub wall_secs: f64,
}

impl Trajectory {
    pub fn final_ensemble(&self) -> &Ensemble {
        &self.snapshots.last().expect("trajectory never empty").ensemble
    }
}

/// Sample the initial ensemble from the configured law.
pub fn init_ensemble(cfg: &TrainerConfig, m: usize, d: usize) -> Result<Ensemble> {
    if m == 0 || d == 0 {
        return Err(Error::Config("m and d must be positive".into()));
    }
    let mut thetas = vec![0.0; m * d];
    let mut us = vec![0.0; m];
    for j in 0..m {
        let mut rng = substream(cfg.seed, Domain::Init, j as u64, 0);
        for k in 0..d {
            thetas[j * d + k] =
                cfg.init.theta_mean + cfg.init.theta_std * rng.sample::<f64, _>(StandardNormal);
        }
        us[j] = match cfg.init.u {
            UInit::Gaussian { mean, std } => mean + std * rng.sample::<f64, _>(StandardNormal),
            UInit::Constant(c) => c,
        };
    }
    Ensemble::new(thetas, us, d)
}

/// One synchronous update: all drifts are evaluated on the input ensemble,
/// then every particle moves by `dt * g` plus, in noisy mode, a Gaussian
/// increment with per-coordinate standard deviation `sqrt(2 lambda3 dt)`.
///
/// Noise for particle j at step `step` comes from its own substream of
/// `seed`, so the result is independent of evaluation order and `step` must
/// differ between calls for the noise to be fresh.
pub fn ngd_step(
    ens: &Ensemble,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    mode: Mode,
    seed: u64,
    step: usize,
    exec_mode: ExecMode,
) -> Result<Ensemble> {
    let (g1, g2) = model::particle_drifts(ens, map, ds, hp, exec_mode)?;
    if g1.iter().chain(g2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step, what: "drift".into() });
    }
    let d = ens.d();
    let sigma = (2.0 * hp.lambda3 * hp.dt).sqrt();
    let rows: Vec<(Vec<f64>, f64)> = exec::map_indexed(exec_mode, ens.m(), |j| {
        let mut theta: Vec<f64> = ens.theta(j).to_vec();
        let mut u = ens.u(j) + hp.dt * g1[j];
        for (k, t) in theta.iter_mut().enumerate() {
            *t += hp.dt * g2[j * d + k];
        }
        if mode == Mode::Ngd {
            let mut rng = substream(seed, Domain::Step, step as u64, j as u64);
            u += sigma * rng.sample::<f64, _>(StandardNormal);
            for t in theta.iter_mut() {
                *t += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        (theta, u)
    });
    let mut thetas = Vec::with_capacity(ens.m() * d);
    let mut us = Vec::with_capacity(ens.m());
    for (theta, u) in rows {
        thetas.extend_from_slice(&theta);
        us.push(u);
    }
    Ensemble::new(thetas, us, d).map_err(|_| Error::Diverged { step, what: "state".into() })
}

/// Run the trainer for `cfg.steps` updates, recording every
/// `cfg.record_every` steps plus the initial and final states.
pub fn train(
    ens0: Ensemble,
    cfg: &TrainerConfig,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
) -> Result<Trajectory> {
    train_with_mode(ens0, cfg, map, ds, hp, ExecMode::default())
}

pub fn train_with_mode(
    ens0: Ensemble,
    cfg: &TrainerConfig,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
    exec_mode: ExecMode,
) -> Result<Trajectory> {
    cfg.validate(hp)?;
    let start = std::time::Instant::now();
    let mut snapshots = Vec::new();
    let mut ens = ens0;
    let q0 = model::objective_with_mode(&ens, map, ds, hp, exec_mode)?;
    snapshots.push(Snapshot { step: 0, ensemble: ens.clone(), objective: q0 });
    for step in 0..cfg.steps {
        ens = ngd_step(&ens, map, ds, hp, cfg.mode, cfg.seed, step, exec_mode)?;
        let done = step + 1;
        if done % cfg.record_every == 0 || done == cfg.steps {
            let q = model::objective_with_mode(&ens, map, ds, hp, exec_mode)?;
            if !q.is_finite() {
                return Err(Error::Diverged { step: done, what: "objective".into() });
            }
            snapshots.push(Snapshot { step: done, ensemble: ens.clone(), objective: q });
        }
    }
    Ok(Trajectory { snapshots, wall_secs: start.elapsed().as_secs_f64() })
}

/// Resume a run from a mid-trajectory state. Stepping from `start_step` with
/// the original seed reproduces the uninterrupted run bit-exactly because
/// noise streams are keyed by step index, not by generator history.
pub fn resume(
    ens: Ensemble,
    start_step: usize,
    cfg: &TrainerConfig,
    map: &FeatureMap,
    ds: &Dataset,
    hp: &Hyper,
) -> Result<Ensemble> {
    cfg.validate(hp)?;
    let mode = ExecMode::default();
    let mut ens = ens;
    for step in start_step..cfg.steps {
        ens = ngd_step(&ens, map, ds, hp, cfg.mode, cfg.seed, step, mode)?;
    }
    Ok(ens)
}
