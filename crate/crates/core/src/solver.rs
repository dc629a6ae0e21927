//! Joint reconstruction loop: diffusion posterior sampling for the image,
//! proximal gradient steps with inertia for coils and motion, backtracked
//! Lipschitz estimates, a diagonal motion preconditioner and late rejection
//! of inconsistent motion states.

use std::io::Write;
use std::path::Path;

use log::warn;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{evaluate, zero_filled_coil_images, SamplingPlan, Wanted};
use crate::error::{Error, Result};
use crate::motion::MotionTrajectory;
use crate::priors::{
    coil_normalize, coil_prox, motion_prox_held, IdentityPrior, MotionWeights, QuadraticScorePrior, ScorePrior,
};
use crate::volume::{CoilSet, ComplexVolume, KSpaceSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 steps, got {}", self.num_steps)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// `sigma^i`, increasing in `i`, with `sigma^0 = sigma_min` and
/// `sigma^{N-1} = sigma_max` returned exactly.
pub fn karras_sigma(i: usize, s: &NoiseSchedule) -> Result<f64> {
    let n = s.num_steps;
    if i >= n {
        return Err(Error::InvalidArgument(format!("step {i} outside 0..{n}")));
    }
    if i == n - 1 {
        return Ok(s.sigma_max);
    }
    if i == 0 {
        return Ok(s.sigma_min);
    }
    let frac = (n - 1 - i) as f64 / (n - 1) as f64;
    let (a, b) = (s.sigma_max.powf(1.0 / s.rho), s.sigma_min.powf(1.0 / s.rho));
    Ok((a + frac * (b - a)).powf(s.rho))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZetaSchedule {
    pub zeta_start: f64,
    pub zeta_end: f64,
}

/// Geometric interpolation from `zeta_start` at `i = N-1` to `zeta_end` at
/// `i = 0`.
pub fn zeta(i: usize, num_steps: usize, s: &ZetaSchedule) -> f64 {
    if i + 1 >= num_steps || s.zeta_start == 0.0 {
        return s.zeta_start;
    }
    if i == 0 {
        return s.zeta_end;
    }
    let e = (num_steps - 1 - i) as f64 / (num_steps - 1) as f64;
    s.zeta_start * (s.zeta_end / s.zeta_start).powf(e)
}

/// `(N - i) / (N - i + 3)`
pub fn momentum_beta(i: usize, num_steps: usize) -> f64 {
    let k = (num_steps - i) as f64;
    k / (k + 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Identity,
    Quadratic { lambda: f64 },
}

impl PriorConfig {
    pub fn build(&self) -> Result<Box<dyn ScorePrior>> {
        Ok(match self {
            PriorConfig::Identity => Box::new(IdentityPrior),
            PriorConfig::Quadratic { lambda } => Box::new(QuadraticScorePrior::new(*lambda)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub schedule: NoiseSchedule,
    pub zeta: ZetaSchedule,
    /// Noise level in the data term `||A - z||^2 / (2 data_sigma^2)`.
    pub data_sigma: f64,
    pub gamma: f64,
    pub eta_r: f64,
    pub eta_t: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub initial_lipschitz_c: f64,
    pub initial_lipschitz_v: f64,
    pub max_doublings: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub use_preconditioner: bool,
    pub dc_rejection: bool,
    pub dc_threshold: f64,
    pub dc_window: usize,
    pub seed: u64,
    pub prior: PriorConfig,
    pub estimate_coils: bool,
    pub estimate_motion: bool,
    /// Motion steps run only at noise levels `sigma^i <= motion_start_sigma`;
    /// every iteration when unset.
    pub motion_start_sigma: Option<f64>,
    /// Hold the first motion state at the identity so the reconstruction
    /// frame is the frame of the first shot.
    pub anchor_first_state: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule {
                num_steps: 200,
                sigma_min: 0.002,
                sigma_max: 80.0,
                rho: 7.0,
            },
            zeta: ZetaSchedule {
                zeta_start: 1.0,
                zeta_end: 0.1,
            },
            data_sigma: 1.0,
            gamma: 200.0,
            eta_r: 1000.0,
            eta_t: 50.0,
            cg_tol: 1e-8,
            cg_max_iter: 200,
            initial_lipschitz_c: 1.0,
            initial_lipschitz_v: 1.0,
            max_doublings: 20,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
            use_preconditioner: true,
            dc_rejection: true,
            dc_threshold: 0.75,
            dc_window: 40,
            seed: 0,
            prior: PriorConfig::Quadratic { lambda: 10.0 },
            estimate_coils: true,
            estimate_motion: true,
            motion_start_sigma: None,
            anchor_first_state: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        let (zs, ze) = (self.zeta.zeta_start, self.zeta.zeta_end);
        if !((zs == 0.0 && ze == 0.0) || (zs > 0.0 && ze > 0.0 && zs.is_finite() && ze.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "zeta range must be both positive or both zero, got {zs} and {ze}"
            )));
        }
        positive("data_sigma", self.data_sigma)?;
        positive("cg_tol", self.cg_tol)?;
        positive("initial_lipschitz_c", self.initial_lipschitz_c)?;
        positive("initial_lipschitz_v", self.initial_lipschitz_v)?;
        positive("epsilon", self.epsilon)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        MotionWeights::new(self.eta_r, self.eta_t)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.dc_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!("dc_threshold must be positive, got {}", self.dc_threshold)));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::InvalidArgument("cg_max_iter must be at least 1".into()));
        }
        if let Some(s) = self.motion_start_sigma {
            positive("motion_start_sigma", s)?;
        }
        if let PriorConfig::Quadratic { lambda } = self.prior {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidArgument(format!("prior lambda must be >= 0, got {lambda}")));
            }
        }
        Ok(())
    }

    pub fn motion_weights(&self) -> MotionWeights {
        MotionWeights {
            eta_r: self.eta_r,
            eta_t: self.eta_t,
        }
    }
}

/// Running gradient statistics for the diagonal motion preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerState {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub k: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl PreconditionerState {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            g1: vec![0.0; len],
            g2: vec![0.0; len],
            k: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Fold in a gradient and return the unscaled diagonal
    /// `sqrt(g2 / (1 - beta2^k)) + epsilon`.
    pub fn update(&mut self, g: &[f64]) -> Vec<f64> {
        self.k += 1;
        for ((m, s), &gi) in self.g1.iter_mut().zip(self.g2.iter_mut()).zip(g) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
            *s = self.beta2 * *s + (1.0 - self.beta2) * (gi - *m) * (gi - *m);
        }
        let bias = 1.0 - self.beta2.powi(self.k as i32);
        self.g2.iter().map(|s| (s / bias).sqrt() + self.epsilon).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: ComplexVolume,
    pub c: CoilSet,
    pub c_prev: CoilSet,
    pub v: MotionTrajectory,
    pub v_prev: MotionTrajectory,
    pub preconditioner: PreconditionerState,
    pub active: Vec<bool>,
    pub lipschitz_c: f64,
    pub lipschitz_v: f64,
}

/// Initial state: `x = sigma_max * eps` with unit-variance complex noise,
/// coils from the zero-filled data, zero motion.
pub fn initialize(z: &KSpaceSet, plan: &SamplingPlan, config: &SolverConfig) -> Result<SolverState> {
    if z.is_empty() || z.norm_sqr() == 0.0 {
        return Err(Error::InvalidArgument("measurements are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = config.schedule.sigma_max * std::f64::consts::FRAC_1_SQRT_2;
    let data = (0..plan.shape().len())
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    let x = ComplexVolume::from_data(plan.shape(), plan.spacing(), data)?;
    let c = coil_normalize(&CoilSet::new(zero_filled_coil_images(z, plan)?)?);
    let v = MotionTrajectory::zeros(plan.num_times());
    Ok(SolverState {
        x,
        c_prev: c.clone(),
        c,
        v_prev: v.clone(),
        v,
        preconditioner: PreconditionerState::new(6 * plan.num_times(), config.beta1, config.beta2, config.epsilon),
        active: vec![true; plan.num_times()],
        lipschitz_c: config.initial_lipschitz_c,
        lipschitz_v: config.initial_lipschitz_v,
    })
}

/// Outcome of one image update.
#[derive(Clone, Debug)]
pub struct ImageStep {
    pub x: ComplexVolume,
    pub x_hat0: ComplexVolume,
    /// Data term at `(x_hat0, c, v)` over the active states.
    pub data_fidelity: f64,
    /// Relative residual of every state.
    pub dc: Vec<f64>,
}

/// Euler step of the probability-flow ODE from `sigma_cur` to `sigma_next`
/// plus the data-consistency gradient taken through the denoiser:
/// `x' = x + ((sigma_next - sigma_cur) / sigma_cur) (x - x_hat0) - zeta J^T grad D(x_hat0)`.
#[allow(clippy::too_many_arguments)]
pub fn dps_image_step(
    state: &SolverState,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma_cur: f64,
    sigma_next: f64,
    zeta: f64,
    data_sigma: f64,
    prior: &dyn ScorePrior,
) -> Result<ImageStep> {
    if !(sigma_cur > 0.0 && sigma_next >= 0.0 && sigma_next < sigma_cur) {
        return Err(Error::InvalidArgument(format!(
            "need sigma_cur > sigma_next >= 0, got {sigma_cur} and {sigma_next}"
        )));
    }
    let x_hat0 = prior.denoise(&state.x, sigma_cur);
    let eval = evaluate(&x_hat0, &state.c, &state.v, z, plan, data_sigma, Some(&state.active), Wanted::X)?;
    let mut x = state.x.clone();
    let drift = (sigma_next - sigma_cur) / sigma_cur;
    x.axpy(drift, &state.x.sub(&x_hat0));
    if zeta != 0.0 {
        let g = prior.vjp(&state.x, sigma_cur, eval.grad_x.as_ref().expect("requested"));
        x.axpy(-zeta, &g);
    }
    Ok(ImageStep {
        x,
        x_hat0,
        data_fidelity: eval.value,
        dc: eval.data_consistency(),
    })
}

/// Backtracking on a Lipschitz estimate: start at `l_prev / 2`, double until
/// `accept(L)` holds, at most `max_doublings` times. Returns the final `L`
/// and whether it was accepted.
pub fn backtrack(
    l_prev: f64,
    max_doublings: u32,
    mut accept: impl FnMut(f64) -> Result<bool>,
) -> Result<(f64, bool)> {
    let mut l = 0.5 * l_prev;
    for attempt in 0..=max_doublings {
        if accept(l)? {
            return Ok((l, true));
        }
        if attempt < max_doublings {
            l *= 2.0;
        }
    }
    Ok((l, false))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub lipschitz: f64,
    /// Sufficient decrease held at the returned Lipschitz estimate.
    pub accepted: bool,
    /// Inner CG met its tolerance (always true for coil steps).
    pub converged: bool,
}

fn extrapolate_coils(c: &CoilSet, c_prev: &CoilSet, beta: f64) -> CoilSet {
    c.added(beta, &c.added(-1.0, c_prev))
}

fn extrapolate_motion(v: &MotionTrajectory, v_prev: &MotionTrajectory, beta: f64) -> MotionTrajectory {
    let (a, b) = (v.to_flat(), v_prev.to_flat());
    MotionTrajectory::from_flat(&a.iter().zip(&b).map(|(p, q)| p + beta * (p - q)).collect::<Vec<_>>())
}

/// Inertial proximal gradient step for the coil maps, followed by
/// normalization.
#[allow(clippy::too_many_arguments)]
pub fn coil_step(
    state: &mut SolverState,
    x_hat0: &ComplexVolume,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    beta: f64,
    config: &SolverConfig,
    iteration: usize,
) -> Result<StepReport> {
    let c_tilde = extrapolate_coils(&state.c, &state.c_prev, beta);
    let active = state.active.clone();
    let eval = evaluate(x_hat0, &c_tilde, &state.v, z, plan, config.data_sigma, Some(&active), Wanted::C)?;
    let g = eval.grad_c.expect("requested");
    if !g.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            quantity: "coil gradient".into(),
        });
    }
    let g_sq = g.norm_sqr();
    let (l, accepted) = if g_sq == 0.0 {
        (state.lipschitz_c, true)
    } else {
        backtrack(state.lipschitz_c, config.max_doublings, |l| {
            let trial = c_tilde.added(-1.0 / l, &g);
            let f = evaluate(x_hat0, &trial, &state.v, z, plan, config.data_sigma, Some(&active), Wanted::NONE)?.value;
            Ok(f <= eval.value - g_sq / (2.0 * l))
        })?
    };
    if !accepted {
        warn!("iteration {iteration}: coil backtracking exhausted, using L_c = {l:e}");
    }
    let w = c_tilde.added(-1.0 / l, &g);
    let c_new = coil_normalize(&coil_prox(&w, config.gamma, l)?);
    state.c_prev = std::mem::replace(&mut state.c, c_new);
    state.lipschitz_c = l;
    Ok(StepReport {
        lipschitz: l,
        accepted,
        converged: true,
    })
}

/// Preconditioned proximal gradient update for a given extrapolated point
/// and gradient: `v = prox(v_tilde - P^{-1} g)` in the `P` metric, with
/// `P = L diag(d)`.
#[allow(clippy::too_many_arguments)]
pub fn motion_update(
    v_tilde: &MotionTrajectory,
    g: &[f64],
    d: &[f64],
    lipschitz: f64,
    weights: MotionWeights,
    held: &[bool],
    cg_tol: f64,
    cg_max_iter: usize,
) -> Result<(MotionTrajectory, bool)> {
    let p: Vec<f64> = d.iter().map(|di| lipschitz * di).collect();
    let fixed = held.iter().flat_map(|&h| [h; 6]);
    let w: Vec<f64> = v_tilde
        .to_flat()
        .iter()
        .zip(g)
        .zip(&p)
        .zip(fixed)
        .map(|(((v, gi), pi), f)| if f { *v } else { v - gi / pi })
        .collect();
    let w = MotionTrajectory::from_flat(&w);
    if weights.is_zero() {
        return Ok((w, true));
    }
    let r = motion_prox_held(&w, weights, &p, held, cg_tol, cg_max_iter)?;
    Ok((r.v, r.converged))
}

/// Inertial preconditioned proximal gradient step for the motion states.
#[allow(clippy::too_many_arguments)]
pub fn motion_step(
    state: &mut SolverState,
    x_hat0: &ComplexVolume,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    beta: f64,
    config: &SolverConfig,
    iteration: usize,
) -> Result<StepReport> {
    let active = state.active.clone();
    let held: Vec<bool> = active
        .iter()
        .enumerate()
        .map(|(t, &a)| !a || (t == 0 && config.anchor_first_state))
        .collect();
    let mut v_tilde = extrapolate_motion(&state.v, &state.v_prev, beta);
    for (t, &h) in held.iter().enumerate() {
        if h {
            v_tilde.states[t] = state.v.states[t];
        }
    }
    let eval = evaluate(x_hat0, &state.c, &v_tilde, z, plan, config.data_sigma, Some(&active), Wanted::V)?;
    let mut g = eval.grad_v.expect("requested").to_flat();
    for (gi, h) in g.iter_mut().zip(held.iter().flat_map(|&h| [h; 6])) {
        if h {
            *gi = 0.0;
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration,
            quantity: "motion gradient".into(),
        });
    }
    let d = if config.use_preconditioner {
        state.preconditioner.update(&g)
    } else {
        vec![1.0; g.len()]
    };
    let g_pg: f64 = g.iter().zip(&d).map(|(gi, di)| gi * gi / di).sum();
    let (l, accepted) = if g_pg == 0.0 {
        (state.lipschitz_v, true)
    } else {
        let base = v_tilde.to_flat();
        backtrack(state.lipschitz_v, config.max_doublings, |l| {
            let trial: Vec<f64> = base.iter().zip(&g).zip(&d).map(|((v, gi), di)| v - gi / (l * di)).collect();
            let trial = MotionTrajectory::from_flat(&trial);
            let f = evaluate(x_hat0, &state.c, &trial, z, plan, config.data_sigma, Some(&active), Wanted::NONE)?.value;
            Ok(f <= eval.value - g_pg / (2.0 * l))
        })?
    };
    if !accepted {
        warn!("iteration {iteration}: motion backtracking exhausted, using L_v = {l:e}");
    }
    let (v_new, converged) =
        motion_update(&v_tilde, &g, &d, l, config.motion_weights(), &held, config.cg_tol, config.cg_max_iter)?;
    if !converged {
        warn!("iteration {iteration}: motion CG did not reach tolerance");
    }
    if !v_new.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            quantity: "motion states".into(),
        });
    }
    state.v_prev = std::mem::replace(&mut state.v, v_new);
    state.lipschitz_v = l;
    Ok(StepReport {
        lipschitz: l,
        accepted,
        converged,
    })
}

/// Active flags `DC_t <= threshold`. When every state exceeds the threshold
/// the lowest one is kept and the second value is `true`.
pub fn dc_reject(dc: &[f64], threshold: f64) -> (Vec<bool>, bool) {
    let mut active: Vec<bool> = dc.iter().map(|&d| d <= threshold).collect();
    if !active.is_empty() && !active.iter().any(|&a| a) {
        let best = dc
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(t, _)| t)
            .expect("nonempty");
        active[best] = true;
        return (active, true);
    }
    (active, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub sigma: f64,
    pub zeta: f64,
    pub beta: f64,
    pub data_fidelity: f64,
    pub lipschitz_c: Option<f64>,
    pub lipschitz_v: Option<f64>,
    pub active_states: usize,
    pub cg_converged: bool,
    pub dc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub x: ComplexVolume,
    pub c: CoilSet,
    pub v: MotionTrajectory,
    pub active: Vec<bool>,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Steps where backtracking hit its doubling limit.
    pub backtracking_failures: usize,
    /// Motion steps whose CG missed its tolerance.
    pub cg_failures: usize,
    /// Iterations where every state exceeded the DC threshold.
    pub all_rejected_events: usize,
}

impl ReconResult {
    pub fn converged(&self) -> bool {
        self.backtracking_failures == 0 && self.cg_failures == 0
    }

    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        write_diagnostics_csv(&self.diagnostics, out)
    }

    pub fn save_diagnostics(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_diagnostics_csv(f)
    }
}

pub fn write_diagnostics_csv<W: Write>(rows: &[IterationDiagnostics], out: W) -> Result<()> {
    let num_states = rows.first().map_or(0, |r| r.dc.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "iteration",
        "sigma",
        "zeta",
        "beta",
        "data_fidelity",
        "lipschitz_c",
        "lipschitz_v",
        "active_states",
        "cg_converged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..num_states).map(|t| format!("dc_{t}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.sigma.to_string(),
            r.zeta.to_string(),
            r.beta.to_string(),
            r.data_fidelity.to_string(),
            opt(r.lipschitz_c),
            opt(r.lipschitz_v),
            r.active_states.to_string(),
            r.cg_converged.to_string(),
        ];
        rec.extend(r.dc.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Run the full loop `i = N-1, ..., 0`. `coils` replaces the initial coil
/// estimate; with `estimate_coils` off it is used unchanged throughout.
pub fn run(z: &KSpaceSet, plan: &SamplingPlan, config: &SolverConfig, coils: Option<&CoilSet>) -> Result<ReconResult> {
    config.validate()?;
    let prior = config.prior.build()?;
    let mut state = initialize(z, plan, config)?;
    if let Some(c) = coils {
        if c.shape() != plan.shape() || c.num_coils() != z.num_coils() {
            return Err(Error::shape(
                format!("{} coils on {}", z.num_coils(), plan.shape()),
                format!("{} coils on {}", c.num_coils(), c.shape()),
            ));
        }
        state.c = c.clone();
        state.c_prev = c.clone();
    }
    let n = config.schedule.num_steps;
    let mut diagnostics = Vec::with_capacity(n);
    let (mut backtracking_failures, mut cg_failures, mut all_rejected_events) = (0, 0, 0);
    for i in (0..n).rev() {
        let sigma_cur = karras_sigma(i, &config.schedule)?;
        let sigma_next = if i == 0 { 0.0 } else { karras_sigma(i - 1, &config.schedule)? };
        let zeta_i = zeta(i, n, &config.zeta);
        let beta = momentum_beta(i, n);

        if config.dc_rejection && i < config.dc_window {
            let x_hat0 = prior.denoise(&state.x, sigma_cur);
            let e = evaluate(&x_hat0, &state.c, &state.v, z, plan, config.data_sigma, None, Wanted::NONE)?;
            let (active, all_rejected) = dc_reject(&e.data_consistency(), config.dc_threshold);
            if all_rejected {
                warn!("iteration {i}: every motion state exceeds the DC threshold, keeping the most consistent one");
                all_rejected_events += 1;
            }
            state.active = active;
        }

        let step = dps_image_step(&state, z, plan, sigma_cur, sigma_next, zeta_i, config.data_sigma, prior.as_ref())?;
        if !step.x.is_finite() || !step.x_hat0.is_finite() {
            return Err(Error::NonFinite {
                iteration: i,
                quantity: "image".into(),
            });
        }
        if let Some(t) = step.dc.iter().position(|d| !d.is_finite()) {
            return Err(Error::NonFinite {
                iteration: i,
                quantity: format!("data consistency of state {t}"),
            });
        }
        state.x = step.x;

        let mut lipschitz_c = None;
        if config.estimate_coils {
            let r = coil_step(&mut state, &step.x_hat0, z, plan, beta, config, i)?;
            backtracking_failures += usize::from(!r.accepted);
            lipschitz_c = Some(r.lipschitz);
        }
        let mut lipschitz_v = None;
        let mut cg_converged = true;
        if config.estimate_motion && config.motion_start_sigma.map_or(true, |s| sigma_cur <= s) {
            let r = motion_step(&mut state, &step.x_hat0, z, plan, beta, config, i)?;
            backtracking_failures += usize::from(!r.accepted);
            cg_failures += usize::from(!r.converged);
            cg_converged = r.converged;
            lipschitz_v = Some(r.lipschitz);
        }
        diagnostics.push(IterationDiagnostics {
            iteration: i,
            sigma: sigma_cur,
            zeta: zeta_i,
            beta,
            data_fidelity: step.data_fidelity,
            lipschitz_c,
            lipschitz_v,
            active_states: state.active.iter().filter(|&&a| a).count(),
            cg_converged,
            dc: step.dc,
        });
    }
    Ok(ReconResult {
        x: state.x,
        c: state.c,
        v: state.v,
        active: state.active,
        diagnostics,
        backtracking_failures,
        cg_failures,
        all_rejected_events,
    })
}

/// Thread count requested through `MDPS_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("MDPS_THREADS") {
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("MDPS_THREADS must be a positive integer, got {s:?}")))?;
            if n == 0 {
                return Err(Error::InvalidArgument("MDPS_THREADS must be at least 1".into()));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Run `f` on a dedicated pool of `threads` workers (default rayon sizing
/// when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}
