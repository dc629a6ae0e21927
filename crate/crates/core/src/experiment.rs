//! Experiment configuration and the simulate / reconstruct / evaluate
//! pipeline built on the other modules.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::acquisition::{
    make_cartesian_mask, make_ordering, make_poisson_disc_mask, noise_sigma_for_snr, simulate_kspace,
    zero_filled_coil_images, Geometry, Mask2D, NoiseModel, OrderingScheme, ReadoutAxis, SamplingPlan,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::motion::{simulate_gp_trajectory, GpOptions, MotionTrajectory, SeverityLevel};
use crate::phantom::{make_phantom, make_synthetic_coils, Ellipsoid, PhantomSpec, PhasePolynomial};
use crate::priors::coil_normalize;
use crate::solver::{run, ReconResult, SolverConfig};
use crate::volume::{percentile_normalize, rss_combine, CoilSet, ComplexVolume, KSpaceSet, RealVolume, Shape3};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSettings {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Explicit ellipsoids; the seeded head-like layout when absent.
    pub ellipsoids: Option<Vec<Ellipsoid>>,
    pub phase: Option<PhasePolynomial>,
}

impl Default for PhantomSettings {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            spacing: [1.0; 3],
            seed: 0,
            ellipsoids: None,
            phase: None,
        }
    }
}

impl PhantomSettings {
    pub fn spec(&self) -> PhantomSpec {
        let shape = Shape3::new(self.shape[0], self.shape[1], self.shape[2]);
        let mut spec = PhantomSpec::brain_like(shape, self.seed);
        spec.spacing = self.spacing;
        if let Some(e) = &self.ellipsoids {
            spec.ellipsoids = e.clone();
        }
        if let Some(p) = &self.phase {
            spec.phase = p.clone();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoilSettings {
    pub num_coils: usize,
    pub seed: u64,
}

impl Default for CoilSettings {
    fn default() -> Self {
        Self { num_coils: 4, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    Cartesian,
    PoissonDisc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSettings {
    pub mask: MaskKind,
    pub acceleration: f64,
    pub acl_fraction: f64,
    pub ordering: OrderingScheme,
    pub shots: usize,
    /// Sub-states per shot, used when the motion mode is `intra`.
    pub states_per_shot: usize,
    pub readout: ReadoutAxis,
    pub seed: u64,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            mask: MaskKind::Cartesian,
            acceleration: 2.0,
            acl_fraction: 0.04,
            ordering: OrderingScheme::LinearCircular,
            shots: 16,
            states_per_shot: 2,
            readout: ReadoutAxis::Z,
            seed: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    None,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub fn level(self) -> SeverityLevel {
        match self {
            Severity::None => SeverityLevel::mild().scaled(0.0),
            Severity::Mild => SeverityLevel::mild(),
            Severity::Moderate => SeverityLevel::moderate(),
            Severity::Severe => SeverityLevel::severe(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    Inter,
    Intra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSettings {
    pub severity: Severity,
    /// Multiplies both severity bounds.
    pub scale: f64,
    pub lengthscale: Option<f64>,
    pub random_amplitude: bool,
    pub mode: MotionMode,
    pub seed: u64,
}

impl Default for MotionSettings {
    fn default() -> Self {
        Self {
            severity: Severity::Mild,
            scale: 1.0,
            lengthscale: None,
            random_amplitude: false,
            mode: MotionMode::Inter,
            seed: 3,
        }
    }
}

impl MotionSettings {
    pub fn level(&self) -> SeverityLevel {
        self.severity.level().scaled(self.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSettings {
    /// Absolute complex noise level on the raw k-space.
    pub sigma: f64,
    /// Measurement SNR in dB; overrides `sigma` when present.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            snr_db: Some(30.0),
            seed: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedCoils {
    /// Ground-truth maps.
    Truth,
    /// Maps from the zero-filled measured data.
    ZeroFilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub phantom: PhantomSettings,
    /// Ground-truth volume file used instead of the generated phantom.
    pub input_volume: Option<PathBuf>,
    pub coils: CoilSettings,
    pub plan: PlanSettings,
    pub motion: MotionSettings,
    pub noise: NoiseSettings,
    /// Scale k-space by the 99th percentile of the zero-filled RSS.
    pub normalize: bool,
    /// Coil maps used when coil estimation is disabled.
    pub fixed_coils: FixedCoils,
    pub solver: SolverConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            phantom: PhantomSettings::default(),
            input_volume: None,
            coils: CoilSettings::default(),
            plan: PlanSettings::default(),
            motion: MotionSettings::default(),
            noise: NoiseSettings::default(),
            normalize: true,
            fixed_coils: FixedCoils::Truth,
            solver: SolverConfig {
                schedule: crate::solver::NoiseSchedule {
                    num_steps: 100,
                    ..SolverConfig::default().schedule
                },
                dc_window: 20,
                ..SolverConfig::default()
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// The recovery setup with a 100-step schedule.
    pub fn test_preset() -> Self {
        let mut c = Self::recovery_preset();
        c.solver.schedule.num_steps = 100;
        c.solver.dc_window = 20;
        c.output_dir = PathBuf::from("runs/test");
        c
    }

    /// Full-length schedule and weights of the reference protocol with 52
    /// shots on a 32^3 grid.
    pub fn paperlike_preset() -> Self {
        Self {
            plan: PlanSettings {
                acceleration: 4.0,
                shots: 52,
                ..PlanSettings::default()
            },
            solver: SolverConfig::default(),
            ..Self::default()
        }
    }

    /// Joint motion recovery on the 32^3 grid: halved mild motion, 16
    /// interleaved shots with the k-space core first, weights sized for the
    /// small grid and motion updates from sigma = 0.3 on.
    pub fn recovery_preset() -> Self {
        Self {
            plan: PlanSettings {
                ordering: OrderingScheme::InterleavedCenterFirst,
                ..PlanSettings::default()
            },
            motion: MotionSettings {
                scale: 0.5,
                ..MotionSettings::default()
            },
            solver: SolverConfig {
                schedule: crate::solver::NoiseSchedule {
                    num_steps: 400,
                    ..SolverConfig::default().schedule
                },
                data_sigma: 0.7,
                prior: crate::solver::PriorConfig::Quadratic { lambda: 300.0 },
                gamma: 10.0,
                eta_r: 1.0,
                eta_t: 0.1,
                initial_lipschitz_v: 10.0,
                motion_start_sigma: Some(0.3),
                ..SolverConfig::default()
            },
            output_dir: PathBuf::from("runs/recovery"),
            ..Self::default()
        }
    }

    pub const PRESETS: [&'static str; 3] = ["test", "recovery", "paperlike"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "test" | "default" => Ok(Self::test_preset()),
            "recovery" => Ok(Self::recovery_preset()),
            "paperlike" => Ok(Self::paperlike_preset()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.coils.num_coils == 0 {
            return Err(Error::InvalidArgument("coils.num_coils must be at least 1".into()));
        }
        if !(self.motion.scale >= 0.0 && self.motion.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("motion.scale must be >= 0, got {}", self.motion.scale)));
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise.sigma must be >= 0, got {}", self.noise.sigma)));
        }
        self.solver.validate()
    }

    pub fn states_per_shot(&self) -> usize {
        match self.motion.mode {
            MotionMode::Inter => 1,
            MotionMode::Intra => self.plan.states_per_shot,
        }
    }
}

/// Ground-truth image and coil maps.
#[derive(Clone, Debug)]
pub struct Truth {
    pub image: ComplexVolume,
    pub coils: CoilSet,
}

pub fn make_truth(cfg: &ExperimentConfig) -> Result<Truth> {
    let image = match &cfg.input_volume {
        Some(path) => crate::io::load_volume(path)?,
        None => make_phantom(&cfg.phantom.spec())?,
    };
    let coils = make_synthetic_coils(image.shape(), image.spacing(), cfg.coils.num_coils, cfg.coils.seed)?;
    Ok(Truth { image, coils })
}

pub fn make_plan(cfg: &ExperimentConfig, shape: Shape3, spacing: [f64; 3]) -> Result<SamplingPlan> {
    let geometry = Geometry {
        shape,
        spacing,
        readout: cfg.plan.readout,
    };
    let pe = geometry.phase_shape();
    let p = &cfg.plan;
    let mask = match p.mask {
        MaskKind::Full => Mask2D::full(pe.0, pe.1),
        MaskKind::Cartesian => make_cartesian_mask(pe, p.acceleration, p.acl_fraction, p.seed)?,
        MaskKind::PoissonDisc => make_poisson_disc_mask(pe, p.acceleration, p.acl_fraction, p.seed)?.mask,
    };
    make_ordering(geometry, &mask, p.ordering, p.shots, cfg.states_per_shot(), p.seed)
}

/// Everything the reconstruction consumes plus the simulation ground truth.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub plan: SamplingPlan,
    pub kspace: KSpaceSet,
    pub trajectory: MotionTrajectory,
    /// RSS of the zero-filled adjoint of the (normalized) data.
    pub baseline: RealVolume,
    pub noise_sigma: f64,
    /// Factor the raw k-space was divided by.
    pub scale: f64,
}

pub fn simulate(cfg: &ExperimentConfig, truth: &Truth) -> Result<Simulation> {
    let plan = make_plan(cfg, truth.image.shape(), truth.image.spacing())?;
    let t = plan.num_times();
    let level = cfg.motion.level();
    let trajectory = if level.max_translation_mm == 0.0 && level.max_rotation_deg == 0.0 {
        MotionTrajectory::zeros(t)
    } else {
        let options = GpOptions {
            lengthscale: cfg.motion.lengthscale,
            random_amplitude: cfg.motion.random_amplitude,
        };
        simulate_gp_trajectory(t, level, options, cfg.motion.seed)?
    };
    let noise_sigma = match cfg.noise.snr_db {
        Some(snr) => {
            let clean = simulate_kspace(&truth.image, &truth.coils, &trajectory, &plan, &NoiseModel {
                sigma: 0.0,
                seed: 0,
            })?;
            noise_sigma_for_snr(&clean, snr)
        }
        None => cfg.noise.sigma,
    };
    let raw = simulate_kspace(&truth.image, &truth.coils, &trajectory, &plan, &NoiseModel {
        sigma: noise_sigma,
        seed: cfg.noise.seed,
    })?;
    let (kspace, scale) = if cfg.normalize {
        percentile_normalize(&raw, &plan)?
    } else {
        (raw, 1.0)
    };
    let baseline = rss_combine(&zero_filled_coil_images(&kspace, &plan)?)?;
    Ok(Simulation {
        plan,
        kspace,
        trajectory,
        baseline,
        noise_sigma,
        scale,
    })
}

/// Coil maps normalized from the zero-filled measured data.
pub fn zero_filled_coils(sim: &Simulation) -> Result<CoilSet> {
    Ok(coil_normalize(&CoilSet::new(zero_filled_coil_images(&sim.kspace, &sim.plan)?)?))
}

pub fn reconstruct(cfg: &ExperimentConfig, sim: &Simulation, truth_coils: Option<&CoilSet>) -> Result<ReconResult> {
    let coils = if cfg.solver.estimate_coils {
        None
    } else {
        match cfg.fixed_coils {
            FixedCoils::Truth => Some(
                truth_coils
                    .ok_or_else(|| Error::InvalidArgument("fixed ground-truth coils requested but not available".into()))?
                    .clone(),
            ),
            FixedCoils::ZeroFilled => Some(zero_filled_coils(sim)?),
        }
    };
    run(&sim.kspace, &sim.plan, &cfg.solver, coils.as_ref())
}

/// Metrics of a reconstruction against the truth, with motion RMSE.
pub fn evaluate_run(truth: &Truth, sim: &Simulation, recon: &ReconResult, runtime_s: Option<f64>) -> Result<MetricsReport> {
    MetricsReport::compute(&truth.image, &recon.x, Some((&recon.v, &sim.trajectory)), runtime_s)
}
