//! Stages of an experiment run. Each stage reads its inputs from and writes
//! its outputs to the run directory, together with the resolved config and
//! a `checksums.json` of every artifact written so far.

pub mod config;
pub mod slices;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::info;
use mdps_core::acquisition::SamplingPlan;
use mdps_core::experiment::{self, ExperimentConfig, Simulation, Truth};
use mdps_core::io;
use mdps_core::metrics::{image_quality, MetricsReport};
use mdps_core::solver::ReconResult;
use mdps_core::{CoilSet, ComplexVolume, RealVolume};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const CHECKSUMS: &str = "checksums.json";
pub const TRUTH: &str = "truth.mdpsvol";
pub const TRUTH_COILS: &str = "coils_true.mdpsvol";
pub const KSPACE: &str = "kspace.mdpsksp";
pub const PLAN: &str = "plan.json";
pub const TRAJECTORY_TRUE: &str = "trajectory_true.csv";
pub const BASELINE: &str = "baseline_rss.mdpsvol";
pub const SIMULATION: &str = "simulation.json";
pub const RECON: &str = "recon.mdpsvol";
pub const RECON_COILS: &str = "coils_est.mdpsvol";
pub const TRAJECTORY_EST: &str = "trajectory_est.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const SUMMARY: &str = "recon_summary.json";
pub const METRICS: &str = "metrics.json";
pub const BASELINE_METRICS: &str = "baseline_metrics.json";
pub const SLICE_DIR: &str = "slices";

/// Outcome of a stage: the files it wrote and whether the solver finished
/// without failure flags.
#[derive(Debug, Default)]
pub struct StageOutcome {
    pub written: Vec<String>,
    pub clean: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct RunDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Self { dir, written: vec![] };
        run.write_bytes(RESOLVED_CONFIG, (serde_json::to_string_pretty(cfg)? + "\n").as_bytes())?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            bail!("missing input {}; run `mdps {stage}` first", p.display());
        }
        Ok(p)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}"))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write_bytes(name, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
    }

    fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    /// Adds the digests of this stage's files to `checksums.json`.
    fn finish(mut self, clean: bool) -> Result<StageOutcome> {
        let path = self.path(CHECKSUMS);
        let mut sums: BTreeMap<String, String> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => BTreeMap::new(),
        };
        for name in &self.written {
            let bytes = fs::read(self.path(name)).with_context(|| format!("reading back {name}"))?;
            sums.insert(name.clone(), sha256_hex(&bytes));
        }
        fs::write(&path, serde_json::to_string_pretty(&sums)? + "\n")?;
        self.written.push(CHECKSUMS.to_string());
        Ok(StageOutcome {
            written: self.written,
            clean,
        })
    }
}

pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let truth = experiment::make_truth(cfg)?;
    let mut run = RunDir::create(cfg)?;
    io::save_volume(&truth.image, run.path(TRUTH))?;
    run.record(TRUTH);
    io::save_volume_stack(truth.coils.maps(), run.path(TRUTH_COILS))?;
    run.record(TRUTH_COILS);
    info!("phantom {:?} with {} coils", truth.image.shape().dims(), truth.coils.num_coils());
    run.finish(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationInfo {
    pub noise_sigma: f64,
    pub scale: f64,
    pub num_times: usize,
    pub plan_id: String,
}

fn load_truth(run: &RunDir) -> Result<Truth> {
    let image = io::load_volume(run.input(TRUTH, "phantom")?)?;
    let coils = CoilSet::new(io::load_volume_stack(run.input(TRUTH_COILS, "phantom")?)?)?;
    Ok(Truth { image, coils })
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let mut run = RunDir::create(cfg)?;
    let truth = load_truth(&run)?;
    let sim = experiment::simulate(cfg, &truth)?;
    io::save_kspace(&sim.kspace, run.path(KSPACE))?;
    run.record(KSPACE);
    run.write_bytes(PLAN, sim.plan.to_json()?.as_bytes())?;
    io::save_trajectory(&sim.trajectory, run.path(TRAJECTORY_TRUE))?;
    run.record(TRAJECTORY_TRUE);
    io::save_volume(&sim.baseline.to_complex(), run.path(BASELINE))?;
    run.record(BASELINE);
    let info = SimulationInfo {
        noise_sigma: sim.noise_sigma,
        scale: sim.scale,
        num_times: sim.plan.num_times(),
        plan_id: sim.kspace.plan_id().to_string(),
    };
    run.write_json(SIMULATION, &info)?;
    info!("simulated {} motion states, noise sigma {:.3e}", info.num_times, info.noise_sigma);
    run.finish(true)
}

fn load_simulation(run: &RunDir) -> Result<Simulation> {
    let plan = SamplingPlan::from_json(&fs::read_to_string(run.input(PLAN, "simulate")?)?)?;
    let kspace = io::load_kspace(run.input(KSPACE, "simulate")?)?;
    let trajectory = io::load_trajectory(run.input(TRAJECTORY_TRUE, "simulate")?)?;
    let baseline = io::load_volume(run.input(BASELINE, "simulate")?)?.magnitude();
    let info: SimulationInfo = serde_json::from_str(&fs::read_to_string(run.input(SIMULATION, "simulate")?)?)?;
    Ok(Simulation {
        plan,
        kspace,
        trajectory,
        baseline,
        noise_sigma: info.noise_sigma,
        scale: info.scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub converged: bool,
    pub iterations: usize,
    pub backtracking_failures: usize,
    pub cg_failures: usize,
    pub all_rejected_events: usize,
    pub active: Vec<bool>,
}

impl ReconSummary {
    pub fn of(r: &ReconResult) -> Self {
        Self {
            converged: r.converged(),
            iterations: r.diagnostics.len(),
            backtracking_failures: r.backtracking_failures,
            cg_failures: r.cg_failures,
            all_rejected_events: r.all_rejected_events,
            active: r.active.clone(),
        }
    }
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let mut run = RunDir::create(cfg)?;
    let sim = load_simulation(&run)?;
    let truth = if run.path(TRUTH).is_file() && run.path(TRUTH_COILS).is_file() {
        Some(load_truth(&run)?)
    } else {
        None
    };
    let start = std::time::Instant::now();
    let recon = experiment::reconstruct(cfg, &sim, truth.as_ref().map(|t| &t.coils))?;
    info!("reconstruction took {:.1} s", start.elapsed().as_secs_f64());
    io::save_volume(&recon.x, run.path(RECON))?;
    run.record(RECON);
    io::save_volume_stack(recon.c.maps(), run.path(RECON_COILS))?;
    run.record(RECON_COILS);
    io::save_trajectory(&recon.v, run.path(TRAJECTORY_EST))?;
    run.record(TRAJECTORY_EST);
    recon.save_diagnostics(&run.path(DIAGNOSTICS))?;
    run.record(DIAGNOSTICS);
    let summary = ReconSummary::of(&recon);
    run.write_json(SUMMARY, &summary)?;
    if let Some(truth) = &truth {
        let report = experiment::evaluate_run(truth, &sim, &recon, None)?;
        log_report(&report);
        run.write_json(METRICS, &report)?;
    }
    run.finish(summary.converged)
}

fn log_report(r: &MetricsReport) {
    info!("PSNR {:.2} dB, SSIM {:.4}", r.psnr(), r.ssim);
    if let Some(m) = r.motion_rmse {
        info!("motion RMSE t[mm] {:.3?} r[deg] {:.3?}", &m[..3], &m[3..]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let mut run = RunDir::create(cfg)?;
    let truth = io::load_volume(run.input(TRUTH, "phantom")?)?;
    let recon = io::load_volume(run.input(RECON, "reconstruct")?)?;
    let estimate = io::load_trajectory(run.input(TRAJECTORY_EST, "reconstruct")?)?;
    let actual = io::load_trajectory(run.input(TRAJECTORY_TRUE, "simulate")?)?;
    let report = MetricsReport::compute(&truth, &recon, Some((&estimate, &actual)), None)?;
    log_report(&report);
    run.write_json(METRICS, &report)?;
    let baseline = io::load_volume(run.input(BASELINE, "simulate")?)?.magnitude();
    let (p, s) = image_quality(&truth.magnitude(), &baseline)?;
    run.write_json(BASELINE_METRICS, &BaselineMetrics {
        psnr_db: p.is_finite().then_some(p),
        ssim: s,
    })?;
    run.finish(true)
}

/// `|a - b|` after scaling each magnitude to its 99.9th percentile.
pub fn error_volume(reference: &ComplexVolume, recon: &ComplexVolume) -> Result<RealVolume> {
    use mdps_core::metrics::percentile_scaled_magnitude;
    let a = percentile_scaled_magnitude(&reference.magnitude())?;
    let b = percentile_scaled_magnitude(&recon.magnitude())?;
    if a.shape() != b.shape() {
        bail!("reference {:?} and reconstruction {:?} differ in shape", a.shape().dims(), b.shape().dims());
    }
    Ok(a.with_data(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect()))
}

pub fn cmd_export_slices(cfg: &ExperimentConfig) -> Result<StageOutcome> {
    let mut run = RunDir::create(cfg)?;
    let truth = io::load_volume(run.input(TRUTH, "phantom")?)?;
    let recon = io::load_volume(run.input(RECON, "reconstruct")?)?;
    let baseline = io::load_volume(run.input(BASELINE, "simulate")?)?.magnitude();
    let error = error_volume(&truth, &recon)?;
    let slice_dir = run.path(SLICE_DIR);
    fs::create_dir_all(&slice_dir)?;
    let sources = [
        ("truth", truth.magnitude()),
        ("recon", recon.magnitude()),
        ("baseline", baseline),
        ("error", error),
    ];
    for (name, vol) in &sources {
        for plane in slices::Plane::ALL {
            let s = slices::central_slice(vol, plane);
            let stem = format!("{name}_{}", plane.name());
            for f in slices::write_slice(&s, name, &slice_dir, &stem)? {
                run.record(&format!("{SLICE_DIR}/{f}"));
            }
        }
    }
    for name in [TRAJECTORY_TRUE, TRAJECTORY_EST] {
        let traj = io::load_trajectory(run.input(name, "reconstruct")?)?;
        let out = format!("{SLICE_DIR}/{name}");
        io::save_trajectory(&traj, run.path(&out))?;
        run.record(&out);
    }
    run.finish(true)
}
