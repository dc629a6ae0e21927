//! Image quality and motion accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionTrajectory;
use crate::volume::{percentile, ComplexVolume, RealVolume, Shape3};

const SSIM_WINDOW: usize = 7;

fn check_pair(a: &RealVolume, b: &RealVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `10 log10(range^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(reference: &RealVolume, test: &RealVolume, data_range: f64) -> Result<f64> {
    check_pair(reference, test)?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")));
    }
    let n = reference.data().len() as f64;
    let mse = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Summed-volume table with a zero border: `t[z][y][x]` is the sum over
/// `[0, z) x [0, y) x [0, x)`.
struct SummedVolume {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl SummedVolume {
    fn new(shape: Shape3, f: impl Fn(usize) -> f64) -> Self {
        let dims = [shape.nz + 1, shape.ny + 1, shape.nx + 1];
        let mut t = vec![0.0; dims[0] * dims[1] * dims[2]];
        let idx = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
        for z in 1..dims[0] {
            for y in 1..dims[1] {
                for x in 1..dims[2] {
                    let v = f(shape.index(z - 1, y - 1, x - 1));
                    t[idx(z, y, x)] = v + t[idx(z - 1, y, x)] + t[idx(z, y - 1, x)] + t[idx(z, y, x - 1)]
                        - t[idx(z - 1, y - 1, x)]
                        - t[idx(z - 1, y, x - 1)]
                        - t[idx(z, y - 1, x - 1)]
                        + t[idx(z - 1, y - 1, x - 1)];
                }
            }
        }
        Self { dims, t }
    }

    /// Sum over the cube `[z, z+w) x [y, y+w) x [x, x+w)`.
    fn window(&self, z: usize, y: usize, x: usize, w: usize) -> f64 {
        let d = self.dims;
        let at = |z: usize, y: usize, x: usize| self.t[(z * d[1] + y) * d[2] + x];
        let (z1, y1, x1) = (z + w, y + w, x + w);
        at(z1, y1, x1) - at(z, y1, x1) - at(z1, y, x1) - at(z1, y1, x) + at(z, y, x1) + at(z, y1, x) + at(z1, y, x)
            - at(z, y, x)
    }
}

/// SSIM term for one window from its first and second moments.
pub(crate) fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, data_range: f64) -> f64 {
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over all fully contained `7^3` uniform windows, using
/// population (1/N) moments.
pub fn ssim3d(reference: &RealVolume, test: &RealVolume, data_range: f64) -> Result<f64> {
    check_pair(reference, test)?;
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")));
    }
    let shape = reference.shape();
    let w = SSIM_WINDOW;
    if shape.dims().iter().any(|&n| n < w) {
        return Err(Error::InvalidArgument(format!("SSIM window {w}^3 does not fit in {shape}")));
    }
    let (a, b) = (reference.data(), test.data());
    let sx = SummedVolume::new(shape, |i| a[i]);
    let sy = SummedVolume::new(shape, |i| b[i]);
    let sxx = SummedVolume::new(shape, |i| a[i] * a[i]);
    let syy = SummedVolume::new(shape, |i| b[i] * b[i]);
    let sxy = SummedVolume::new(shape, |i| a[i] * b[i]);
    let n = (w * w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..=shape.nz - w {
        for y in 0..=shape.ny - w {
            for x in 0..=shape.nx - w {
                let mx = sx.window(z, y, x, w) / n;
                let my = sy.window(z, y, x, w) / n;
                let vx = sxx.window(z, y, x, w) / n - mx * mx;
                let vy = syy.window(z, y, x, w) / n - my * my;
                let cov = sxy.window(z, y, x, w) / n - mx * my;
                total += ssim_from_moments(mx, my, vx, vy, cov, data_range);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-component RMSE `[t_z, t_y, t_x, r_z, r_y, r_x]` after expressing both
/// trajectories relative to their first state.
pub fn motion_rmse(estimate: &MotionTrajectory, truth: &MotionTrajectory) -> Result<[f64; 6]> {
    if estimate.len() != truth.len() {
        return Err(Error::shape(format!("{} states", truth.len()), estimate.len()));
    }
    if estimate.is_empty() {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    let e0 = estimate.states[0].to_array();
    let t0 = truth.states[0].to_array();
    let mut acc = [0.0; 6];
    for (e, t) in estimate.states.iter().zip(&truth.states) {
        let (e, t) = (e.to_array(), t.to_array());
        for j in 0..6 {
            let d = (e[j] - e0[j]) - (t[j] - t0[j]);
            acc[j] += d * d;
        }
    }
    Ok(acc.map(|s| (s / estimate.len() as f64).sqrt()))
}

/// Evaluation percentile used for intensity scaling and the PSNR range.
pub const EVAL_PERCENTILE: f64 = 99.9;

/// Magnitude of `v` divided by its 99.9th percentile.
pub fn percentile_scaled_magnitude(v: &RealVolume) -> Result<RealVolume> {
    let p = percentile(v.data(), EVAL_PERCENTILE)?;
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::Normalization(format!("99.9th percentile of the magnitude is {p}")));
    }
    let mut out = v.clone();
    out.scale(1.0 / p);
    Ok(out)
}

/// PSNR and SSIM of magnitude images after scaling each to its 99.9th
/// percentile, so the data range is 1.
pub fn image_quality(reference: &RealVolume, test: &RealVolume) -> Result<(f64, f64)> {
    let r = percentile_scaled_magnitude(reference)?;
    let t = percentile_scaled_magnitude(test)?;
    Ok((psnr(&r, &t, 1.0)?, ssim3d(&r, &t, 1.0)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the volumes are identical (infinite PSNR).
    pub psnr_db: Option<f64>,
    pub psnr_infinite: bool,
    pub ssim: f64,
    /// `[t_z, t_y, t_x]` in mm and `[r_z, r_y, r_x]` in degrees.
    pub motion_rmse: Option<[f64; 6]>,
    pub runtime_s: Option<f64>,
}

impl MetricsReport {
    pub fn compute(
        reference: &ComplexVolume,
        recon: &ComplexVolume,
        motion: Option<(&MotionTrajectory, &MotionTrajectory)>,
        runtime_s: Option<f64>,
    ) -> Result<Self> {
        let (p, s) = image_quality(&reference.magnitude(), &recon.magnitude())?;
        let motion_rmse = motion.map(|(e, t)| motion_rmse(e, t)).transpose()?;
        Ok(Self {
            psnr_db: p.is_finite().then_some(p),
            psnr_infinite: p.is_infinite(),
            ssim: s,
            motion_rmse,
            runtime_s,
        })
    }

    pub fn psnr(&self) -> f64 {
        self.psnr_db.unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::MotionState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_real(shape: Shape3, seed: u64) -> RealVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealVolume::from_data(shape, [1.0; 3], (0..shape.len()).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn structured(shape: Shape3) -> RealVolume {
        let c = shape.center();
        let data = (0..shape.len())
            .map(|i| {
                let p = shape.coords(i);
                ((p[0] as f64 - c[0]) * 0.7).sin() + ((p[1] as f64 - c[1]) * 0.4).cos() * (p[2] as f64 * 0.3).sin()
            })
            .collect();
        RealVolume::from_data(shape, [1.0; 3], data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let shape = Shape3::cube(4);
        let a = rand_real(shape, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let off = a.with_data(a.data().iter().map(|v| v + 2.0).collect());
        assert!(psnr(&a, &off, 2.0).unwrap().abs() < 1e-12);
        let small = a.with_data(a.data().iter().map(|v| v + 0.01).collect());
        assert!((psnr(&a, &small, 1.0).unwrap() - 40.0).abs() < 1e-9);
        let b = rand_real(shape, 2);
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&a, &b, 0.8).unwrap() - 10.0 * (0.64 / mse).log10()).abs() < 1e-10);
    }

    #[test]
    fn psnr_decreases_with_error_scale() {
        let shape = Shape3::cube(5);
        let a = rand_real(shape, 3);
        let e = rand_real(shape, 4);
        let mut last = f64::INFINITY;
        for k in 1..6 {
            let t = a.with_data(a.data().iter().zip(e.data()).map(|(x, y)| x + 0.1 * k as f64 * y).collect());
            let p = psnr(&a, &t, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    fn brute_ssim(a: &RealVolume, b: &RealVolume, range: f64) -> f64 {
        let s = a.shape();
        let w = 7;
        let n = (w * w * w) as f64;
        let mut total = 0.0;
        let mut count = 0;
        for z in 0..=s.nz - w {
            for y in 0..=s.ny - w {
                for x in 0..=s.nx - w {
                    let mut vals = Vec::new();
                    for dz in 0..w {
                        for dy in 0..w {
                            for dx in 0..w {
                                vals.push((a.get(z + dz, y + dy, x + dx), b.get(z + dz, y + dy, x + dx)));
                            }
                        }
                    }
                    let mx = vals.iter().map(|v| v.0).sum::<f64>() / n;
                    let my = vals.iter().map(|v| v.1).sum::<f64>() / n;
                    let vx = vals.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>() / n;
                    let vy = vals.iter().map(|v| (v.1 - my).powi(2)).sum::<f64>() / n;
                    let cv = vals.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / n;
                    total += ssim_from_moments(mx, my, vx, vy, cv, range);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_brute_force() {
        let shape = Shape3::cube(12);
        let a = rand_real(shape, 5);
        let b = rand_real(shape, 6);
        assert!((ssim3d(&a, &b, 1.0).unwrap() - brute_ssim(&a, &b, 1.0)).abs() < 1e-10);
        let s = structured(shape);
        let t = s.with_data(s.data().iter().zip(a.data()).map(|(x, y)| x + 0.2 * y).collect());
        assert!((ssim3d(&s, &t, 2.0).unwrap() - brute_ssim(&s, &t, 2.0)).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_symmetry_and_sign() {
        let shape = Shape3::cube(9);
        let a = structured(shape);
        assert_eq!(ssim3d(&a, &a, 2.0).unwrap(), 1.0);
        let b = rand_real(shape, 7);
        assert!((ssim3d(&a, &b, 2.0).unwrap() - ssim3d(&b, &a, 2.0).unwrap()).abs() < 1e-14);
        assert!(ssim3d(&a, &b, 2.0).unwrap() < 1.0);
        let checker = a.with_data((0..shape.len()).map(|i| {
            let p = shape.coords(i);
            if (p[0] + p[1] + p[2]) % 2 == 0 { 1.0 } else { -1.0 }
        }).collect());
        let neg = checker.with_data(checker.data().iter().map(|v| -v).collect());
        assert!(ssim3d(&checker, &neg, 2.0).unwrap() < 0.0);
        assert!(ssim3d(&rand_real(Shape3::cube(6), 1), &rand_real(Shape3::cube(6), 2), 1.0).is_err());
    }

    #[test]
    fn motion_rmse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = MotionTrajectory::from_flat(&(0..48).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        assert_eq!(motion_rmse(&a, &a).unwrap(), [0.0; 6]);
        let shifted = MotionTrajectory::new(
            a.states
                .iter()
                .map(|s| MotionState::from_array(std::array::from_fn(|j| s.to_array()[j] + 1.5 * j as f64 - 2.0)))
                .collect(),
        );
        assert!(motion_rmse(&shifted, &a).unwrap().iter().all(|v| v.abs() < 1e-12));
        let b = MotionTrajectory::from_flat(&(0..48).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
        let got = motion_rmse(&a, &b).unwrap();
        let (fa, fb) = (a.to_flat(), b.to_flat());
        for j in 0..6 {
            let mut s = 0.0;
            for t in 0..8 {
                let d = (fa[t * 6 + j] - fa[j]) - (fb[t * 6 + j] - fb[j]);
                s += d * d;
            }
            assert!((got[j] - (s / 8.0).sqrt()).abs() < 1e-12);
        }
        assert!(motion_rmse(&a, &MotionTrajectory::zeros(3)).is_err());
    }

    #[test]
    fn report_flags_identical_volumes() {
        let shape = Shape3::cube(8);
        let v = structured(shape).to_complex();
        let r = MetricsReport::compute(&v, &v, None, None).unwrap();
        assert!(r.psnr_infinite);
        assert_eq!(r.ssim, 1.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
