//! Synthetic ground truth: ellipsoid phantoms and smooth coil maps.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::coil_normalize;
use crate::volume::{CoilSet, ComplexVolume, Shape3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// Voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub semi_axes: [f64; 3],
    /// Complex amplitude `[re, im]` added inside the ellipsoid.
    pub amplitude: [f64; 2],
}

/// Smooth phase `a0 + sum_k a_k u_k + sum_k b_k u_k^2` in radians, with
/// `u = (p - center) / n` per axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePolynomial {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: [f64; 3],
    #[serde(default)]
    pub quadratic: [f64; 3],
}

impl PhasePolynomial {
    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.linear == [0.0; 3] && self.quadratic == [0.0; 3]
    }

    fn eval(&self, shape: Shape3, p: [usize; 3]) -> f64 {
        let dims = shape.dims();
        let c = shape.center();
        let mut phase = self.constant;
        for k in 0..3 {
            let u = (p[k] as f64 - c[k]) / dims[k] as f64;
            phase += self.linear[k] * u + self.quadratic[k] * u * u;
        }
        phase
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: Shape3,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub ellipsoids: Vec<Ellipsoid>,
    #[serde(default)]
    pub phase: PhasePolynomial,
    #[serde(default)]
    pub seed: u64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PhantomSpec {
    /// A head-like arrangement: skull-like shell, brain body, ventricles and
    /// a few seeded lesions, with a gentle background phase.
    pub fn brain_like(shape: Shape3, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = shape.center();
        let d = shape.dims().map(|n| n as f64);
        let e = |off: [f64; 3], axes: [f64; 3], amp: f64| Ellipsoid {
            center: [c[0] + off[0] * d[0], c[1] + off[1] * d[1], c[2] + off[2] * d[2]],
            semi_axes: [axes[0] * d[0], axes[1] * d[1], axes[2] * d[2]],
            amplitude: [amp, 0.0],
        };
        let mut ellipsoids = vec![
            e([0.0, 0.0, 0.0], [0.36, 0.44, 0.30], 0.8),
            e([0.0, 0.0, 0.0], [0.32, 0.40, 0.26], -0.5),
            e([0.02, -0.03, 0.0], [0.27, 0.34, 0.22], 0.4),
            e([0.04, 0.06, -0.07], [0.07, 0.15, 0.04], -0.35),
            e([0.04, 0.06, 0.06], [0.06, 0.13, 0.04], -0.35),
            e([-0.13, -0.12, 0.03], [0.05, 0.07, 0.12], 0.25),
            e([0.12, -0.22, -0.06], [0.07, 0.05, 0.06], 0.3),
        ];
        for _ in 0..8 {
            let off = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.2..0.2), rng.gen_range(-0.14..0.14)];
            let r = rng.gen_range(0.04..0.07);
            let amp = rng.gen_range(0.15..0.35) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            ellipsoids.push(e(off, [r, r * rng.gen_range(0.8..1.25), r], amp));
        }
        let phase = PhasePolynomial {
            constant: rng.gen_range(-0.5..0.5),
            linear: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            quadratic: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        };
        Self {
            shape,
            spacing: [1.0; 3],
            ellipsoids,
            phase,
            seed,
        }
    }
}

/// Separable Gaussian blur with standard deviation of one voxel and zero
/// padding.
fn gaussian_blur(data: &mut [Complex64], shape: Shape3) {
    let radius = 3isize;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let dims = shape.dims();
    for axis in 0..3 {
        let n = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                for (k, l) in line.iter_mut().enumerate() {
                    *l = data[at(k)];
                }
                for k in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (w, off) in kernel.iter().zip(-radius..=radius) {
                        let j = k as isize + off;
                        if j >= 0 && (j as usize) < n {
                            acc += line[j as usize] * w;
                        }
                    }
                    data[at(k)] = acc;
                }
            }
        }
    }
}

/// Sum of ellipsoid indicators, blurred by a one-voxel Gaussian, times
/// `exp(i phase)`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<ComplexVolume> {
    let shape = spec.shape;
    if shape.is_empty() {
        return Err(Error::InvalidArgument("phantom shape must be positive".into()));
    }
    let dims = shape.dims();
    for (i, e) in spec.ellipsoids.iter().enumerate() {
        for k in 0..3 {
            let (lo, hi) = (e.center[k] - e.semi_axes[k], e.center[k] + e.semi_axes[k]);
            if !(e.semi_axes[k] > 0.0) || lo < -0.5 || hi > dims[k] as f64 - 0.5 {
                return Err(Error::InvalidArgument(format!(
                    "ellipsoid {i} spans [{lo}, {hi}] on axis {k}, outside the {} voxel grid",
                    dims[k]
                )));
            }
        }
    }
    let mut vol = ComplexVolume::zeros(shape, spec.spacing);
    {
        let data = vol.data_mut();
        for e in &spec.ellipsoids {
            let amp = Complex64::new(e.amplitude[0], e.amplitude[1]);
            for (i, v) in data.iter_mut().enumerate() {
                let p = shape.coords(i);
                let r: f64 = (0..3)
                    .map(|k| ((p[k] as f64 - e.center[k]) / e.semi_axes[k]).powi(2))
                    .sum();
                if r <= 1.0 {
                    *v += amp;
                }
            }
        }
        gaussian_blur(data, shape);
    }
    if !spec.phase.is_zero() {
        let data = vol.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= Complex64::from_polar(1.0, spec.phase.eval(shape, shape.coords(i)));
        }
    }
    Ok(vol)
}

/// `C` smooth coil maps: Gaussian bumps centered just outside the volume on
/// a ring around the `z` axis, each with its own linear phase, normalized to
/// unit root sum-of-squares.
pub fn make_synthetic_coils(shape: Shape3, spacing: [f64; 3], num_coils: usize, seed: u64) -> Result<CoilSet> {
    if num_coils == 0 {
        return Err(Error::InvalidArgument("need at least one coil".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = shape.center();
    let d = shape.dims().map(|n| n as f64);
    let maps = (0..num_coils)
        .map(|j| {
            let angle = 2.0 * PI * j as f64 / num_coils as f64 + rng.gen_range(-0.1..0.1);
            let z_off = if num_coils > 2 { if j % 2 == 0 { 0.15 } else { -0.15 } } else { 0.0 };
            let q = [
                c[0] + z_off * d[0],
                c[1] + 0.65 * d[1] * angle.sin(),
                c[2] + 0.65 * d[2] * angle.cos(),
            ];
            let width = 0.55 * d.iter().cloned().fold(0.0, f64::max);
            let phase0 = rng.gen_range(-PI..PI);
            let slope: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
            ComplexVolume::from_fn(shape, spacing, |z, y, x| {
                let p = [z as f64, y as f64, x as f64];
                let r2: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
                let phase = phase0 + (0..3).map(|k| slope[k] * (p[k] - c[k]) / d[k]).sum::<f64>();
                Complex64::from_polar((-r2 / (2.0 * width * width)).exp(), phase)
            })
        })
        .collect();
    Ok(coil_normalize(&CoilSet::new(maps)?))
}
