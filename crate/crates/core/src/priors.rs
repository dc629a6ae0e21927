//! Score priors for the image, and the coil and motion regularizers with
//! their proximal operators.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{second_difference, MotionTrajectory};
use crate::transforms::{dirichlet_laplacian_eigenvalues, dst3, fft3, idst3, ifft3, periodic_laplacian_eigenvalues};
use crate::volume::{CoilSet, ComplexVolume, RealVolume};

/// A denoiser `D(x, sigma)` together with the transpose of its Jacobian.
pub trait ScorePrior: Send + Sync {
    fn denoise(&self, x: &ComplexVolume, sigma: f64) -> ComplexVolume;

    /// `J^T u` with `J` the Jacobian of [`ScorePrior::denoise`] at `(x, sigma)`.
    fn vjp(&self, x: &ComplexVolume, sigma: f64, u: &ComplexVolume) -> ComplexVolume;

    fn name(&self) -> &'static str;
}

/// `D(x, sigma) = x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPrior;

impl ScorePrior for IdentityPrior {
    fn denoise(&self, x: &ComplexVolume, _sigma: f64) -> ComplexVolume {
        x.clone()
    }

    fn vjp(&self, _x: &ComplexVolume, _sigma: f64, u: &ComplexVolume) -> ComplexVolume {
        u.clone()
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// Gaussian smoothness prior with precision `lambda * L_per`.
///
/// Its MMSE denoiser is `(I + sigma^2 lambda L_per)^-1`, applied diagonally
/// in the centered DFT basis. The map is linear and self-adjoint.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticScorePrior {
    pub lambda: f64,
}

impl QuadraticScorePrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    fn filter(&self, x: &ComplexVolume, sigma: f64) -> ComplexVolume {
        if self.lambda == 0.0 {
            return x.clone();
        }
        let eig = periodic_laplacian_eigenvalues(x.shape());
        let s = sigma * sigma * self.lambda;
        let mut spec = fft3(x);
        for (v, mu) in spec.data_mut().iter_mut().zip(eig.data()) {
            *v /= 1.0 + s * mu;
        }
        ifft3(&spec)
    }
}

impl ScorePrior for QuadraticScorePrior {
    fn denoise(&self, x: &ComplexVolume, sigma: f64) -> ComplexVolume {
        self.filter(x, sigma)
    }

    fn vjp(&self, _x: &ComplexVolume, sigma: f64, u: &ComplexVolume) -> ComplexVolume {
        self.filter(u, sigma)
    }

    fn name(&self) -> &'static str {
        "quadratic"
    }
}

/// `(D(x, sigma) - x) / sigma^2`
pub fn tweedie_score(prior: &dyn ScorePrior, x: &ComplexVolume, sigma: f64) -> Result<ComplexVolume> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut s = prior.denoise(x, sigma).sub(x);
    s.scale(1.0 / (sigma * sigma));
    Ok(s)
}

/// `||D u||^2` for the forward-difference gradient with zero padding on
/// every face.
fn dirichlet_gradient_sq(u: &[f64], dims: [usize; 3]) -> f64 {
    let mut total = 0.0;
    for axis in 0..3 {
        let n = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| u[(o * n + k) * inner + i];
                let mut prev = 0.0;
                for k in 0..n {
                    let cur = at(k);
                    total += (cur - prev) * (cur - prev);
                    prev = cur;
                }
                total += prev * prev;
            }
        }
    }
    total
}

/// `(gamma / 2) sum_j ||D Re c_j||^2 + ||D Im c_j||^2` with Dirichlet boundaries.
pub fn coil_reg_value(c: &CoilSet, gamma: f64) -> f64 {
    let dims = c.shape().dims();
    let sum: f64 = c
        .maps()
        .iter()
        .map(|m| {
            let re: Vec<f64> = m.data().iter().map(|v| v.re).collect();
            let im: Vec<f64> = m.data().iter().map(|v| v.im).collect();
            dirichlet_gradient_sq(&re, dims) + dirichlet_gradient_sq(&im, dims)
        })
        .sum();
    0.5 * gamma * sum
}

/// Solves `(gamma D^T D + L I) u = L w` for every coil and for the real and
/// imaginary parts separately, in closed form through the DST-I.
pub fn coil_prox(w: &CoilSet, gamma: f64, l: f64) -> Result<CoilSet> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidArgument(format!("step constant must be positive, got {l}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(w.clone());
    }
    let shape = w.shape();
    let eig = dirichlet_laplacian_eigenvalues(shape);
    let gain: Vec<f64> = eig.data().iter().map(|lam| l / (gamma * lam + l)).collect();
    let solve = |part: RealVolume| -> RealVolume {
        let mut spec = dst3(&part);
        for (s, g) in spec.data_mut().iter_mut().zip(&gain) {
            *s *= g;
        }
        idst3(&spec)
    };
    let maps: Vec<ComplexVolume> = w
        .maps()
        .par_iter()
        .map(|m| {
            let re = solve(m.real_part());
            let im = solve(m.imag_part());
            ComplexVolume::from_parts(&re, &im)
        })
        .collect();
    CoilSet::new(maps)
}

/// Divide every map by the root sum-of-squares over coils; voxels where all
/// coils vanish stay zero.
pub fn coil_normalize(c: &CoilSet) -> CoilSet {
    let norm = c.sum_of_squares();
    let maps = c
        .maps()
        .iter()
        .map(|m| {
            let data = m
                .data()
                .iter()
                .zip(norm.data())
                .map(|(v, s)| if *s > 0.0 { v / s.sqrt() } else { Complex64::new(0.0, 0.0) })
                .collect();
            m.with_data(data)
        })
        .collect();
    CoilSet::new(maps).expect("same geometry as input")
}

/// Curvature penalty weights for rotations and translations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionWeights {
    pub eta_r: f64,
    pub eta_t: f64,
}

impl MotionWeights {
    pub fn new(eta_r: f64, eta_t: f64) -> Result<Self> {
        if !(eta_r >= 0.0 && eta_t >= 0.0 && eta_r.is_finite() && eta_t.is_finite()) {
            return Err(Error::InvalidArgument("motion weights must be finite and >= 0".into()));
        }
        Ok(Self { eta_r, eta_t })
    }

    pub fn component(&self, j: usize) -> f64 {
        if j < 3 {
            self.eta_t
        } else {
            self.eta_r
        }
    }

    pub fn is_zero(&self) -> bool {
        self.eta_r == 0.0 && self.eta_t == 0.0
    }
}

/// `(1/2) sum_t sum_j eta_j (v_{t+1} - 2 v_t + v_{t-1})_j^2`
pub fn motion_reg_value(v: &MotionTrajectory, weights: MotionWeights) -> f64 {
    0.5 * second_difference(v)
        .iter()
        .map(|row| (0..6).map(|j| weights.component(j) * row[j] * row[j]).sum::<f64>())
        .sum::<f64>()
}

/// `(L^T H L) v` on the flat `6T` layout, `H` the per-component weights.
fn apply_regularizer(v: &[f64], weights: MotionWeights, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let t = v.len() / 6;
    if t < 3 {
        return;
    }
    for s in 1..t - 1 {
        for j in 0..6 {
            let d = weights.component(j) * (v[(s + 1) * 6 + j] - 2.0 * v[s * 6 + j] + v[(s - 1) * 6 + j]);
            out[(s - 1) * 6 + j] += d;
            out[s * 6 + j] -= 2.0 * d;
            out[(s + 1) * 6 + j] += d;
        }
    }
}

/// Output of [`motion_prox`].
#[derive(Clone, Debug)]
pub struct MotionProxResult {
    pub v: MotionTrajectory,
    pub converged: bool,
    pub iterations: usize,
    /// Final relative residual of the normal equations.
    pub relative_residual: f64,
}

/// Diagonal of `L^T H L` on the flat `6T` layout.
fn regularizer_diagonal(t: usize, weights: MotionWeights) -> Vec<f64> {
    let mut d = vec![0.0; 6 * t];
    if t < 3 {
        return d;
    }
    for s in 1..t - 1 {
        for j in 0..6 {
            let w = weights.component(j);
            d[(s - 1) * 6 + j] += w;
            d[s * 6 + j] += 4.0 * w;
            d[(s + 1) * 6 + j] += w;
        }
    }
    d
}

/// `argmin_v R(v) + (1/2) ||v - w||_P^2`, i.e. `(L^T H L + P) v = P w`,
/// by Jacobi-preconditioned conjugate gradients started at `w`. Returns the
/// iterate with the smallest residual when the tolerance is not met.
pub fn motion_prox(
    w: &MotionTrajectory,
    weights: MotionWeights,
    p: &[f64],
    cg_tol: f64,
    cg_max_iter: usize,
) -> Result<MotionProxResult> {
    motion_prox_held(w, weights, p, &vec![false; w.len()], cg_tol, cg_max_iter)
}

/// [`motion_prox`] restricted to the states with `held[t] == false`; held
/// states keep their value from `w`.
pub fn motion_prox_held(
    w: &MotionTrajectory,
    weights: MotionWeights,
    p: &[f64],
    held: &[bool],
    cg_tol: f64,
    cg_max_iter: usize,
) -> Result<MotionProxResult> {
    let n = w.len() * 6;
    if held.len() != w.len() {
        return Err(Error::shape(format!("{} held flags", w.len()), held.len()));
    }
    let fixed: Vec<bool> = held.iter().flat_map(|&h| [h; 6]).collect();
    if p.len() != n {
        return Err(Error::shape(format!("{n} preconditioner entries"), p.len()));
    }
    if p.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument("preconditioner must be strictly positive".into()));
    }
    let w_flat = w.to_flat();
    let b: Vec<f64> = w_flat
        .iter()
        .zip(p)
        .zip(&fixed)
        .map(|((a, d), &f)| if f { 0.0 } else { a * d })
        .collect();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let apply = |x: &[f64], out: &mut [f64]| {
        apply_regularizer(x, weights, out);
        for ((o, xi), d) in out.iter_mut().zip(x).zip(p) {
            *o += d * xi;
        }
        for (o, &f) in out.iter_mut().zip(&fixed) {
            if f {
                *o = 0.0;
            }
        }
    };
    let inv_diag: Vec<f64> = regularizer_diagonal(w.len(), weights)
        .iter()
        .zip(p)
        .zip(&fixed)
        .map(|((r, d), &f)| if f { 0.0 } else { 1.0 / (r + d) })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = w_flat;
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
    let rel = |r: &[f64]| {
        let rn = dot(r, r).sqrt();
        if b_norm > 0.0 {
            rn / b_norm
        } else {
            rn
        }
    };
    let mut best = (rel(&r), x.clone());
    let mut iterations = 0;
    if best.0 > cg_tol {
        let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
        let mut d = zv.clone();
        let mut rz = dot(&r, &zv);
        let mut ad = vec![0.0; n];
        while iterations < cg_max_iter {
            apply(&d, &mut ad);
            let dad = dot(&d, &ad);
            if !(dad > 0.0) {
                break;
            }
            let alpha = rz / dad;
            for i in 0..n {
                x[i] += alpha * d[i];
                r[i] -= alpha * ad[i];
            }
            iterations += 1;
            let res = rel(&r);
            if res < best.0 {
                best = (res, x.clone());
            }
            if res <= cg_tol {
                break;
            }
            for i in 0..n {
                zv[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &zv);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                d[i] = zv[i] + beta * d[i];
            }
        }
    }
    let (relative_residual, x) = best;
    Ok(MotionProxResult {
        v: MotionTrajectory::from_flat(&x),
        converged: relative_residual <= cg_tol,
        iterations,
        relative_residual,
    })
}

/// The objective minimized by [`motion_prox`].
pub fn motion_prox_objective(v: &MotionTrajectory, w: &MotionTrajectory, weights: MotionWeights, p: &[f64]) -> f64 {
    let fit: f64 = v
        .to_flat()
        .iter()
        .zip(w.to_flat())
        .zip(p)
        .map(|((a, b), d)| d * (a - b) * (a - b))
        .sum();
    motion_reg_value(v, weights) + 0.5 * fit
}
