//! Rigid motion: parameterization, trilinear pull-back warping with exact
//! derivatives, and smooth trajectory simulation.
//!
//! A [`MotionState`] `s` maps a reference position to its moved position
//! `p' = R (p - c) + c + t` (in millimetres about the volume center `c`).
//! [`warp`] pulls the reference image back through that map, so
//! `warp(x, s)(p') = x(p)`: the output is the reference object after it has
//! moved by `s`. The rotation is intrinsic Z-Y-X, `R = Rz(r_z) Ry(r_y) Rx(r_x)`,
//! with axes listed in `(z, y, x)` storage order.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ComplexVolume, Shape3};

pub type Mat3 = [[f64; 3]; 3];
/// Affine map in voxel coordinates: `q = m[..][0..3] * p + m[..][3]`.
pub type Affine = [[f64; 4]; 3];

/// Six rigid-body parameters. Translations in mm, rotations in degrees,
/// both listed in `(z, y, x)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionState {
    pub translation_mm: [f64; 3],
    pub rotation_deg: [f64; 3],
}

impl MotionState {
    pub const ZERO: MotionState = MotionState {
        translation_mm: [0.0; 3],
        rotation_deg: [0.0; 3],
    };

    pub fn new(translation_mm: [f64; 3], rotation_deg: [f64; 3]) -> Self {
        Self {
            translation_mm,
            rotation_deg,
        }
    }

    /// `[t_z, t_y, t_x, r_z, r_y, r_x]`
    pub fn to_array(&self) -> [f64; 6] {
        let [tz, ty, tx] = self.translation_mm;
        let [rz, ry, rx] = self.rotation_deg;
        [tz, ty, tx, rz, ry, rx]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            translation_mm: [a[0], a[1], a[2]],
            rotation_deg: [a[3], a[4], a[5]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|&v| v == 0.0)
    }
}

/// Ordered sequence of motion states, one per time point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub states: Vec<MotionState>,
}

impl MotionTrajectory {
    pub fn new(states: Vec<MotionState>) -> Self {
        Self { states }
    }

    pub fn zeros(t: usize) -> Self {
        Self {
            states: vec![MotionState::ZERO; t],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Flat `6T` vector, state-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| s.to_array()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 6, 0);
        Self {
            states: flat
                .chunks_exact(6)
                .map(|c| MotionState::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|s| s.is_finite())
    }
}

/// Motion amplitude bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityLevel {
    pub max_translation_mm: f64,
    pub max_rotation_deg: f64,
}

impl SeverityLevel {
    pub fn new(max_translation_mm: f64, max_rotation_deg: f64) -> Result<Self> {
        if max_translation_mm < 0.0 || max_rotation_deg < 0.0 {
            return Err(Error::InvalidArgument("severity bounds must be nonnegative".into()));
        }
        Ok(Self {
            max_translation_mm,
            max_rotation_deg,
        })
    }

    pub const fn mild() -> Self {
        Self {
            max_translation_mm: 3.0,
            max_rotation_deg: 5.0,
        }
    }

    pub const fn moderate() -> Self {
        Self {
            max_translation_mm: 6.0,
            max_rotation_deg: 10.0,
        }
    }

    pub const fn severe() -> Self {
        Self {
            max_translation_mm: 9.0,
            max_rotation_deg: 15.0,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            max_translation_mm: self.max_translation_mm * factor,
            max_rotation_deg: self.max_rotation_deg * factor,
        }
    }

    /// Bound for parameter `j` of `[t_z, t_y, t_x, r_z, r_y, r_x]`.
    pub fn bound(&self, j: usize) -> f64 {
        if j < 3 {
            self.max_translation_mm
        } else {
            self.max_rotation_deg
        }
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90 degrees.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        (deg * PI / 180.0).sin_cos()
    }
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Elementary rotations and their angle derivatives, in `(z, y, x)` order.
fn rot_z(s: f64, c: f64) -> (Mat3, Mat3) {
    (
        [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]],
        [[0.0, 0.0, 0.0], [0.0, -s, c], [0.0, -c, -s]],
    )
}

fn rot_y(s: f64, c: f64) -> (Mat3, Mat3) {
    (
        [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]],
        [[-s, 0.0, -c], [0.0, 0.0, 0.0], [c, 0.0, -s]],
    )
}

fn rot_x(s: f64, c: f64) -> (Mat3, Mat3) {
    (
        [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

/// Rotation matrix (in `(z, y, x)` order) and its derivatives with respect to
/// `r_z, r_y, r_x` in radians.
pub fn rotation_with_derivatives(rotation_deg: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let (sz, cz) = sin_cos_deg(rotation_deg[0]);
    let (sy, cy) = sin_cos_deg(rotation_deg[1]);
    let (sx, cx) = sin_cos_deg(rotation_deg[2]);
    let (rz, dz) = rot_z(sz, cz);
    let (ry, dy) = rot_y(sy, cy);
    let (rx, dx) = rot_x(sx, cx);
    let r = matmul(&matmul(&rz, &ry), &rx);
    let d_z = matmul(&matmul(&dz, &ry), &rx);
    let d_y = matmul(&matmul(&rz, &dy), &rx);
    let d_x = matmul(&matmul(&rz, &ry), &dx);
    (r, [d_z, d_y, d_x])
}

pub fn rotation_matrix(rotation_deg: [f64; 3]) -> Mat3 {
    rotation_with_derivatives(rotation_deg).0
}

/// Homogeneous 4x4 matrix of the forward rigid map in voxel coordinates:
/// rotation about the volume center followed by the translation (mm
/// converted to voxels through `spacing`).
pub fn se3_matrix(s: &MotionState, shape: Shape3, spacing: [f64; 3]) -> [[f64; 4]; 4] {
    let r = rotation_matrix(s.rotation_deg);
    let c = shape.center();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * spacing[j] / spacing[i];
        }
        let ac: f64 = (0..3).map(|j| m[i][j] * c[j]).sum();
        m[i][3] = c[i] - ac + s.translation_mm[i] / spacing[i];
    }
    m[3][3] = 1.0;
    m
}

/// Inverse map `q(p)` used by the pull-back, plus its derivatives with
/// respect to the six parameters (translations per mm, rotations per degree).
fn inverse_affine_with_derivatives(
    s: &MotionState,
    shape: Shape3,
    spacing: [f64; 3],
) -> (Affine, [Affine; 6]) {
    let (r, dr) = rotation_with_derivatives(s.rotation_deg);
    let rt = transpose(&r);
    let c = shape.center();
    let t = s.translation_mm;

    // A = S^-1 R^T S, b = c - A c - S^-1 R^T t
    let build = |rt: &Mat3, t: [f64; 3], with_center: bool| -> Affine {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rt[i][j] * spacing[j] / spacing[i];
            }
            let ac: f64 = (0..3).map(|j| m[i][j] * c[j]).sum();
            let rtt: f64 = (0..3).map(|j| rt[i][j] * t[j]).sum::<f64>() / spacing[i];
            m[i][3] = if with_center { c[i] - ac - rtt } else { -ac - rtt };
        }
        m
    };
    let minv = build(&rt, t, true);

    let mut d = [[[0.0; 4]; 3]; 6];
    for k in 0..3 {
        // d q / d t_k = -S^-1 R^T e_k
        for i in 0..3 {
            d[k][i][3] = -rt[i][k] / spacing[i];
        }
    }
    let deg = PI / 180.0;
    for k in 0..3 {
        let mut drt = transpose(&dr[k]);
        drt.iter_mut().flatten().for_each(|v| *v *= deg);
        d[3 + k] = build(&drt, t, false);
    }
    (minv, d)
}

#[inline]
fn apply_affine(m: &Affine, p: [f64; 3]) -> [f64; 3] {
    let mut q = [0.0; 3];
    for i in 0..3 {
        q[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    q
}

#[inline]
fn fetch(data: &[Complex64], shape: Shape3, z: isize, y: isize, x: isize) -> Complex64 {
    if z < 0 || y < 0 || x < 0 || z as usize >= shape.nz || y as usize >= shape.ny || x as usize >= shape.nx {
        Complex64::new(0.0, 0.0)
    } else {
        data[shape.index(z as usize, y as usize, x as usize)]
    }
}

/// Trilinear stencil of one sample location: base corner and fractions.
#[derive(Clone, Copy)]
struct Stencil {
    base: [isize; 3],
    frac: [f64; 3],
}

impl Stencil {
    fn at(q: [f64; 3]) -> Self {
        let fl = [q[0].floor(), q[1].floor(), q[2].floor()];
        Self {
            base: [fl[0] as isize, fl[1] as isize, fl[2] as isize],
            frac: [q[0] - fl[0], q[1] - fl[1], q[2] - fl[2]],
        }
    }

    fn value(&self, data: &[Complex64], shape: Shape3) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - self.frac[0] } else { self.frac[0] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - self.frac[1] } else { self.frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - self.frac[2] } else { self.frac[2] };
                    if wx == 0.0 {
                        continue;
                    }
                    acc += fetch(
                        data,
                        shape,
                        self.base[0] + dz,
                        self.base[1] + dy,
                        self.base[2] + dx,
                    ) * (wz * wy * wx);
                }
            }
        }
        acc
    }

    /// Spatial gradient of the trilinear interpolant inside this cell.
    fn cell_gradient(&self, data: &[Complex64], shape: Shape3) -> [Complex64; 3] {
        let mut g = [Complex64::new(0.0, 0.0); 3];
        let f = self.frac;
        for dz in 0..2 {
            let (wz, sz) = if dz == 0 { (1.0 - f[0], -1.0) } else { (f[0], 1.0) };
            for dy in 0..2 {
                let (wy, sy) = if dy == 0 { (1.0 - f[1], -1.0) } else { (f[1], 1.0) };
                for dx in 0..2 {
                    let (wx, sx) = if dx == 0 { (1.0 - f[2], -1.0) } else { (f[2], 1.0) };
                    let v = fetch(
                        data,
                        shape,
                        self.base[0] + dz,
                        self.base[1] + dy,
                        self.base[2] + dx,
                    );
                    g[0] += v * (sz * wy * wx);
                    g[1] += v * (wz * sy * wx);
                    g[2] += v * (wz * wy * sx);
                }
            }
        }
        g
    }

    /// Gradient of the interpolant at the sample. On a cell face (zero
    /// fraction along an axis) the interpolant has a kink; there the two
    /// one-sided derivatives are averaged, which is what a central
    /// difference in the motion parameters converges to.
    fn gradient(&self, data: &[Complex64], shape: Shape3) -> [Complex64; 3] {
        let on_face: Vec<usize> = (0..3).filter(|&a| self.frac[a] == 0.0).collect();
        if on_face.is_empty() {
            return self.cell_gradient(data, shape);
        }
        let combos = 1usize << on_face.len();
        let mut g = [Complex64::new(0.0, 0.0); 3];
        for mask in 0..combos {
            let mut st = *self;
            for (bit, &axis) in on_face.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    st.base[axis] -= 1;
                    st.frac[axis] = 1.0;
                }
            }
            let cg = st.cell_gradient(data, shape);
            for a in 0..3 {
                g[a] += cg[a];
            }
        }
        let w = 1.0 / combos as f64;
        g.map(|v| v * w)
    }

    fn scatter(&self, out: &mut [Complex64], shape: Shape3, value: Complex64) {
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - self.frac[0] } else { self.frac[0] };
            let z = self.base[0] + dz;
            if wz == 0.0 || z < 0 || z as usize >= shape.nz {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - self.frac[1] } else { self.frac[1] };
                let y = self.base[1] + dy;
                if wy == 0.0 || y < 0 || y as usize >= shape.ny {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - self.frac[2] } else { self.frac[2] };
                    let x = self.base[2] + dx;
                    if wx == 0.0 || x < 0 || x as usize >= shape.nx {
                        continue;
                    }
                    out[shape.index(z as usize, y as usize, x as usize)] += value * (wz * wy * wx);
                }
            }
        }
    }
}

fn for_each_voxel(shape: Shape3, mut f: impl FnMut(usize, [f64; 3])) {
    let mut i = 0;
    for z in 0..shape.nz {
        for y in 0..shape.ny {
            for x in 0..shape.nx {
                f(i, [z as f64, y as f64, x as f64]);
                i += 1;
            }
        }
    }
}

/// Pull-back resampling of `x` through the rigid map `s`. Samples falling
/// outside the grid read as zero.
pub fn warp(x: &ComplexVolume, s: &MotionState) -> ComplexVolume {
    if s.is_zero() {
        return x.clone();
    }
    let shape = x.shape();
    let (minv, _) = inverse_affine_with_derivatives(s, shape, x.spacing());
    let data = x.data();
    let mut out = vec![Complex64::new(0.0, 0.0); shape.len()];
    for_each_voxel(shape, |i, p| {
        out[i] = Stencil::at(apply_affine(&minv, p)).value(data, shape);
    });
    x.with_data(out)
}

/// Transpose of the interpolation stencil of [`warp`] applied to `u`.
pub fn warp_adjoint(u: &ComplexVolume, s: &MotionState) -> ComplexVolume {
    if s.is_zero() {
        return u.clone();
    }
    let shape = u.shape();
    let (minv, _) = inverse_affine_with_derivatives(s, shape, u.spacing());
    let src = u.data();
    let mut out = vec![Complex64::new(0.0, 0.0); shape.len()];
    for_each_voxel(shape, |i, p| {
        Stencil::at(apply_affine(&minv, p)).scatter(&mut out, shape, src[i]);
    });
    u.with_data(out)
}

/// Gradient of `Re <u, warp(x, s)>` with respect to the six motion
/// parameters (per mm and per degree).
pub fn warp_motion_gradient(x: &ComplexVolume, s: &MotionState, u: &ComplexVolume) -> [f64; 6] {
    let shape = x.shape();
    let (minv, dm) = inverse_affine_with_derivatives(s, shape, x.spacing());
    let data = x.data();
    let cot = u.data();
    // g[a][b] = sum_p Re(conj(u_p) dI/dq_a) * [p, 1]_b
    let mut g = [[0.0; 4]; 3];
    for_each_voxel(shape, |i, p| {
        let uc = cot[i];
        if uc.re == 0.0 && uc.im == 0.0 {
            return;
        }
        let grad = Stencil::at(apply_affine(&minv, p)).gradient(data, shape);
        for a in 0..3 {
            let w = (uc.conj() * grad[a]).re;
            g[a][0] += w * p[0];
            g[a][1] += w * p[1];
            g[a][2] += w * p[2];
            g[a][3] += w;
        }
    });
    let mut out = [0.0; 6];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (0..3)
            .map(|a| (0..4).map(|b| g[a][b] * dm[j][a][b]).sum::<f64>())
            .sum();
    }
    out
}

/// Vector-Jacobian product of [`warp`] at `(x, s)`: the adjoint of the
/// linearization applied to `cotangent`.
pub fn warp_vjp(
    x: &ComplexVolume,
    s: &MotionState,
    cotangent: &ComplexVolume,
) -> (ComplexVolume, [f64; 6]) {
    (warp_adjoint(cotangent, s), warp_motion_gradient(x, s, cotangent))
}

/// Jacobian-vector product of [`warp`] at `(x, s)` along `(dx, ds)`.
pub fn warp_jvp(x: &ComplexVolume, s: &MotionState, dx: &ComplexVolume, ds: [f64; 6]) -> ComplexVolume {
    let shape = x.shape();
    let (minv, dm) = inverse_affine_with_derivatives(s, shape, x.spacing());
    let mut out = warp(dx, s);
    let mut dq_map = [[0.0; 4]; 3];
    for j in 0..6 {
        for a in 0..3 {
            for b in 0..4 {
                dq_map[a][b] += ds[j] * dm[j][a][b];
            }
        }
    }
    let data = x.data();
    let o = out.data_mut();
    for_each_voxel(shape, |i, p| {
        let grad = Stencil::at(apply_affine(&minv, p)).gradient(data, shape);
        let dq = apply_affine(&dq_map, p);
        o[i] += grad[0] * dq[0] + grad[1] * dq[1] + grad[2] * dq[2];
    });
    out
}

/// Rows `v_{t+1} - 2 v_t + v_{t-1}` for `t = 1..T-2`. Empty when `T < 3`.
pub fn second_difference(v: &MotionTrajectory) -> Vec<[f64; 6]> {
    if v.len() < 3 {
        return Vec::new();
    }
    v.states
        .windows(3)
        .map(|w| {
            let (a, b, c) = (w[0].to_array(), w[1].to_array(), w[2].to_array());
            std::array::from_fn(|j| c[j] - 2.0 * b[j] + a[j])
        })
        .collect()
}

/// Options for [`simulate_gp_trajectory`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpOptions {
    /// RBF lengthscale in time-index units; `None` means `T / 10`.
    pub lengthscale: Option<f64>,
    /// Scale each component to a uniform random fraction in `[0.5, 1]` of
    /// its bound instead of exactly the bound.
    pub random_amplitude: bool,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            lengthscale: None,
            random_amplitude: false,
        }
    }
}

const GP_JITTER: f64 = 1e-8;

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Smooth 6-DoF trajectory drawn from a zero-mean GP with RBF kernel on the
/// time indices `1..=T`, shifted to start at the zero state and rescaled so
/// every component reaches its severity bound.
pub fn simulate_gp_trajectory(
    t: usize,
    level: SeverityLevel,
    options: GpOptions,
    seed: u64,
) -> Result<MotionTrajectory> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("trajectory needs T >= 2, got {t}")));
    }
    let ell = options.lengthscale.unwrap_or(t as f64 / 10.0);
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::InvalidArgument(format!("lengthscale must be positive, got {ell}")));
    }
    let mut gram = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let d = i as f64 - j as f64;
            gram[i * t + j] = (-d * d / (2.0 * ell * ell)).exp();
        }
    }
    let mut jitter = GP_JITTER;
    let chol = loop {
        let mut g = gram.clone();
        for i in 0..t {
            g[i * t + i] += jitter;
        }
        if let Some(l) = cholesky(&g, t) {
            break l;
        }
        jitter *= 10.0;
        if jitter > 1e-2 {
            return Err(Error::InvalidArgument("GP covariance could not be factorized".into()));
        }
        log::warn!("GP covariance not positive definite, raising jitter to {jitter:e}");
    };

    let mut components = [[0.0; 0]; 0].to_vec();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(6);
    for j in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        let xi: Vec<f64> = (0..t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g: Vec<f64> = (0..t)
            .map(|i| (0..=i).map(|k| chol[i * t + k] * xi[k]).sum())
            .collect();
        let start = g[0];
        g.iter_mut().for_each(|v| *v -= start);
        let bound = if options.random_amplitude {
            level.bound(j) * Uniform::new_inclusive(0.5, 1.0).sample(&mut rng)
        } else {
            level.bound(j)
        };
        let (argmax, peak) = g
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(ai, am), (i, v)| if v.abs() > am { (i, v.abs()) } else { (ai, am) });
        if peak > 0.0 {
            let scale = bound / peak;
            g.iter_mut().for_each(|v| *v *= scale);
            g[argmax] = bound.copysign(g[argmax]);
        }
        g[0] = 0.0;
        columns.push(g);
    }
    components.clear();
    let states = (0..t)
        .map(|i| MotionState::from_array(std::array::from_fn(|j| columns[j][i])))
        .collect();
    Ok(MotionTrajectory::new(states))
}
