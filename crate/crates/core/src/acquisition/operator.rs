use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::SamplingPlan;
use crate::error::{Error, Result};
use crate::motion::{warp, warp_adjoint, warp_motion_gradient, MotionState, MotionTrajectory};
use crate::transforms::{fft3, ifft3};
use crate::volume::{rss_combine, CoilSet, ComplexVolume, KSpaceSet, RealVolume};

/// Complex circular Gaussian measurement noise: real and imaginary parts
/// each have variance `sigma^2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

fn check_image(x: &ComplexVolume, plan: &SamplingPlan) -> Result<()> {
    if x.shape() != plan.shape() {
        return Err(Error::shape(plan.shape(), x.shape()));
    }
    Ok(())
}

fn check_coils(c: &CoilSet, plan: &SamplingPlan) -> Result<()> {
    if c.shape() != plan.shape() {
        return Err(Error::shape(plan.shape(), c.shape()));
    }
    Ok(())
}

fn check_motion(v: &MotionTrajectory, plan: &SamplingPlan) -> Result<()> {
    if v.len() != plan.num_times() {
        return Err(Error::shape(
            format!("{} motion states", plan.num_times()),
            v.len(),
        ));
    }
    Ok(())
}

fn check_kspace(z: &KSpaceSet, num_coils: usize, plan: &SamplingPlan) -> Result<()> {
    if z.num_times() != plan.num_times() {
        return Err(Error::shape(format!("{} time groups", plan.num_times()), z.num_times()));
    }
    if z.num_coils() != num_coils {
        return Err(Error::shape(format!("{num_coils} coils"), z.num_coils()));
    }
    for t in 0..plan.num_times() {
        let k = plan.group_indices(t).len() * num_coils;
        if z.group(t).len() != k {
            return Err(Error::shape(format!("{k} samples in group {t}"), z.group(t).len()));
        }
    }
    Ok(())
}

fn gather(spectrum: &ComplexVolume, idx: &[usize], out: &mut Vec<Complex64>) {
    let d = spectrum.data();
    out.extend(idx.iter().map(|&i| d[i]));
}

fn scatter(template: &ComplexVolume, idx: &[usize], values: &[Complex64]) -> ComplexVolume {
    let mut grid = ComplexVolume::zeros(template.shape(), template.spacing());
    let d = grid.data_mut();
    for (&i, &v) in idx.iter().zip(values) {
        d[i] = v;
    }
    grid
}

fn coil_forward(w: &ComplexVolume, c: &CoilSet, idx: &[usize]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(idx.len() * c.num_coils());
    for map in c.maps() {
        gather(&fft3(&map.mul(w)), idx, &mut out);
    }
    out
}

/// `z_t = M_t F (c * W(x, v_t))`, coil-major.
pub fn forward_at_t(
    x: &ComplexVolume,
    c: &CoilSet,
    v_t: &MotionState,
    plan: &SamplingPlan,
    t: usize,
) -> Result<Vec<Complex64>> {
    check_image(x, plan)?;
    check_coils(c, plan)?;
    if t >= plan.num_times() {
        return Err(Error::InvalidArgument(format!(
            "time index {t} out of range for {} groups",
            plan.num_times()
        )));
    }
    Ok(coil_forward(&warp(x, v_t), c, plan.group_indices(t)))
}

/// Stack of [`forward_at_t`] over all time groups.
pub fn forward_full(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    plan: &SamplingPlan,
) -> Result<KSpaceSet> {
    check_image(x, plan)?;
    check_coils(c, plan)?;
    check_motion(v, plan)?;
    let groups: Vec<Vec<Complex64>> = (0..plan.num_times())
        .into_par_iter()
        .map(|t| coil_forward(&warp(x, &v.states[t]), c, plan.group_indices(t)))
        .collect();
    KSpaceSet::new(c.num_coils(), plan.id(), groups)
}

/// `sum_j conj(c_j) * F^-1 M_t^T z_tj` for one group.
fn coil_backproject(template: &ComplexVolume, c: &CoilSet, idx: &[usize], z_t: &[Complex64]) -> (ComplexVolume, Vec<ComplexVolume>) {
    let k = idx.len();
    let mut u = ComplexVolume::zeros(template.shape(), template.spacing());
    let mut per_coil = Vec::with_capacity(c.num_coils());
    for (j, map) in c.maps().iter().enumerate() {
        let b = ifft3(&scatter(template, idx, &z_t[j * k..(j + 1) * k]));
        for ((o, m), bv) in u.data_mut().iter_mut().zip(map.data()).zip(b.data()) {
            *o += m.conj() * bv;
        }
        per_coil.push(b);
    }
    (u, per_coil)
}

/// Exact adjoint of [`forward_full`].
pub fn adjoint_full(
    z: &KSpaceSet,
    c: &CoilSet,
    v: &MotionTrajectory,
    plan: &SamplingPlan,
) -> Result<ComplexVolume> {
    check_coils(c, plan)?;
    check_motion(v, plan)?;
    check_kspace(z, c.num_coils(), plan)?;
    let template = &c.maps()[0];
    let parts: Vec<ComplexVolume> = (0..plan.num_times())
        .into_par_iter()
        .map(|t| {
            let (u, _) = coil_backproject(template, c, plan.group_indices(t), z.group(t));
            warp_adjoint(&u, &v.states[t])
        })
        .collect();
    let mut out = ComplexVolume::zeros(plan.shape(), template.spacing());
    for p in &parts {
        out.axpy(1.0, p);
    }
    Ok(out)
}

/// Which gradients [`evaluate`] should assemble.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Wanted {
    pub x: bool,
    pub c: bool,
    pub v: bool,
}

impl Wanted {
    pub const NONE: Wanted = Wanted {
        x: false,
        c: false,
        v: false,
    };
    pub const X: Wanted = Wanted {
        x: true,
        c: false,
        v: false,
    };
    pub const C: Wanted = Wanted {
        x: false,
        c: true,
        v: false,
    };
    pub const V: Wanted = Wanted {
        x: false,
        c: false,
        v: true,
    };
    pub const ALL: Wanted = Wanted {
        x: true,
        c: true,
        v: true,
    };
}

/// Data fidelity `(1 / 2 sigma^2) sum_t ||A_t - z_t||^2` over the active
/// groups, per-group residual statistics over all groups, and the requested
/// real-representation gradients.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    /// `||A_t - z_t||` for every group, active or not.
    pub residual_norms: Vec<f64>,
    /// `||z_t||` for every group.
    pub data_norms: Vec<f64>,
    pub grad_x: Option<ComplexVolume>,
    pub grad_c: Option<CoilSet>,
    pub grad_v: Option<MotionTrajectory>,
}

impl Evaluation {
    /// Relative residual `||A_t - z_t|| / ||z_t||` per group.
    pub fn data_consistency(&self) -> Vec<f64> {
        self.residual_norms
            .iter()
            .zip(&self.data_norms)
            .map(|(r, d)| if *d > 0.0 { r / d } else if *r > 0.0 { f64::INFINITY } else { 0.0 })
            .collect()
    }
}

struct TimeTerm {
    resid_sq: f64,
    data_sq: f64,
    grad_x: Option<ComplexVolume>,
    grad_c: Option<Vec<ComplexVolume>>,
    grad_v: [f64; 6],
}

#[allow(clippy::too_many_arguments)]
fn time_term(
    x: &ComplexVolume,
    c: &CoilSet,
    v_t: &MotionState,
    z_t: &[Complex64],
    idx: &[usize],
    active: bool,
    want: Wanted,
) -> TimeTerm {
    let w = warp(x, v_t);
    let mut resid = coil_forward(&w, c, idx);
    let mut resid_sq = 0.0;
    for (r, z) in resid.iter_mut().zip(z_t) {
        *r -= z;
        resid_sq += r.norm_sqr();
    }
    let data_sq = z_t.iter().map(|v| v.norm_sqr()).sum();
    let mut term = TimeTerm {
        resid_sq,
        data_sq,
        grad_x: None,
        grad_c: None,
        grad_v: [0.0; 6],
    };
    if !active || !(want.x || want.c || want.v) {
        return term;
    }
    let (u, per_coil) = coil_backproject(x, c, idx, &resid);
    if want.c {
        term.grad_c = Some(
            per_coil
                .into_iter()
                .map(|b| w.conj_mul(&b))
                .collect(),
        );
    }
    if want.v {
        term.grad_v = warp_motion_gradient(x, v_t, &u);
    }
    if want.x {
        term.grad_x = Some(warp_adjoint(&u, v_t));
    }
    term
}

/// Evaluate the data term and its gradients. `active` (one flag per group)
/// restricts the value and gradients to the flagged groups.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma: f64,
    active: Option<&[bool]>,
    want: Wanted,
) -> Result<Evaluation> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be positive, got {sigma}")));
    }
    check_image(x, plan)?;
    check_coils(c, plan)?;
    check_motion(v, plan)?;
    check_kspace(z, c.num_coils(), plan)?;
    let nt = plan.num_times();
    if let Some(a) = active {
        if a.len() != nt {
            return Err(Error::shape(format!("{nt} activity flags"), a.len()));
        }
    }
    let is_active = |t: usize| active.map_or(true, |a| a[t]);
    let terms: Vec<TimeTerm> = (0..nt)
        .into_par_iter()
        .map(|t| time_term(x, c, &v.states[t], z.group(t), plan.group_indices(t), is_active(t), want))
        .collect();

    let inv = 1.0 / (sigma * sigma);
    let mut value = 0.0;
    for (t, term) in terms.iter().enumerate() {
        if is_active(t) {
            value += term.resid_sq;
        }
    }
    value *= 0.5 * inv;

    let grad_x = want.x.then(|| {
        let mut g = ComplexVolume::zeros(x.shape(), x.spacing());
        for term in &terms {
            if let Some(gx) = &term.grad_x {
                g.axpy(inv, gx);
            }
        }
        g
    });
    let grad_c = if want.c {
        let mut maps: Vec<ComplexVolume> = (0..c.num_coils())
            .map(|_| ComplexVolume::zeros(x.shape(), x.spacing()))
            .collect();
        for term in &terms {
            if let Some(gc) = &term.grad_c {
                for (m, g) in maps.iter_mut().zip(gc) {
                    m.axpy(inv, g);
                }
            }
        }
        Some(CoilSet::new(maps)?)
    } else {
        None
    };
    let grad_v = want.v.then(|| {
        MotionTrajectory::new(
            terms
                .iter()
                .map(|term| MotionState::from_array(term.grad_v.map(|g| g * inv)))
                .collect(),
        )
    });
    Ok(Evaluation {
        value,
        residual_norms: terms.iter().map(|t| t.resid_sq.sqrt()).collect(),
        data_norms: terms.iter().map(|t| t.data_sq.sqrt()).collect(),
        grad_x,
        grad_c,
        grad_v,
    })
}

/// `(1 / 2 sigma^2) ||A(x, c, v) - z||^2`
pub fn data_fidelity(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma: f64,
) -> Result<f64> {
    Ok(evaluate(x, c, v, z, plan, sigma, None, Wanted::NONE)?.value)
}

/// Gradient of [`data_fidelity`] with respect to the real and imaginary
/// parts of `x`, packed as a complex volume: `A^H (A x - z) / sigma^2`.
pub fn grad_data_fidelity_x(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma: f64,
) -> Result<ComplexVolume> {
    Ok(evaluate(x, c, v, z, plan, sigma, None, Wanted::X)?.grad_x.expect("requested"))
}

/// Gradient of [`data_fidelity`] with respect to the coil maps.
pub fn grad_data_fidelity_c(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma: f64,
) -> Result<CoilSet> {
    Ok(evaluate(x, c, v, z, plan, sigma, None, Wanted::C)?.grad_c.expect("requested"))
}

/// Gradient of [`data_fidelity`] with respect to every motion parameter.
pub fn grad_data_fidelity_v(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    z: &KSpaceSet,
    plan: &SamplingPlan,
    sigma: f64,
) -> Result<MotionTrajectory> {
    Ok(evaluate(x, c, v, z, plan, sigma, None, Wanted::V)?.grad_v.expect("requested"))
}

/// Forward model plus seeded complex Gaussian noise.
pub fn simulate_kspace(
    x: &ComplexVolume,
    c: &CoilSet,
    v: &MotionTrajectory,
    plan: &SamplingPlan,
    noise: &NoiseModel,
) -> Result<KSpaceSet> {
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", noise.sigma)));
    }
    let mut k = forward_full(x, c, v, plan)?;
    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, noise.sigma / std::f64::consts::SQRT_2).expect("finite sigma");
        for g in k.groups_mut() {
            for s in g.iter_mut() {
                let re: f64 = normal.sample(&mut rng);
                let im: f64 = normal.sample(&mut rng);
                *s += Complex64::new(re, im);
            }
        }
    }
    Ok(k)
}

/// Noise sigma that puts the measurement SNR `mean |z|^2 / sigma^2` at `snr_db`.
pub fn noise_sigma_for_snr(clean: &KSpaceSet, snr_db: f64) -> f64 {
    let n = clean.total_samples().max(1) as f64;
    (clean.norm_sqr() / n / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Coil-wise inverse DFT of the k-space with every group scattered onto one grid.
pub fn zero_filled_coil_images(k: &KSpaceSet, plan: &SamplingPlan) -> Result<Vec<ComplexVolume>> {
    if k.num_times() == 0 {
        return Err(Error::InvalidArgument("empty measurement set".into()));
    }
    check_kspace(k, k.num_coils(), plan)?;
    let template = ComplexVolume::zeros(plan.shape(), plan.spacing());
    Ok((0..k.num_coils())
        .into_par_iter()
        .map(|j| {
            let mut grid = template.clone();
            let d = grid.data_mut();
            for t in 0..plan.num_times() {
                for (&i, &s) in plan.group_indices(t).iter().zip(k.coil_samples(t, j)) {
                    d[i] = s;
                }
            }
            ifft3(&grid)
        })
        .collect())
}

/// Root sum-of-squares of [`zero_filled_coil_images`].
pub fn zero_filled_rss(k: &KSpaceSet, plan: &SamplingPlan) -> Result<RealVolume> {
    rss_combine(&zero_filled_coil_images(k, plan)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::mask::{make_cartesian_mask, Mask2D};
    use crate::acquisition::plan::{make_ordering, Geometry, OrderingScheme, ReadoutAxis};
    use crate::volume::Shape3;
    use rand::Rng;

    fn rand_vol(shape: Shape3, seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume::from_fn(shape, [1.0; 3], |_, _, _| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    fn rand_coils(shape: Shape3, n: usize, seed: u64) -> CoilSet {
        CoilSet::new((0..n).map(|j| rand_vol(shape, seed + j as u64)).collect()).unwrap()
    }

    fn rand_traj(t: usize, seed: u64, scale: f64) -> MotionTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionTrajectory::new(
            (0..t)
                .map(|_| MotionState::from_array(std::array::from_fn(|j| scale * if j < 3 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-4.0..4.0) })))
                .collect(),
        )
    }

    fn plan(n: usize, r: f64, shots: usize, states: usize) -> SamplingPlan {
        let g = Geometry::new(Shape3::cube(n), [1.0; 3], ReadoutAxis::Z);
        let mask = make_cartesian_mask((n, n), r, 0.04, 1).unwrap();
        make_ordering(g, &mask, OrderingScheme::InterleavedCenterFirst, shots, states, 2).unwrap()
    }

    fn kdot(a: &KSpaceSet, b: &KSpaceSet) -> Complex64 {
        a.groups().iter().zip(b.groups()).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| p.conj() * q)).sum()
    }

    #[test]
    fn degenerate_operator_is_the_dft() {
        let shape = Shape3::cube(6);
        let x = rand_vol(shape, 1);
        let p = plan(6, 1.0, 1, 1);
        let c = CoilSet::ones(shape, [1.0; 3]);
        let z = forward_at_t(&x, &c, &MotionState::ZERO, &p, 0).unwrap();
        let f = fft3(&x);
        let expected: Vec<Complex64> = p.group_indices(0).iter().map(|&i| f.data()[i]).collect();
        assert_eq!(z, expected);
        let back = adjoint_full(&forward_full(&x, &c, &MotionTrajectory::zeros(1), &p).unwrap(), &c, &MotionTrajectory::zeros(1), &p).unwrap();
        assert!(back.sub(&x).norm() / x.norm() < 1e-12);
    }

    #[test]
    fn adjoint_dot_test_inter_and_intra_shot() {
        for (shots, states) in [(8, 1), (4, 2)] {
            let shape = Shape3::cube(10);
            let p = plan(10, 2.0, shots, states);
            let c = rand_coils(shape, 3, 10);
            let v = rand_traj(p.num_times(), 3, 1.0);
            let x = rand_vol(shape, 4);
            let ax = forward_full(&x, &c, &v, &p).unwrap();
            let z = KSpaceSet::new(3, p.id(), ax.groups().iter().enumerate().map(|(t, g)| {
                let mut rng = ChaCha8Rng::seed_from_u64(50 + t as u64);
                g.iter().map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect()
            }).collect()).unwrap();
            let lhs = kdot(&ax, &z);
            let rhs = x.dot(&adjoint_full(&z, &c, &v, &p).unwrap());
            assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_input_gives_zero_adjoint() {
        let shape = Shape3::cube(6);
        let p = plan(6, 2.0, 3, 1);
        let c = rand_coils(shape, 2, 1);
        let z = KSpaceSet::new(2, p.id(), p.group_sizes().iter().map(|k| vec![Complex64::new(0.0, 0.0); 2 * k]).collect()).unwrap();
        let out = adjoint_full(&z, &c, &rand_traj(3, 1, 1.0), &p).unwrap();
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn dense_operator_oracle() {
        // Columns of A_t from unit impulses (real and imaginary) reproduce the
        // operator applied to a random vector.
        let shape = Shape3::cube(6);
        let p = plan(6, 2.0, 2, 1);
        let c = rand_coils(shape, 2, 7);
        let vt = MotionState::new([0.4, -0.3, 0.2], [3.0, -2.0, 1.0]);
        let x = rand_vol(shape, 8);
        let cols: Vec<Vec<Complex64>> = (0..shape.len())
            .map(|i| {
                let mut e = ComplexVolume::zeros(shape, [1.0; 3]);
                e.data_mut()[i] = Complex64::new(1.0, 0.0);
                forward_at_t(&e, &c, &vt, &p, 1).unwrap()
            })
            .collect();
        let direct = forward_at_t(&x, &c, &vt, &p, 1).unwrap();
        let mut dense = vec![Complex64::new(0.0, 0.0); direct.len()];
        for (i, col) in cols.iter().enumerate() {
            for (d, a) in dense.iter_mut().zip(col) {
                *d += a * x.data()[i];
            }
        }
        let err: f64 = dense.iter().zip(&direct).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let nrm: f64 = direct.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * nrm);
    }

    #[test]
    fn linear_in_image_and_coils() {
        let shape = Shape3::cube(8);
        let p = plan(8, 2.0, 4, 1);
        let v = rand_traj(4, 2, 1.0);
        let c = rand_coils(shape, 2, 1);
        let (a, b) = (rand_vol(shape, 3), rand_vol(shape, 4));
        let mut comb = a.scaled(1.5);
        comb.axpy(-2.0, &b);
        let lhs = forward_full(&comb, &c, &v, &p).unwrap();
        let fa = forward_full(&a, &c, &v, &p).unwrap();
        let fb = forward_full(&b, &c, &v, &p).unwrap();
        for t in 0..4 {
            for ((l, x), y) in lhs.group(t).iter().zip(fa.group(t)).zip(fb.group(t)) {
                assert!((l - (x * 1.5 - y * 2.0)).norm() < 1e-10);
            }
        }
        let c2 = rand_coils(shape, 2, 9);
        let sum = c.added(1.0, &c2);
        let fs = forward_full(&a, &sum, &v, &p).unwrap();
        let f2 = forward_full(&a, &c2, &v, &p).unwrap();
        for t in 0..4 {
            for ((l, x), y) in fs.group(t).iter().zip(fa.group(t)).zip(f2.group(t)) {
                assert!((l - (x + y)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn equal_states_reduce_to_single_state_model() {
        let shape = Shape3::cube(8);
        let p = plan(8, 2.0, 4, 1);
        let s = MotionState::new([0.5, 0.0, -0.25], [0.0, 3.0, 0.0]);
        let x = rand_vol(shape, 5);
        let c = rand_coils(shape, 2, 6);
        let k = forward_full(&x, &c, &MotionTrajectory::new(vec![s; 4]), &p).unwrap();
        let full: Vec<ComplexVolume> = c.maps().iter().map(|m| fft3(&m.mul(&warp(&x, &s)))).collect();
        for t in 0..4 {
            for j in 0..2 {
                let expected: Vec<Complex64> = p.group_indices(t).iter().map(|&i| full[j].data()[i]).collect();
                assert_eq!(k.coil_samples(t, j), expected.as_slice());
            }
        }
    }

    #[test]
    fn fidelity_values() {
        let shape = Shape3::cube(6);
        let p = plan(6, 1.0, 2, 1);
        let c = rand_coils(shape, 2, 1);
        let v = rand_traj(2, 1, 1.0);
        let x = rand_vol(shape, 2);
        let z = forward_full(&x, &c, &v, &p).unwrap();
        assert_eq!(data_fidelity(&x, &c, &v, &z, &p, 1.0).unwrap(), 0.0);
        let mut shifted = z.clone();
        shifted.groups_mut()[0][0] += Complex64::new(0.0, 2.0);
        assert!((data_fidelity(&x, &c, &v, &shifted, &p, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(data_fidelity(&x, &c, &v, &z, &p, 0.0).is_err());

        let noisy = simulate_kspace(&x, &c, &v, &p, &NoiseModel { sigma: 0.3, seed: 3 }).unwrap();
        let mut oracle = 0.0;
        for t in 0..2 {
            for (a, b) in z.group(t).iter().zip(noisy.group(t)) {
                oracle += (a.re - b.re).powi(2) + (a.im - b.im).powi(2);
            }
        }
        oracle /= 2.0 * 0.7 * 0.7;
        let got = data_fidelity(&x, &c, &v, &noisy, &p, 0.7).unwrap();
        assert!((got - oracle).abs() <= 1e-10 * oracle);
    }

    #[test]
    fn gradients_vanish_at_the_solution() {
        let shape = Shape3::cube(8);
        let p = plan(8, 2.0, 4, 1);
        let c = rand_coils(shape, 2, 1);
        let v = rand_traj(4, 1, 1.0);
        let x = rand_vol(shape, 2);
        let z = forward_full(&x, &c, &v, &p).unwrap();
        let e = evaluate(&x, &c, &v, &z, &p, 1.0, None, Wanted::ALL).unwrap();
        assert!(e.grad_x.unwrap().data().iter().all(|g| g.norm() <= 1e-8));
        assert!(e.grad_c.unwrap().maps().iter().all(|m| m.data().iter().all(|g| g.norm() <= 1e-8)));
        assert!(e.grad_v.unwrap().to_flat().iter().all(|g| g.abs() <= 1e-8));
    }

    #[test]
    fn coil_gradient_matches_finite_differences() {
        let shape = Shape3::cube(6);
        let p = plan(6, 2.0, 2, 1);
        let c = rand_coils(shape, 2, 1);
        let v = rand_traj(2, 4, 1.0);
        let x = rand_vol(shape, 2);
        let z = KSpaceSet::new(2, p.id(), p.group_sizes().iter().map(|k| vec![Complex64::new(0.1, -0.2); 2 * k]).collect()).unwrap();
        let g = grad_data_fidelity_c(&x, &c, &v, &z, &p, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..6 {
            let j = rng.gen_range(0..2);
            let i = rng.gen_range(0..shape.len());
            for (dir, part) in [(Complex64::new(1.0, 0.0), 0), (Complex64::new(0.0, 1.0), 1)] {
                let h = 1e-6;
                let bump = |s: f64| {
                    let mut maps = c.clone().into_maps();
                    maps[j].data_mut()[i] += dir * s;
                    data_fidelity(&x, &CoilSet::new(maps).unwrap(), &v, &z, &p, 0.8).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if part == 0 { g.maps()[j].data()[i].re } else { g.maps()[j].data()[i].im };
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn active_flags_restrict_the_sum() {
        let shape = Shape3::cube(6);
        let p = plan(6, 2.0, 3, 1);
        let c = rand_coils(shape, 2, 1);
        let v = rand_traj(3, 1, 1.0);
        let x = rand_vol(shape, 2);
        let z = KSpaceSet::new(2, p.id(), p.group_sizes().iter().map(|k| vec![Complex64::new(0.3, 0.0); 2 * k]).collect()).unwrap();
        let all = evaluate(&x, &c, &v, &z, &p, 1.0, None, Wanted::X).unwrap();
        let parts: Vec<Evaluation> = (0..3)
            .map(|t| {
                let flags: Vec<bool> = (0..3).map(|s| s == t).collect();
                evaluate(&x, &c, &v, &z, &p, 1.0, Some(&flags), Wanted::X).unwrap()
            })
            .collect();
        let total: f64 = parts.iter().map(|e| e.value).sum();
        assert!((total - all.value).abs() <= 1e-12 * all.value);
        assert_eq!(parts[0].residual_norms, all.residual_norms);
        let mut gsum = ComplexVolume::zeros(shape, [1.0; 3]);
        for e in &parts {
            gsum.axpy(1.0, e.grad_x.as_ref().unwrap());
        }
        assert!(gsum.sub(all.grad_x.as_ref().unwrap()).norm() <= 1e-12 * gsum.norm());
    }

    #[test]
    fn noise_statistics_and_seeding() {
        let shape = Shape3::new(8, 128, 128);
        let g = Geometry::new(shape, [1.0; 3], ReadoutAxis::Z);
        let p = make_ordering(g, &Mask2D::full(128, 128), OrderingScheme::Centric, 2, 1, 0).unwrap();
        let c = CoilSet::ones(shape, [1.0; 3]);
        let x = ComplexVolume::zeros(shape, [1.0; 3]);
        let v = MotionTrajectory::zeros(2);
        let noise = NoiseModel { sigma: 0.25, seed: 5 };
        let k = simulate_kspace(&x, &c, &v, &p, &noise).unwrap();
        assert!(k.total_samples() >= 100_000);
        let std = (k.norm_sqr() / k.total_samples() as f64).sqrt();
        assert!((std - 0.25).abs() < 0.05 * 0.25, "{std}");
        assert_eq!(k, simulate_kspace(&x, &c, &v, &p, &noise).unwrap());
        let clean = simulate_kspace(&rand_vol(shape, 1), &c, &v, &p, &NoiseModel { sigma: 0.0, seed: 5 }).unwrap();
        assert_eq!(clean, forward_full(&rand_vol(shape, 1), &c, &v, &p).unwrap());
    }

    #[test]
    fn zero_filled_images_invert_full_sampling() {
        let shape = Shape3::cube(8);
        let p = plan(8, 1.0, 4, 1);
        let c = rand_coils(shape, 2, 3);
        let x = rand_vol(shape, 4);
        let k = forward_full(&x, &c, &MotionTrajectory::zeros(4), &p).unwrap();
        let imgs = zero_filled_coil_images(&k, &p).unwrap();
        for (img, m) in imgs.iter().zip(c.maps()) {
            assert!(img.sub(&m.mul(&x)).norm() < 1e-10 * img.norm());
        }
    }
}
