//! Centered orthonormal 3D DFT and orthonormal 3D DST-I.
//!
//! The DFT puts the DC coefficient at index `n / 2` of every axis. Centering
//! is done by modulating before and after an ordinary FFT instead of shifting
//! data: with `c = n / 2` and `w = exp(-2 pi i / n)`,
//!
//! ```text
//! X[k] = n^{-1/2} sum_j x[j] w^{(j - c)(k - c)}
//!      = n^{-1/2} w^{c^2} w^{-ck} sum_j (x[j] w^{-cj}) w^{jk}
//! ```
//!
//! which is `fftshift(fft(ifftshift(x)))` for every `n`, odd or even.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use num_complex::Complex64;
use rustdct::{Dst1, DctPlanner};
use rustfft::{Fft, FftPlanner};

use crate::volume::{ComplexVolume, RealVolume, Shape3};

/// `exp(2 pi i m / n)`, exact at multiples of a quarter turn.
pub(crate) fn unit_root(m: usize, n: usize) -> Complex64 {
    let m = m % n;
    if (4 * m) % n == 0 {
        return match 4 * m / n {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, 1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, -1.0),
        };
    }
    let theta = 2.0 * PI * m as f64 / n as f64;
    Complex64::new(theta.cos(), theta.sin())
}

struct Modulation {
    /// `w^{-cj}` applied before the forward FFT.
    pre: Vec<Complex64>,
    /// `w^{c^2} w^{-ck} / sqrt(n)` applied after the forward FFT.
    post: Vec<Complex64>,
}

impl Modulation {
    fn new(n: usize) -> Self {
        let c = n / 2;
        let norm = 1.0 / (n as f64).sqrt();
        // w^{-cj} = exp(+2 pi i c j / n)
        let pre: Vec<Complex64> = (0..n).map(|j| unit_root((c * j) % n, n)).collect();
        // w^{c^2} = exp(-2 pi i c^2 / n)
        let global = unit_root(n - (c * c) % n, n);
        let post = pre.iter().map(|p| global * p * norm).collect();
        Self { pre, post }
    }
}

/// Per-length cache of FFT plans, DST-I plans and centering tables.
///
/// Lookups return shared plans; results do not depend on whether a plan was
/// freshly created or reused.
pub struct TransformPlanCache {
    fft_planner: Mutex<FftPlanner<f64>>,
    dct_planner: Mutex<DctPlanner<f64>>,
    ffts: RwLock<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>,
    dsts: RwLock<HashMap<usize, Arc<dyn Dst1<f64>>>>,
    modulations: RwLock<HashMap<usize, Arc<Modulation>>>,
}

impl Default for TransformPlanCache {
    fn default() -> Self {
        Self::new()
    }
}

impl TransformPlanCache {
    pub fn new() -> Self {
        Self {
            fft_planner: Mutex::new(FftPlanner::new()),
            dct_planner: Mutex::new(DctPlanner::new()),
            ffts: RwLock::new(HashMap::new()),
            dsts: RwLock::new(HashMap::new()),
            modulations: RwLock::new(HashMap::new()),
        }
    }

    pub fn global() -> &'static TransformPlanCache {
        static CACHE: OnceLock<TransformPlanCache> = OnceLock::new();
        CACHE.get_or_init(TransformPlanCache::new)
    }

    fn fft(&self, n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        if let Some(p) = self.ffts.read().unwrap().get(&(n, inverse)) {
            return p.clone();
        }
        let plan = {
            let mut planner = self.fft_planner.lock().unwrap();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        };
        self.ffts
            .write()
            .unwrap()
            .entry((n, inverse))
            .or_insert(plan)
            .clone()
    }

    fn dst1(&self, n: usize) -> Arc<dyn Dst1<f64>> {
        if let Some(p) = self.dsts.read().unwrap().get(&n) {
            return p.clone();
        }
        let plan = self.dct_planner.lock().unwrap().plan_dst1(n);
        self.dsts.write().unwrap().entry(n).or_insert(plan).clone()
    }

    fn modulation(&self, n: usize) -> Arc<Modulation> {
        if let Some(m) = self.modulations.read().unwrap().get(&n) {
            return m.clone();
        }
        let m = Arc::new(Modulation::new(n));
        self.modulations
            .write()
            .unwrap()
            .entry(n)
            .or_insert(m)
            .clone()
    }

    /// Centered orthonormal DFT of `data` in place along all three axes.
    pub fn fft3_in_place(&self, data: &mut [Complex64], shape: Shape3, inverse: bool) {
        for axis in 0..3 {
            self.centered_axis(data, shape, axis, inverse);
        }
    }

    fn centered_axis(&self, data: &mut [Complex64], shape: Shape3, axis: usize, inverse: bool) {
        let dims = shape.dims();
        let n = dims[axis];
        if n == 1 {
            return;
        }
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let fft = self.fft(n, inverse);
        let modulation = self.modulation(n);
        let (pre, post): (Vec<Complex64>, Vec<Complex64>) = if inverse {
            (
                modulation.pre.iter().map(|v| v.conj()).collect(),
                modulation.post.iter().map(|v| v.conj()).collect(),
            )
        } else {
            (modulation.pre.clone(), modulation.post.clone())
        };

        let lines = outer * inner;
        let mut buf = vec![Complex64::new(0.0, 0.0); lines * n];
        for o in 0..outer {
            for i in 0..inner {
                let line = o * inner + i;
                let base = o * n * inner + i;
                let dst = &mut buf[line * n..(line + 1) * n];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = data[base + j * inner] * pre[j];
                }
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(&mut buf, &mut scratch);
        for o in 0..outer {
            for i in 0..inner {
                let line = o * inner + i;
                let base = o * n * inner + i;
                let src = &buf[line * n..(line + 1) * n];
                for (k, s) in src.iter().enumerate() {
                    data[base + k * inner] = s * post[k];
                }
            }
        }
    }

    /// Orthonormal DST-I of `data` in place along all three axes.
    pub fn dst3_in_place(&self, data: &mut [f64], shape: Shape3) {
        let dims = shape.dims();
        for axis in 0..3 {
            let n = dims[axis];
            let inner: usize = dims[axis + 1..].iter().product();
            let outer: usize = dims[..axis].iter().product();
            let dst = self.dst1(n);
            let norm = (2.0 / (n as f64 + 1.0)).sqrt();
            let mut line = vec![0.0; n];
            let mut scratch = vec![0.0; dst.get_scratch_len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[base + j * inner];
                    }
                    scratch.iter_mut().for_each(|s| *s = 0.0);
                    dst.process_dst1_with_scratch(&mut line, &mut scratch);
                    for (k, l) in line.iter().enumerate() {
                        data[base + k * inner] = l * norm;
                    }
                }
            }
        }
    }
}

/// Centered orthonormal forward DFT.
pub fn fft3(v: &ComplexVolume) -> ComplexVolume {
    let mut out = v.clone();
    TransformPlanCache::global().fft3_in_place(out.data_mut(), v.shape(), false);
    out
}

/// Centered orthonormal inverse DFT.
pub fn ifft3(v: &ComplexVolume) -> ComplexVolume {
    let mut out = v.clone();
    TransformPlanCache::global().fft3_in_place(out.data_mut(), v.shape(), true);
    out
}

/// Orthonormal DST-I along every axis.
pub fn dst3(u: &RealVolume) -> RealVolume {
    let mut out = u.clone();
    TransformPlanCache::global().dst3_in_place(out.data_mut(), u.shape());
    out
}

/// Inverse of [`dst3`]. The orthonormal DST-I matrix is symmetric and
/// involutory, so this is the same transform.
pub fn idst3(u: &RealVolume) -> RealVolume {
    dst3(u)
}

/// Eigenvalues of the 3D Dirichlet Laplacian `D^T D` in DST-I order:
/// `sum_axis 2 - 2 cos(pi (k + 1) / (n + 1))`.
pub fn dirichlet_laplacian_eigenvalues(shape: Shape3) -> RealVolume {
    let axis_eigs = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|k| {
                if 2 * (k + 1) == n + 1 {
                    2.0
                } else {
                    2.0 - 2.0 * (PI * (k as f64 + 1.0) / (n as f64 + 1.0)).cos()
                }
            })
            .collect()
    };
    separable_sum(shape, axis_eigs)
}

/// Eigenvalues of the periodic 3D Laplacian in centered DFT order:
/// `sum_axis 2 - 2 cos(2 pi (k - n/2) / n)`.
pub fn periodic_laplacian_eigenvalues(shape: Shape3) -> RealVolume {
    let axis_eigs = |n: usize| -> Vec<f64> {
        let c = n / 2;
        (0..n)
            .map(|k| {
                let m = (k + n - c) % n;
                2.0 - 2.0 * unit_root(m, n).re
            })
            .collect()
    };
    separable_sum(shape, axis_eigs)
}

fn separable_sum(shape: Shape3, axis_eigs: impl Fn(usize) -> Vec<f64>) -> RealVolume {
    let ez = axis_eigs(shape.nz);
    let ey = axis_eigs(shape.ny);
    let ex = axis_eigs(shape.nx);
    let mut data = Vec::with_capacity(shape.len());
    for z in &ez {
        for y in &ey {
            for x in &ex {
                data.push(z + y + x);
            }
        }
    }
    RealVolume::from_data(shape, [1.0; 3], data).expect("separable eigenvalue grid")
}
