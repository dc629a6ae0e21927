//! Dense 3D volumes and the containers built from them.
//!
//! Every volume is stored row-major with `z` slowest and `x` fastest, so the
//! flat index of voxel `(z, y, x)` is `(z * ny + y) * nx + x`.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent as `(nz, ny, nx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Shape3 {
    pub const fn new(nz: usize, ny: usize, nx: usize) -> Self {
        Self { nz, ny, nx }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        [z, y, x]
    }

    /// Geometric center in voxel coordinates, `(n - 1) / 2` per axis.
    pub fn center(&self) -> [f64; 3] {
        [
            (self.nz as f64 - 1.0) / 2.0,
            (self.ny as f64 - 1.0) / 2.0,
            (self.nx as f64 - 1.0) / 2.0,
        ]
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.nz, self.ny, self.nx)
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "voxel spacing must be strictly positive, got {spacing:?}"
        )))
    }
}

/// Complex-valued volume with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    shape: Shape3,
    spacing: [f64; 3],
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn zeros(shape: Shape3, spacing: [f64; 3]) -> Self {
        Self {
            shape,
            spacing,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
        }
    }

    pub fn from_data(shape: Shape3, spacing: [f64; 3], data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} samples for shape {shape}", shape.len()),
                format!("{} samples", data.len()),
            ));
        }
        if shape.is_empty() {
            return Err(Error::InvalidArgument("volume shape must be positive".into()));
        }
        check_spacing(spacing)?;
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn from_fn(
        shape: Shape3,
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            shape,
            spacing,
            data,
        }
    }

    /// Same geometry, new payload. Panics if the length differs.
    pub fn with_data(&self, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "payload length mismatch");
        Self {
            shape: self.shape,
            spacing: self.spacing,
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> Complex64 {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: Complex64) {
        let i = self.shape.index(z, y, x);
        self.data[i] = v;
    }

    pub fn same_geometry(&self, other: &ComplexVolume) -> bool {
        self.shape == other.shape
    }

    pub fn ensure_same_shape(&self, other: &ComplexVolume) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape, other.shape))
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product `sum(conj(self) * other)`.
    pub fn dot(&self, other: &ComplexVolume) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Real inner product of the underlying real vector space, `Re <self, other>`.
    pub fn real_dot(&self, other: &ComplexVolume) -> f64 {
        self.dot(other).re
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ComplexVolume) {
        for (y, x) in self.data.iter_mut().zip(&other.data) {
            *y += x * a;
        }
    }

    /// `self += a * other` with a complex coefficient.
    pub fn axpy_complex(&mut self, a: Complex64, other: &ComplexVolume) {
        for (y, x) in self.data.iter_mut().zip(&other.data) {
            *y += a * x;
        }
    }

    pub fn sub(&self, other: &ComplexVolume) -> Self {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn add(&self, other: &ComplexVolume) -> Self {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &ComplexVolume) -> Self {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    /// Elementwise `conj(self) * other`.
    pub fn conj_mul(&self, other: &ComplexVolume) -> Self {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.conj() * b)
                .collect(),
        )
    }

    pub fn magnitude(&self) -> RealVolume {
        RealVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn real_part(&self) -> RealVolume {
        RealVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v.re).collect(),
        }
    }

    pub fn imag_part(&self) -> RealVolume {
        RealVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| v.im).collect(),
        }
    }

    pub fn from_parts(re: &RealVolume, im: &RealVolume) -> Self {
        assert_eq!(re.shape, im.shape);
        Self {
            shape: re.shape,
            spacing: re.spacing,
            data: re
                .data
                .iter()
                .zip(&im.data)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Real-valued volume (magnitudes, RSS images, transform coefficients).
#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume {
    shape: Shape3,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl RealVolume {
    pub fn zeros(shape: Shape3, spacing: [f64; 3]) -> Self {
        Self {
            shape,
            spacing,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_data(shape: Shape3, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} samples for shape {shape}", shape.len()),
                format!("{} samples", data.len()),
            ));
        }
        check_spacing(spacing)?;
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "payload length mismatch");
        Self {
            shape: self.shape,
            spacing: self.spacing,
            data,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(z, y, x)]
    }

    pub fn to_complex(&self) -> ComplexVolume {
        ComplexVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Receive-coil sensitivity maps, one complex volume per coil.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSet {
    maps: Vec<ComplexVolume>,
}

impl CoilSet {
    pub fn new(maps: Vec<ComplexVolume>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("coil set needs at least one coil".into()))?;
        for m in &maps[1..] {
            first.ensure_same_shape(m)?;
        }
        Ok(Self { maps })
    }

    /// Uniform unit sensitivity for a single coil.
    pub fn ones(shape: Shape3, spacing: [f64; 3]) -> Self {
        let mut m = ComplexVolume::zeros(shape, spacing);
        m.data_mut().fill(Complex64::new(1.0, 0.0));
        Self { maps: vec![m] }
    }

    pub fn num_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> Shape3 {
        self.maps[0].shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.maps[0].spacing()
    }

    pub fn maps(&self) -> &[ComplexVolume] {
        &self.maps
    }

    pub fn maps_mut(&mut self) -> &mut [ComplexVolume] {
        &mut self.maps
    }

    pub fn into_maps(self) -> Vec<ComplexVolume> {
        self.maps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.maps.iter().map(|m| m.norm_sqr()).sum()
    }

    pub fn real_dot(&self, other: &CoilSet) -> f64 {
        self.maps
            .iter()
            .zip(&other.maps)
            .map(|(a, b)| a.real_dot(b))
            .sum()
    }

    /// `self + a * other`
    pub fn added(&self, a: f64, other: &CoilSet) -> CoilSet {
        let maps = self
            .maps
            .iter()
            .zip(&other.maps)
            .map(|(m, o)| {
                let mut m = m.clone();
                m.axpy(a, o);
                m
            })
            .collect();
        CoilSet { maps }
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|m| m.is_finite())
    }

    /// Per-voxel `sum_c |c_c(p)|^2`.
    pub fn sum_of_squares(&self) -> RealVolume {
        let mut out = RealVolume::zeros(self.shape(), self.spacing());
        for m in &self.maps {
            for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                *o += v.norm_sqr();
            }
        }
        out
    }
}

/// Measured k-space grouped by motion state.
///
/// `groups[t]` holds the `C * K_t` samples of time point `t`, coil-major:
/// sample `k` of coil `c` sits at `c * K_t + k`. The ordering of the `K_t`
/// samples matches [`crate::acquisition::SamplingPlan::group_indices`].
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSet {
    num_coils: usize,
    plan_id: String,
    groups: Vec<Vec<Complex64>>,
}

impl KSpaceSet {
    pub fn new(num_coils: usize, plan_id: impl Into<String>, groups: Vec<Vec<Complex64>>) -> Result<Self> {
        if num_coils == 0 {
            return Err(Error::InvalidArgument("k-space needs at least one coil".into()));
        }
        for (t, g) in groups.iter().enumerate() {
            if g.len() % num_coils != 0 {
                return Err(Error::shape(
                    format!("multiple of {num_coils} samples in group {t}"),
                    g.len(),
                ));
            }
        }
        Ok(Self {
            num_coils,
            plan_id: plan_id.into(),
            groups,
        })
    }

    pub fn num_times(&self) -> usize {
        self.groups.len()
    }

    pub fn num_coils(&self) -> usize {
        self.num_coils
    }

    pub fn plan_id(&self) -> &str {
        &self.plan_id
    }

    pub fn samples_in_group(&self, t: usize) -> usize {
        self.groups[t].len() / self.num_coils
    }

    pub fn group(&self, t: usize) -> &[Complex64] {
        &self.groups[t]
    }

    pub fn groups(&self) -> &[Vec<Complex64>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Vec<Complex64>] {
        &mut self.groups
    }

    pub fn coil_samples(&self, t: usize, c: usize) -> &[Complex64] {
        let k = self.samples_in_group(t);
        &self.groups[t][c * k..(c + 1) * k]
    }

    pub fn total_samples(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.norm_sqr())
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total_samples() == 0
    }
}

/// Root sum-of-squares combination of a stack of coil images.
pub fn rss_combine(coil_images: &[ComplexVolume]) -> Result<RealVolume> {
    let first = coil_images
        .first()
        .ok_or_else(|| Error::InvalidArgument("rss of an empty stack".into()))?;
    for img in &coil_images[1..] {
        first.ensure_same_shape(img)?;
    }
    let mut acc = vec![0.0; first.shape().len()];
    for img in coil_images {
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v.norm_sqr();
        }
    }
    acc.iter_mut().for_each(|a| *a = a.sqrt());
    RealVolume::from_data(first.shape(), first.spacing(), acc)
}

/// Percentile with linear interpolation between order statistics
/// (`q` in percent, position `q / 100 * (n - 1)` in the sorted sample).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Divide `k` by the 99th percentile of the RSS of its zero-filled coil
/// images. Returns the normalized data and the scale that was divided out.
pub fn percentile_normalize(
    k: &KSpaceSet,
    plan: &crate::acquisition::SamplingPlan,
) -> Result<(KSpaceSet, f64)> {
    if k.is_empty() {
        return Err(Error::Normalization("empty measurement set".into()));
    }
    let coil_images = crate::acquisition::zero_filled_coil_images(k, plan)?;
    let rss = rss_combine(&coil_images)?;
    let scale = percentile(rss.data(), 99.0)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Normalization(format!(
            "99th percentile of the zero-filled RSS is {scale}"
        )));
    }
    let mut out = k.clone();
    out.scale(1.0 / scale);
    Ok((out, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn shape_index_round_trip() {
        let s = Shape3::new(3, 4, 5);
        for i in 0..s.len() {
            let [z, y, x] = s.coords(i);
            assert_eq!(s.index(z, y, x), i);
        }
    }

    #[test]
    fn from_data_rejects_wrong_length_and_bad_spacing() {
        let s = Shape3::cube(2);
        assert!(ComplexVolume::from_data(s, [1.0; 3], vec![c(0.0, 0.0); 7]).is_err());
        assert!(ComplexVolume::from_data(s, [1.0, 0.0, 1.0], vec![c(0.0, 0.0); 8]).is_err());
        assert!(ComplexVolume::from_data(s, [1.0; 3], vec![c(0.0, 0.0); 8]).is_ok());
    }

    #[test]
    fn rss_single_coil_of_ones() {
        let s = Shape3::cube(3);
        let coils = CoilSet::ones(s, [1.0; 3]);
        let rss = rss_combine(coils.maps()).unwrap();
        assert!(rss.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rss_three_four_five() {
        let s = Shape3::cube(1);
        let a = ComplexVolume::from_data(s, [1.0; 3], vec![c(3.0, 0.0)]).unwrap();
        let b = ComplexVolume::from_data(s, [1.0; 3], vec![c(0.0, 4.0)]).unwrap();
        let rss = rss_combine(&[a, b]).unwrap();
        assert_eq!(rss.data()[0], 5.0);
    }

    #[test]
    fn rss_matches_per_voxel_loop() {
        let s = Shape3::cube(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coils: Vec<_> = (0..4)
            .map(|_| {
                ComplexVolume::from_fn(s, [1.0; 3], |_, _, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            })
            .collect();
        let rss = rss_combine(&coils).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for coil in &coils {
                        let v = coil.get(z, y, x);
                        acc += v.re * v.re + v.im * v.im;
                    }
                    assert!((rss.get(z, y, x) - acc.sqrt()).abs() < 1e-15);
                    assert!(rss.get(z, y, x) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn rss_rejects_shape_mismatch() {
        let a = ComplexVolume::zeros(Shape3::cube(2), [1.0; 3]);
        let b = ComplexVolume::zeros(Shape3::cube(3), [1.0; 3]);
        assert!(matches!(rss_combine(&[a, b]), Err(Error::ShapeMismatch { .. })));
        assert!(rss_combine(&[]).is_err());
    }

    #[test]
    fn percentile_matches_index_interpolation() {
        // 100 known magnitudes: 0.5, 1.0, ..., 50.0 (shuffled).
        let mut values: Vec<f64> = (1..=100).map(|i| i as f64 * 0.5).collect();
        values.reverse();
        values.swap(3, 71);
        // position 0.99 * 99 = 98.01 -> sorted[98] + 0.01 * (sorted[99] - sorted[98])
        let expected = 49.5 + 0.01 * 0.5;
        let p = percentile(&values, 99.0).unwrap();
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        assert_eq!(percentile(&values, 0.0).unwrap(), 0.5);
        assert_eq!(percentile(&values, 100.0).unwrap(), 50.0);
    }

    #[test]
    fn coil_set_requires_matching_shapes() {
        let a = ComplexVolume::zeros(Shape3::cube(2), [1.0; 3]);
        let b = ComplexVolume::zeros(Shape3::new(2, 2, 3), [1.0; 3]);
        assert!(CoilSet::new(vec![a.clone(), b]).is_err());
        assert!(CoilSet::new(vec![]).is_err());
        assert_eq!(CoilSet::new(vec![a.clone(), a]).unwrap().num_coils(), 2);
    }
}
