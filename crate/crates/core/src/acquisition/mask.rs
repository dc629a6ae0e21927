use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask over the phase-encode plane. Each `on` entry stands for one
/// fully sampled readout line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask2D {
    rows: usize,
    cols: usize,
    on: Vec<bool>,
}

impl Mask2D {
    pub fn new(rows: usize, cols: usize, on: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
        }
        if on.len() != rows * cols {
            return Err(Error::shape(rows * cols, on.len()));
        }
        Ok(Self { rows, cols, on })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            on: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.on.len()
    }

    pub fn is_empty(&self) -> bool {
        self.on.is_empty()
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.on[a * self.cols + b]
    }

    pub fn values(&self) -> &[bool] {
        &self.on
    }

    pub fn count(&self) -> usize {
        self.on.iter().filter(|&&v| v).count()
    }

    /// Raster indices of the `on` lines.
    pub fn on_lines(&self) -> Vec<usize> {
        (0..self.on.len()).filter(|&i| self.on[i]).collect()
    }

    /// The k-space center line `(rows / 2, cols / 2)`.
    pub fn center(&self) -> (usize, usize) {
        (self.rows / 2, self.cols / 2)
    }

    pub fn acceleration(&self) -> f64 {
        self.len() as f64 / self.count() as f64
    }

    /// Run lengths of alternating off/on stretches in raster order, starting
    /// with an off run (possibly of length zero).
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in &self.on {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(rows: usize, cols: usize, runs: &[usize]) -> Result<Self> {
        let mut on = Vec::with_capacity(rows * cols);
        for (i, &r) in runs.iter().enumerate() {
            on.extend(std::iter::repeat(i % 2 == 1).take(r));
        }
        Mask2D::new(rows, cols, on)
            .map_err(|_| Error::Format(format!("mask run lengths do not cover a {rows}x{cols} grid")))
    }
}

fn acl_side(n: usize, acl_fraction: f64) -> usize {
    ((acl_fraction.sqrt() * n as f64).round() as usize).min(n)
}

/// Central auto-calibration block: a `round(sqrt(acl) n)` square (per axis)
/// around the center line, so its area is the requested fraction of the plane.
pub fn acl_region(rows: usize, cols: usize, acl_fraction: f64) -> Vec<bool> {
    let (sa, sb) = (acl_side(rows, acl_fraction), acl_side(cols, acl_fraction));
    let (a0, b0) = (rows / 2 - sa / 2, cols / 2 - sb / 2);
    let mut region = vec![false; rows * cols];
    for a in a0..a0 + sa {
        for b in b0..b0 + sb {
            region[a * cols + b] = true;
        }
    }
    region
}

fn validate(rows: usize, cols: usize, r: f64, acl_fraction: f64) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
    }
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("acceleration must be >= 1, got {r}")));
    }
    if !(0.0..1.0).contains(&acl_fraction) {
        return Err(Error::InvalidArgument(format!(
            "ACL fraction must lie in [0, 1), got {acl_fraction}"
        )));
    }
    Ok(())
}

/// Cartesian line mask: the ACL block plus uniformly drawn lines, `round(total / R)` lines in all.
pub fn make_cartesian_mask(pe_shape: (usize, usize), r: f64, acl_fraction: f64, seed: u64) -> Result<Mask2D> {
    let (rows, cols) = pe_shape;
    validate(rows, cols, r, acl_fraction)?;
    let total = rows * cols;
    let budget = ((total as f64 / r).round() as usize).max(1);
    if budget >= total {
        return Ok(Mask2D::full(rows, cols));
    }
    let mut on = acl_region(rows, cols, acl_fraction);
    let acl = on.iter().filter(|&&v| v).count();
    if acl > budget {
        return Err(Error::Sampling(format!(
            "ACL block has {acl} lines but R = {r} allows only {budget}"
        )));
    }
    let mut rest: Vec<usize> = (0..total).filter(|&i| !on[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    for &i in &rest[..budget - acl] {
        on[i] = true;
    }
    Mask2D::new(rows, cols, on)
}

/// Dart throwing in a fixed candidate order; returns accepted non-ACL points.
fn dart_throw(rows: usize, cols: usize, order: &[usize], radius: f64) -> Vec<usize> {
    let cell = radius.max(1.0);
    let gr = (rows as f64 / cell).ceil() as usize + 1;
    let gc = (cols as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gr * gc];
    let r2 = radius * radius;
    let mut accepted = Vec::new();
    for &i in order {
        let (a, b) = ((i / cols) as f64, (i % cols) as f64);
        let (ca, cb) = ((a / cell) as usize, (b / cell) as usize);
        let mut ok = true;
        'search: for na in ca.saturating_sub(1)..(ca + 2).min(gr) {
            for nb in cb.saturating_sub(1)..(cb + 2).min(gc) {
                for &j in &grid[na * gc + nb] {
                    let (ja, jb) = ((j / cols) as f64, (j % cols) as f64);
                    if (ja - a).powi(2) + (jb - b).powi(2) < r2 {
                        ok = false;
                        break 'search;
                    }
                }
            }
        }
        if ok {
            grid[ca * gc + cb].push(i);
            accepted.push(i);
        }
    }
    accepted
}

/// Result of [`make_poisson_disc_mask`]: the mask and the disc radius used.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonDiscMask {
    pub mask: Mask2D,
    pub radius: f64,
}

/// Poisson-disc line mask with the radius bisected to reach `round(total / R)` lines.
///
/// Non-ACL points keep a pairwise distance of at least `radius` (in line
/// units). The bisection finds the largest radius whose dart throw still
/// reaches the target; surplus points are then dropped at random.
pub fn make_poisson_disc_mask(
    pe_shape: (usize, usize),
    r: f64,
    acl_fraction: f64,
    seed: u64,
) -> Result<PoissonDiscMask> {
    let (rows, cols) = pe_shape;
    validate(rows, cols, r, acl_fraction)?;
    let total = rows * cols;
    let target = ((total as f64 / r).round() as usize).max(1);
    if target >= total {
        return Ok(PoissonDiscMask {
            mask: Mask2D::full(rows, cols),
            radius: 0.0,
        });
    }
    let acl = acl_region(rows, cols, acl_fraction);
    let acl_count = acl.iter().filter(|&&v| v).count();
    if acl_count > target {
        return Err(Error::Sampling(format!(
            "ACL block has {acl_count} lines but R = {r} allows only {target}"
        )));
    }
    let need = target - acl_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..total).filter(|&i| !acl[i]).collect();
    order.shuffle(&mut rng);

    let count = |radius: f64| dart_throw(rows, cols, &order, radius).len();
    let (mut lo, mut hi) = (1.0f64, (rows.max(cols)) as f64);
    if count(lo) < need {
        return Err(Error::Sampling(format!(
            "radius 1 only places {} of {need} points (density {:.3})",
            count(lo) + acl_count,
            (count(lo) + acl_count) as f64 / total as f64
        )));
    }
    if count(hi) >= need {
        lo = hi;
    } else {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if count(mid) >= need {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-9 {
                break;
            }
        }
    }
    let mut points = dart_throw(rows, cols, &order, lo);
    points.shuffle(&mut rng);
    points.truncate(need);

    let mut on = acl;
    for i in points {
        on[i] = true;
    }
    let mask = Mask2D::new(rows, cols, on)?;
    let achieved = mask.acceleration();
    if (achieved - r).abs() > 0.02 * r {
        return Err(Error::Sampling(format!(
            "Poisson-disc mask reached R = {achieved:.3} instead of {r}"
        )));
    }
    Ok(PoissonDiscMask { mask, radius: lo })
}
