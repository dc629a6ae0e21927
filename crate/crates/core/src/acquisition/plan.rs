use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::Mask2D;
use crate::error::{Error, Result};
use crate::volume::Shape3;

/// Fully sampled axis. The mask lives on the plane of the other two axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutAxis {
    #[default]
    Z,
    Y,
    X,
}

impl ReadoutAxis {
    pub fn index(self) -> usize {
        match self {
            ReadoutAxis::Z => 0,
            ReadoutAxis::Y => 1,
            ReadoutAxis::X => 2,
        }
    }

    /// Axes spanning the phase-encode plane, in storage order.
    pub fn phase_axes(self) -> (usize, usize) {
        match self {
            ReadoutAxis::Z => (1, 2),
            ReadoutAxis::Y => (0, 2),
            ReadoutAxis::X => (0, 1),
        }
    }

    pub fn phase_shape(self, shape: Shape3) -> (usize, usize) {
        let d = shape.dims();
        let (a, b) = self.phase_axes();
        (d[a], d[b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingScheme {
    LinearCircular,
    InterleavedCenterFirst,
    Centric,
    Random,
}

/// Volume geometry a plan is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    #[serde(default)]
    pub readout: ReadoutAxis,
}

impl Geometry {
    pub fn new(shape: Shape3, spacing: [f64; 3], readout: ReadoutAxis) -> Self {
        Self {
            shape,
            spacing,
            readout,
        }
    }

    pub fn phase_shape(&self) -> (usize, usize) {
        self.readout.phase_shape(self.shape)
    }
}

/// Mask plus a time-ordered partition of its lines into `T = shots *
/// states_per_shot` groups, one per motion state.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    id: String,
    geometry: Geometry,
    mask: Mask2D,
    scheme: OrderingScheme,
    shots: usize,
    states_per_shot: usize,
    lines: Vec<Vec<usize>>,
    indices: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    id: String,
    geometry: Geometry,
    mask_rows: usize,
    mask_cols: usize,
    mask_rle: Vec<usize>,
    scheme: OrderingScheme,
    shots: usize,
    states_per_shot: usize,
    groups: Vec<Vec<usize>>,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn balanced_sizes(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

impl SamplingPlan {
    /// Build a plan from explicit line groups (raster indices into the mask).
    pub fn from_groups(
        geometry: Geometry,
        mask: Mask2D,
        scheme: OrderingScheme,
        shots: usize,
        states_per_shot: usize,
        lines: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if (mask.rows(), mask.cols()) != geometry.phase_shape() {
            return Err(Error::shape(
                format!("{:?} phase-encode plane", geometry.phase_shape()),
                format!("({}, {}) mask", mask.rows(), mask.cols()),
            ));
        }
        if lines.len() != shots * states_per_shot {
            return Err(Error::Sampling(format!(
                "{} groups for {shots} shots x {states_per_shot} states",
                lines.len()
            )));
        }
        let mut seen = vec![false; mask.len()];
        for g in &lines {
            for &l in g {
                if l >= mask.len() || !mask.values()[l] {
                    return Err(Error::Sampling(format!("line {l} is not in the mask")));
                }
                if seen[l] {
                    return Err(Error::Sampling(format!("line {l} is claimed by two groups")));
                }
                seen[l] = true;
            }
        }
        if seen.iter().filter(|&&v| v).count() != mask.count() {
            return Err(Error::Sampling("groups do not cover the mask".into()));
        }
        let indices = lines.iter().map(|g| line_indices(&geometry, mask.cols(), g)).collect();
        let mut h = fnv1a(mask.to_rle().iter().flat_map(|r| r.to_le_bytes()), 0xcbf2_9ce4_8422_2325);
        for g in &lines {
            h = fnv1a(g.iter().flat_map(|l| l.to_le_bytes()), h);
            h = fnv1a([0xff], h);
        }
        h = fnv1a(
            geometry.shape.dims().iter().flat_map(|d| d.to_le_bytes()),
            h,
        );
        let id = format!("plan-{h:016x}");
        Ok(Self {
            id,
            geometry,
            mask,
            scheme,
            shots,
            states_per_shot,
            lines,
            indices,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn shape(&self) -> Shape3 {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn mask(&self) -> &Mask2D {
        &self.mask
    }

    pub fn scheme(&self) -> OrderingScheme {
        self.scheme
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn states_per_shot(&self) -> usize {
        self.states_per_shot
    }

    pub fn num_times(&self) -> usize {
        self.lines.len()
    }

    /// Mask lines (raster indices over the phase-encode plane) of group `t`.
    pub fn group_lines(&self, t: usize) -> &[usize] {
        &self.lines[t]
    }

    /// Flat grid indices of the `K_t` samples of group `t`, line by line with
    /// the readout running fastest.
    pub fn group_indices(&self, t: usize) -> &[usize] {
        &self.indices[t]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PlanFile {
            id: self.id.clone(),
            geometry: self.geometry,
            mask_rows: self.mask.rows(),
            mask_cols: self.mask.cols(),
            mask_rle: self.mask.to_rle(),
            scheme: self.scheme,
            shots: self.shots,
            states_per_shot: self.states_per_shot,
            groups: self.lines.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(s)?;
        let mask = Mask2D::from_rle(file.mask_rows, file.mask_cols, &file.mask_rle)?;
        let plan = Self::from_groups(
            file.geometry,
            mask,
            file.scheme,
            file.shots,
            file.states_per_shot,
            file.groups,
        )?;
        if plan.id != file.id {
            return Err(Error::Format(format!(
                "plan id {} does not match its contents ({})",
                file.id, plan.id
            )));
        }
        Ok(plan)
    }
}

fn line_indices(geometry: &Geometry, cols: usize, lines: &[usize]) -> Vec<usize> {
    let shape = geometry.shape;
    let (pa, pb) = geometry.readout.phase_axes();
    let ra = geometry.readout.index();
    let nr = shape.dims()[ra];
    let mut out = Vec::with_capacity(lines.len() * nr);
    for &l in lines {
        let (a, b) = (l / cols, l % cols);
        for r in 0..nr {
            let mut c = [0usize; 3];
            c[pa] = a;
            c[pb] = b;
            c[ra] = r;
            out.push(shape.index(c[0], c[1], c[2]));
        }
    }
    out
}

/// Order the mask lines by `scheme` and cut them into `shots` contiguous
/// balanced shots, each split into `states_per_shot` contiguous groups.
pub fn make_ordering(
    geometry: Geometry,
    mask: &Mask2D,
    scheme: OrderingScheme,
    shots: usize,
    states_per_shot: usize,
    seed: u64,
) -> Result<SamplingPlan> {
    let on = mask.on_lines();
    if shots == 0 || states_per_shot == 0 {
        return Err(Error::InvalidArgument("shots and states_per_shot must be positive".into()));
    }
    if shots * states_per_shot > on.len() {
        return Err(Error::Sampling(format!(
            "{shots} shots x {states_per_shot} states exceed the {} sampled lines",
            on.len()
        )));
    }
    let cols = mask.cols();
    let (ca, cb) = mask.center();
    let center = ca * cols + cb;
    let coords = |l: usize| ((l / cols) as f64, (l % cols) as f64);
    let dist2 = |l: usize| {
        let (a, b) = coords(l);
        (a - ca as f64).powi(2) + (b - cb as f64).powi(2)
    };

    let ordered: Vec<usize> = match scheme {
        OrderingScheme::LinearCircular => {
            let start = on.iter().position(|&l| l >= center).unwrap_or(0);
            on[start..].iter().chain(&on[..start]).copied().collect()
        }
        OrderingScheme::InterleavedCenterFirst => {
            let in_core = |l: usize| {
                let (a, b) = (l / cols, l % cols);
                a.abs_diff(ca) <= 1 && b.abs_diff(cb) <= 1
            };
            let core: Vec<usize> = on.iter().copied().filter(|&l| in_core(l)).collect();
            let mut rest: Vec<(usize, usize)> = on
                .iter()
                .copied()
                .filter(|&l| !in_core(l))
                .enumerate()
                .collect();
            rest.sort_by_key(|&(j, _)| (j % shots, j));
            core.into_iter().chain(rest.into_iter().map(|(_, l)| l)).collect()
        }
        OrderingScheme::Centric => {
            let mut v = on.clone();
            v.sort_by(|&a, &b| dist2(a).total_cmp(&dist2(b)).then(a.cmp(&b)));
            v
        }
        OrderingScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nearest = *on
                .iter()
                .min_by(|&&a, &&b| dist2(a).total_cmp(&dist2(b)).then(a.cmp(&b)))
                .expect("nonempty mask");
            let mut rest: Vec<usize> = on.iter().copied().filter(|&l| l != nearest).collect();
            rest.shuffle(&mut rng);
            std::iter::once(nearest).chain(rest).collect()
        }
    };

    let mut groups = Vec::with_capacity(shots * states_per_shot);
    let mut pos = 0;
    for shot in balanced_sizes(ordered.len(), shots) {
        let shot_lines = &ordered[pos..pos + shot];
        let mut sub = 0;
        for size in balanced_sizes(shot, states_per_shot) {
            groups.push(shot_lines[sub..sub + size].to_vec());
            sub += size;
        }
        pos += shot;
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Sampling(format!(
            "shots of {} lines cannot be split into {states_per_shot} states",
            ordered.len() / shots
        )));
    }
    SamplingPlan::from_groups(geometry, mask.clone(), scheme, shots, states_per_shot, groups)
}
