//! Binary volume and k-space files, trajectory CSV.
//!
//! Volume file layout:
//!
//! ```text
//! b"MDPSVOL1" | u32 LE header length | JSON header | payload
//! ```
//!
//! The header is `{"shape": [nz, ny, nx], "spacing": [..], "dtype": "complex64"}`
//! plus `"count"` when the file holds a stack of equally shaped volumes. The
//! payload is little-endian `f32` `(re, im)` pairs in row-major order. K-space
//! files use the magic `b"MDPSKSP1"` and a header with `num_coils`,
//! `plan_id` and `group_sizes` (complex samples per time group, all coils).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionState, MotionTrajectory};
use crate::volume::{ComplexVolume, KSpaceSet, Shape3};

pub const VOLUME_MAGIC: &[u8; 8] = b"MDPSVOL1";
pub const KSPACE_MAGIC: &[u8; 8] = b"MDPSKSP1";
const DTYPE: &str = "complex64";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KSpaceHeader {
    num_coils: usize,
    plan_id: String,
    group_sizes: Vec<usize>,
    dtype: String,
}

fn encode(magic: &[u8; 8], header: &impl Serialize, samples: impl Iterator<Item = Complex64>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in samples {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    Ok(out)
}

/// Split a file into its JSON header and payload bytes.
fn decode<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + len {
        return Err(Error::Format(format!(
            "header claims {len} bytes but only {} remain",
            bytes.len() - 12
        )));
    }
    Ok((&bytes[12..12 + len], &bytes[12 + len..]))
}

fn read_samples(payload: &[u8], expected: usize) -> Result<Vec<Complex64>> {
    let expected_bytes = expected * 8;
    if payload.len() != expected_bytes {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {expected_bytes} bytes ({expected} complex samples), found {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}

fn check_dtype(dtype: &str) -> Result<()> {
    if dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {dtype:?}, expected {DTYPE:?}")));
    }
    Ok(())
}

pub fn encode_volume_stack(volumes: &[ComplexVolume]) -> Result<Vec<u8>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot save an empty stack".into()))?;
    for v in &volumes[1..] {
        first.ensure_same_shape(v)?;
    }
    let header = VolumeHeader {
        shape: first.shape().dims(),
        spacing: first.spacing(),
        dtype: DTYPE.into(),
        count: (volumes.len() != 1).then_some(volumes.len()),
    };
    encode(VOLUME_MAGIC, &header, volumes.iter().flat_map(|v| v.data().iter().copied()))
}

pub fn decode_volume_stack(bytes: &[u8]) -> Result<Vec<ComplexVolume>> {
    let (header, payload) = decode(VOLUME_MAGIC, bytes)?;
    let header: VolumeHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
    check_dtype(&header.dtype)?;
    let [nz, ny, nx] = header.shape;
    let shape = Shape3::new(nz, ny, nx);
    let count = header.count.unwrap_or(1);
    let samples = read_samples(payload, shape.len() * count)?;
    samples
        .chunks(shape.len().max(1))
        .take(count)
        .map(|chunk| ComplexVolume::from_data(shape, header.spacing, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format(format!("invalid volume header: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Write one volume. Values are stored as `f32`.
pub fn save_volume(v: &ComplexVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume_stack(std::slice::from_ref(v))?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<ComplexVolume> {
    let mut stack = decode_volume_stack(&read_file(path.as_ref())?)?;
    if stack.len() != 1 {
        return Err(Error::Format(format!("expected a single volume, found {}", stack.len())));
    }
    Ok(stack.remove(0))
}

pub fn save_volume_stack(volumes: &[ComplexVolume], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume_stack(volumes)?)
}

pub fn load_volume_stack(path: impl AsRef<Path>) -> Result<Vec<ComplexVolume>> {
    decode_volume_stack(&read_file(path.as_ref())?)
}

pub fn encode_kspace(k: &KSpaceSet) -> Result<Vec<u8>> {
    let header = KSpaceHeader {
        num_coils: k.num_coils(),
        plan_id: k.plan_id().to_string(),
        group_sizes: k.groups().iter().map(Vec::len).collect(),
        dtype: DTYPE.into(),
    };
    encode(KSPACE_MAGIC, &header, k.groups().iter().flat_map(|g| g.iter().copied()))
}

pub fn decode_kspace(bytes: &[u8]) -> Result<KSpaceSet> {
    let (header, payload) = decode(KSPACE_MAGIC, bytes)?;
    let header: KSpaceHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("corrupt header: {e}")))?;
    check_dtype(&header.dtype)?;
    let total = header.group_sizes.iter().sum();
    let samples = read_samples(payload, total)?;
    let mut groups = Vec::with_capacity(header.group_sizes.len());
    let mut pos = 0;
    for &n in &header.group_sizes {
        groups.push(samples[pos..pos + n].to_vec());
        pos += n;
    }
    KSpaceSet::new(header.num_coils, header.plan_id, groups)
        .map_err(|e| Error::Format(format!("invalid k-space header: {e}")))
}

pub fn save_kspace(k: &KSpaceSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_kspace(k)?)
}

pub fn load_kspace(path: impl AsRef<Path>) -> Result<KSpaceSet> {
    decode_kspace(&read_file(path.as_ref())?)
}

const TRAJECTORY_COLUMNS: [&str; 7] = [
    "time_index", "t_z_mm", "t_y_mm", "t_x_mm", "r_z_deg", "r_y_deg", "r_x_deg",
];

/// Trajectory as CSV with a 1-based `time_index` column.
pub fn write_trajectory_csv<W: Write>(v: &MotionTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_COLUMNS)?;
    for (t, s) in v.states.iter().enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(s.to_array().iter().map(|p| format!("{p:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<MotionTrajectory> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(TRAJECTORY_COLUMNS) {
        return Err(Error::Format(format!("unexpected trajectory columns {headers:?}")));
    }
    let mut states = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        if vals[0] as usize != i + 1 {
            return Err(Error::Format(format!("row {} has time_index {}", i + 1, vals[0])));
        }
        states.push(MotionState::from_array([vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]]));
    }
    Ok(MotionTrajectory::new(states))
}

pub fn save_trajectory(v: &MotionTrajectory, path: impl AsRef<Path>) -> Result<()> {
    write_trajectory_csv(v, fs::File::create(path.as_ref())?)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<MotionTrajectory> {
    read_trajectory_csv(fs::File::open(path.as_ref())?)
}
