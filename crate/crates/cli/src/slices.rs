//! Central-slice export as 8-bit grayscale PNG with a min/max sidecar.

use std::path::Path;

use anyhow::{Context, Result};
use mdps_core::RealVolume;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    /// Fixed `z`, rows `y`, columns `x`.
    Axial,
    /// Fixed `y`, rows `z`, columns `x`.
    Coronal,
    /// Fixed `x`, rows `z`, columns `y`.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// Row-major 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub plane: Plane,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// `(row, col)` of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

pub fn central_slice(v: &RealVolume, plane: Plane) -> Slice {
    let [nz, ny, nx] = v.shape().dims();
    let (index, height, width) = match plane {
        Plane::Axial => (nz / 2, ny, nx),
        Plane::Coronal => (ny / 2, nz, nx),
        Plane::Sagittal => (nx / 2, nz, ny),
    };
    let mut data = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            data.push(match plane {
                Plane::Axial => v.get(index, r, c),
                Plane::Coronal => v.get(r, index, c),
                Plane::Sagittal => v.get(r, c, index),
            });
        }
    }
    Slice {
        plane,
        index,
        width,
        height,
        data,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Window {
    pub source: String,
    pub plane: Plane,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

/// Maps `[min, max]` of the slice linearly onto `0..=255`. A constant slice
/// maps to zero.
pub fn quantize(s: &Slice) -> (Vec<u8>, f64, f64) {
    let min = s.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels = s
        .data
        .iter()
        .map(|&v| if range > 0.0 { ((v - min) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    (pixels, min, max)
}

/// Writes `<stem>.png` and `<stem>.json`; returns the file names.
pub fn write_slice(s: &Slice, source: &str, dir: &Path, stem: &str) -> Result<[String; 2]> {
    let (pixels, min, max) = quantize(s);
    let png = format!("{stem}.png");
    let json = format!("{stem}.json");
    image::GrayImage::from_raw(s.width as u32, s.height as u32, pixels)
        .context("slice buffer size mismatch")?
        .save(dir.join(&png))
        .with_context(|| format!("writing {png}"))?;
    let window = Window {
        source: source.to_string(),
        plane: s.plane,
        index: s.index,
        width: s.width,
        height: s.height,
        min,
        max,
    };
    std::fs::write(dir.join(&json), serde_json::to_string_pretty(&window)? + "\n")?;
    Ok([png, json])
}
