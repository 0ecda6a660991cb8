//! Fixed-grid densities, Gaussian KDE and the `MRD1` container.
//!
//! `MRD1` layout (all integers and floats little-endian):
//!
//! | offset | size  | field                                       |
//! |--------|-------|---------------------------------------------|
//! | 0      | 4     | magic `MRD1`                                |
//! | 4      | 1     | kind: 0 = melody, 1 = rhythm                |
//! | 5      | 1     | normalization: 0 = integral, 1 = sum        |
//! | 6      | 2     | reserved, zero                              |
//! | 8      | 8     | grid start (f64)                            |
//! | 16     | 8     | grid step (f64)                             |
//! | 24     | 4     | n (u32)                                     |
//! | 28     | 8 n   | density values (f64)                        |

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRD1";
const HEADER_LEN: usize = 28;
/// Kernel support, in bandwidths, beyond which contributions are dropped.
const KERNEL_REACH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Melody,
    Rhythm,
}

impl Kind {
    pub const ALL: [Kind; 2] = [Kind::Melody, Kind::Rhythm];

    pub fn grid(self) -> Grid {
        match self {
            Kind::Melody => Grid {
                start: -24.0,
                step: 0.05,
                n: 961,
            },
            Kind::Rhythm => Grid {
                start: 0.0,
                step: 0.001,
                n: 1001,
            },
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            Kind::Melody => Normalization::Integral,
            Kind::Rhythm => Normalization::Sum,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Melody => "melody",
            Kind::Rhythm => "rhythm",
        }
    }

    fn code(self) -> u8 {
        match self {
            Kind::Melody => 0,
            Kind::Rhythm => 1,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "melody" => Ok(Kind::Melody),
            "rhythm" => Ok(Kind::Rhythm),
            other => Err(Error::InvalidArgument(format!("unknown kind `{other}`"))),
        }
    }
}

/// How a density's values are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `sum(values) * step == 1`.
    Integral,
    /// `sum(values) == 1`.
    Sum,
}

impl Normalization {
    fn code(self) -> u8 {
        match self {
            Normalization::Integral => 0,
            Normalization::Sum => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub step: f64,
    pub n: usize,
}

impl Grid {
    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    /// Nearest grid index to `x`, if `x` lies within the grid.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let i = ((x - self.start) / self.step).round();
        (i >= 0.0 && (i as usize) < self.n).then_some(i as usize)
    }
}

/// Unnormalized Gaussian KDE `sum_k phi((x - s_k) / h) / (n h)` evaluated
/// on `grid`. Kernels are cut at eight bandwidths.
pub fn gaussian_kde(samples: &[f64], grid: &Grid, bandwidth: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.n];
    if samples.is_empty() {
        return out;
    }
    let reach = KERNEL_REACH * bandwidth;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * samples.len() as f64);
    let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let last = (grid.n - 1) as f64;
    for &s in samples {
        let lo = ((s - reach - grid.start) / grid.step).ceil().max(0.0);
        let hi = ((s + reach - grid.start) / grid.step).floor().min(last);
        if hi < lo {
            continue;
        }
        for i in lo as usize..=hi as usize {
            let d = grid.point(i) - s;
            out[i] += norm * (-d * d * inv_two_h2).exp();
        }
    }
    out
}

/// A per-song (or aggregated) density on its kind's fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub kind: Kind,
    pub values: Vec<f64>,
}

impl Density {
    /// Rescales `values` to the kind's normalization. Fails on zero mass.
    pub fn normalized(kind: Kind, mut values: Vec<f64>) -> Result<Self> {
        let grid = kind.grid();
        if values.len() != grid.n {
            return Err(Error::GridMismatch(format!(
                "{kind} density needs {} values, got {}",
                grid.n,
                values.len()
            )));
        }
        let mass: f64 = values.iter().sum();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidValue(format!("{kind} density has mass {mass}")));
        }
        let scale = match kind.normalization() {
            Normalization::Integral => 1.0 / (mass * grid.step),
            Normalization::Sum => 1.0 / mass,
        };
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(Self { kind, values })
    }

    pub fn grid(&self) -> Grid {
        self.kind.grid()
    }

    /// Mass under the kind's normalization; 1 for a valid density.
    pub fn total(&self) -> f64 {
        let s: f64 = self.values.iter().sum();
        match self.kind.normalization() {
            Normalization::Integral => s * self.grid().step,
            Normalization::Sum => s,
        }
    }

    /// Probability vector over the grid cells (sums to one).
    pub fn probabilities(&self) -> Vec<f64> {
        let scale = match self.kind.normalization() {
            Normalization::Integral => self.grid().step,
            Normalization::Sum => 1.0,
        };
        self.values.iter().map(|v| v * scale).collect()
    }

    /// Inverse of [`Density::probabilities`].
    pub fn from_probabilities(kind: Kind, probs: Vec<f64>) -> Self {
        let scale = match kind.normalization() {
            Normalization::Integral => 1.0 / kind.grid().step,
            Normalization::Sum => 1.0,
        };
        Self {
            kind,
            values: probs.into_iter().map(|p| p * scale).collect(),
        }
    }

    /// Grid indices of strict local maxima (plateaus report their first
    /// index), sorted by descending value.
    pub fn peaks(&self) -> Vec<usize> {
        let v = &self.values;
        let mut peaks: Vec<usize> = (0..v.len())
            .filter(|&i| {
                let left_ok = i == 0 || v[i] > v[i - 1];
                let mut j = i + 1;
                while j < v.len() && v[j] == v[i] {
                    j += 1;
                }
                let right_ok = j == v.len() || v[i] > v[j];
                v[i] > 0.0 && left_ok && right_ok
            })
            .collect();
        peaks.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        peaks
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let grid = self.grid();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind.code());
        out.push(self.kind.normalization().code());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&grid.start.to_le_bytes());
        out.extend_from_slice(&grid.step.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadDensityFile(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing MRD1 header"));
        }
        let kind = match bytes[4] {
            0 => Kind::Melody,
            1 => Kind::Rhythm,
            k => return Err(bad(&format!("unknown kind code {k}"))),
        };
        if bytes[5] != kind.normalization().code() {
            return Err(bad("normalization code does not match kind"));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let start = f64_at(8);
        let step = f64_at(16);
        let n = u32::from_le_bytes(bytes[24..28].try_into().expect("4 bytes")) as usize;
        let grid = kind.grid();
        if start != grid.start || step != grid.step || n != grid.n {
            return Err(bad(&format!(
                "grid ({start}, {step}, {n}) does not match {kind} grid"
            )));
        }
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(bad("payload length does not match n"));
        }
        let values = (0..n).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
        Ok(Self { kind, values })
    }

    /// Writes the `MRD1` file and fsyncs it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadDensityFile(m) => Error::BadDensityFile(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `grid,density` CSV; values use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let grid = self.grid();
        let mut out = String::from("grid,density\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", grid.point(i), v));
        }
        out
    }

    /// Parses [`Density::to_csv`] output; the kind is inferred from the
    /// grid.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("grid,density") {
            return Err(Error::BadDensityFile("missing `grid,density` header".into()));
        }
        let mut xs = Vec::new();
        let mut values = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (x, v) = line
                .split_once(',')
                .ok_or_else(|| Error::BadDensityFile(format!("bad line `{line}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::BadDensityFile(format!("bad number `{s}`")))
            };
            xs.push(parse(x)?);
            values.push(parse(v)?);
        }
        let kind = Kind::ALL
            .into_iter()
            .find(|k| {
                let g = k.grid();
                g.n == xs.len()
                    && xs
                        .iter()
                        .enumerate()
                        .all(|(i, &x)| (x - g.point(i)).abs() < 1e-9)
            })
            .ok_or_else(|| Error::BadDensityFile("grid matches neither kind".into()))?;
        Ok(Self { kind, values })
    }
}
