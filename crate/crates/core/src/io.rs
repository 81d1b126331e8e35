//! File formats: the BAF1 raster and the plain-text parameter file.
//!
//! A BAF1 file is the ASCII header `BAF1 <nx> <ny> <channels>\n` followed by
//! `nx * ny * channels` little-endian binary64 values, channel-interleaved
//! and row-major (`value[(y * nx + x) * channels + c]`).
//!
//! A parameter file lists one keyword per line:
//!
//! ```text
//! K 2
//! p 1
//! gamma 0.2 0.8
//! mu 1 0.1
//! sigma 1
//! 0.01
//! mu 2 0.2
//! sigma 2
//! 0.01
//! ```
//!
//! `gamma` marks template weights and `pi` global mixing weights. Each
//! `sigma k` line is followed by `p` rows of `p` values. Numbers are written
//! in shortest round-trip form, so write-read-write is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, MixtureModel, TemplateStack, VoxelGrid, Weighting};
use crate::spdcore::SpdMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BafRaster {
    pub grid: VoxelGrid,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl BafRaster {
    pub fn new(grid: VoxelGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != grid.len() * channels {
            return Err(Error::Format(format!(
                "raster {}x{}x{channels} needs {} values, got {}",
                grid.nx,
                grid.ny,
                grid.len() * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite raster value at index {i}")));
        }
        Ok(BafRaster { grid, channels, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!("BAF1 {} {} {}\n", self.grid.nx, self.grid.ny, self.channels);
        let mut out = Vec::with_capacity(header.len() + 8 * self.data.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .take(128)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing BAF1 header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not ASCII".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != "BAF1" {
            return Err(Error::Format(format!("bad BAF1 header {header:?}")));
        }
        let dim = |s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension {s:?} in header")))
        };
        let (nx, ny, ch) = (dim(fields[1])?, dim(fields[2])?, dim(fields[3])?);
        let grid = VoxelGrid::new(nx, ny).map_err(|_| Error::Format("zero raster dimension".into()))?;
        let body = &bytes[nl + 1..];
        let expected = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(ch))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Format("raster dimensions overflow".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!("raster body has {} bytes, header implies {expected}", body.len())));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        BafRaster::new(grid, ch, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Interprets the channels as template probabilities.
    pub fn into_templates(self) -> Result<TemplateStack> {
        TemplateStack::new(self.grid, self.channels, self.data)
            .map_err(|e| Error::Format(format!("invalid template raster: {e}")))
    }
}

impl From<&TemplateStack> for BafRaster {
    fn from(t: &TemplateStack) -> Self {
        BafRaster { grid: t.grid(), channels: t.k(), data: t.values().to_vec() }
    }
}

/// Serializes a model in the parameter-file grammar.
pub fn params_to_string(model: &MixtureModel) -> String {
    let p = model.dim();
    let mut s = String::new();
    writeln!(s, "K {}", model.k()).unwrap();
    writeln!(s, "p {p}").unwrap();
    let (key, w) = match model.weighting() {
        Weighting::Global(w) => ("pi", w),
        Weighting::Spatial(w) => ("gamma", w),
    };
    writeln!(s, "{key} {}", join(w)).unwrap();
    for (k, c) in model.components().iter().enumerate() {
        writeln!(s, "mu {} {}", k + 1, join(c.mean())).unwrap();
        writeln!(s, "sigma {}", k + 1).unwrap();
        for row in c.cov().as_slice().chunks(p) {
            writeln!(s, "{}", join(row)).unwrap();
        }
    }
    s
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

fn parse_numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {lineno}: {t:?} is not a number")))
        })
        .collect()
}

/// Parses the parameter-file grammar into a validated model.
pub fn params_from_str(text: &str) -> Result<MixtureModel> {
    let fmt = |lineno: usize, msg: String| Error::Format(format!("line {lineno}: {msg}"));
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut header = |key: &str| -> Result<usize> {
        let (n, l) = lines.next().ok_or_else(|| Error::Format(format!("missing {key} line")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(fmt(n, format!("expected {key}")));
        }
        let v = it.next().and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| fmt(n, format!("bad {key} value")))?;
        if it.next().is_some() || v == 0 {
            return Err(fmt(n, format!("bad {key} line")));
        }
        Ok(v)
    };
    let k = header("K")?;
    let p = header("p")?;
    let (n, l) = lines.next().ok_or_else(|| Error::Format("missing weights line".into()))?;
    let (key, rest) = l.split_once(char::is_whitespace).ok_or_else(|| fmt(n, "bad weights line".into()))?;
    let weights = parse_numbers(rest, n)?;
    if weights.len() != k {
        return Err(fmt(n, format!("expected {k} weights, got {}", weights.len())));
    }
    let spatial = match key {
        "gamma" => true,
        "pi" => false,
        other => return Err(fmt(n, format!("expected gamma or pi, got {other:?}"))),
    };
    let mut comps = Vec::with_capacity(k);
    for idx in 1..=k {
        let (n, l) = lines.next().ok_or_else(|| Error::Format(format!("missing mu {idx}")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some("mu") || it.next() != Some(idx.to_string().as_str()) {
            return Err(fmt(n, format!("expected mu {idx}")));
        }
        let mean = parse_numbers(&it.collect::<Vec<_>>().join(" "), n)?;
        if mean.len() != p {
            return Err(fmt(n, format!("mean needs {p} values")));
        }
        let (n, l) = lines.next().ok_or_else(|| Error::Format(format!("missing sigma {idx}")))?;
        if l.split_whitespace().collect::<Vec<_>>() != ["sigma", idx.to_string().as_str()] {
            return Err(fmt(n, format!("expected sigma {idx}")));
        }
        let mut cov = Vec::with_capacity(p * p);
        for _ in 0..p {
            let (n, l) = lines.next().ok_or_else(|| Error::Format(format!("covariance {idx} is truncated")))?;
            let row = parse_numbers(l, n)?;
            if row.len() != p {
                return Err(fmt(n, format!("covariance row needs {p} values")));
            }
            cov.extend(row);
        }
        let cov = SpdMatrix::new(p, cov).map_err(|e| fmt(n, format!("covariance {idx}: {e}")))?;
        comps.push(GaussianComponent::new(mean, cov).map_err(|e| fmt(n, e.to_string()))?);
    }
    if let Some((n, _)) = lines.next() {
        return Err(fmt(n, "unexpected trailing content".into()));
    }
    let w = if spatial { Weighting::Spatial(weights) } else { Weighting::Global(weights) };
    MixtureModel::new(comps, w).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_params(path: &Path, model: &MixtureModel) -> Result<()> {
    fs::write(path, params_to_string(model))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<MixtureModel> {
    params_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::phantom_model;

    #[test]
    fn baf_layout() {
        let r = BafRaster::new(VoxelGrid::new(2, 1).unwrap(), 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let b = r.to_bytes();
        assert!(b.starts_with(b"BAF1 2 1 2\n"));
        assert_eq!(b.len(), 11 + 32);
        assert_eq!(&b[11..19], &1.0f64.to_le_bytes());
        assert_eq!(BafRaster::from_bytes(&b).unwrap(), r);
    }

    #[test]
    fn baf_rejects_bad_input() {
        let good = BafRaster::new(VoxelGrid::new(1, 1).unwrap(), 1, vec![1.0]).unwrap().to_bytes();
        assert!(BafRaster::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(BafRaster::from_bytes(b"BAF2 1 1 1\n\0\0\0\0\0\0\0\0").is_err());
        let mut nan = b"BAF1 1 1 1\n".to_vec();
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(BafRaster::from_bytes(&nan), Err(Error::Format(_))));
    }

    #[test]
    fn params_round_trip() {
        let m = phantom_model();
        let s = params_to_string(&m);
        assert!(s.starts_with("K 3\np 2\ngamma 0.94 0.01 0.05\nmu 1 4.91 6.68\nsigma 1\n1.23 1.63\n1.63 2.21\n"));
        let back = params_from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(params_to_string(&back), s);
    }

    #[test]
    fn params_errors() {
        assert!(params_from_str("K 1\np 1\npi 1\nmu 1 0\nsigma 1\n-1\n").is_err());
        assert!(params_from_str("K 1\np 1\nweights 1\nmu 1 0\nsigma 1\n1\n").is_err());
        assert!(params_from_str("K 2\np 1\npi 0.5 0.5\nmu 1 0\nsigma 1\n1\n").is_err());
        assert!(params_from_str("K 1\np 1\npi 1\nmu 1 0\nsigma 1\n1\nextra\n").is_err());
        assert!(params_from_str("K 1\np 1\npi 1\nmu 1 0\nsigma 1\n1\n").is_ok());
    }
}
