//! IMGF/SGRAM arrays, `.geom` sidecars and PGM previews.
//!
//! Arrays are an ASCII header line (`IMGF nx ny` or `SGRAM n_views n_dets`)
//! followed by row-major little-endian f32 values.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use stride_core::geometry::{make_sparse_mask, FanBeamGeometry, SparseMask};

use crate::error::{CliError, CliResult};

const IMAGE_TAG: &str = "IMGF";
const SINOGRAM_TAG: &str = "SGRAM";
const INTERVAL_KEY: &str = "sparse_interval";

fn write_array(path: &Path, tag: &str, dims: (usize, usize), values: &Array2<f64>) -> CliResult<()> {
    let mut buf = Vec::with_capacity(32 + values.len() * 4);
    writeln!(buf, "{tag} {} {}", dims.0, dims.1).expect("writing to memory");
    for v in values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

fn read_array(path: &Path, tag: &str) -> CliResult<(usize, usize, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| CliError::io(path, e))?;
    let bad = |why: &str| CliError::Data(format!("{}: {why}", path.display()));
    let mut parts = header.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(bad(&format!("expected a {tag} header")));
    }
    let mut dim = || -> CliResult<usize> {
        parts
            .next()
            .and_then(|p| p.parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| bad("bad dimensions in header"))
    };
    let (a, b) = (dim()?, dim()?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| CliError::io(path, e))?;
    if raw.len() != a * b * 4 {
        return Err(bad(&format!("expected {} bytes of data, found {}", a * b * 4, raw.len())));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((a, b, values))
}

/// Writes an `(ny, nx)` image.
pub fn write_image(path: &Path, values: &Array2<f64>) -> CliResult<()> {
    let (ny, nx) = values.dim();
    write_array(path, IMAGE_TAG, (nx, ny), values)
}

pub fn read_image(path: &Path) -> CliResult<Array2<f64>> {
    let (nx, ny, v) = read_array(path, IMAGE_TAG)?;
    Ok(Array2::from_shape_vec((ny, nx), v).expect("length checked"))
}

pub fn write_sinogram(path: &Path, values: &Array2<f64>) -> CliResult<()> {
    write_array(path, SINOGRAM_TAG, values.dim(), values)
}

pub fn read_sinogram(path: &Path) -> CliResult<Array2<f64>> {
    let (v, d, values) = read_array(path, SINOGRAM_TAG)?;
    Ok(Array2::from_shape_vec((v, d), values).expect("length checked"))
}

/// The `.geom` file next to a sinogram.
pub fn geometry_path(sinogram: &Path) -> PathBuf {
    sinogram.with_extension("geom")
}

/// Geometry plus the sparse interval of the measurement, if any.
pub fn write_geometry(path: &Path, g: &FanBeamGeometry, interval: Option<usize>) -> CliResult<()> {
    let mut text = g.to_kv();
    if let Some(r) = interval {
        text.push_str(&format!("{INTERVAL_KEY}={r}\n"));
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_geometry(path: &Path) -> CliResult<(FanBeamGeometry, SparseMask)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut interval = 1;
    let mut rest = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == INTERVAL_KEY => {
                interval = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Data(format!("{}: bad {INTERVAL_KEY} {v:?}", path.display())))?;
            }
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let g = FanBeamGeometry::from_kv(&rest).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mask = make_sparse_mask(g.n_views, interval)?;
    Ok((g, mask))
}

/// 8-bit binary PGM scaled so that the maximum maps to 255; negative values
/// clip to black. View-only: the quantization is lossy.
pub fn write_pgm(path: &Path, values: &Array2<f64>) -> CliResult<()> {
    let (rows, cols) = values.dim();
    let peak = values.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| {
        if peak > 0.0 {
            (v / peak * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}
