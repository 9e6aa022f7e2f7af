//! CSV and portable-graymap interchange.
//!
//! CSV is the authoritative format everywhere; graymaps are lossy previews
//! with per-image min/max normalization. Floats are written with Rust's
//! shortest round-trip formatting, so save/load cycles are exact and output
//! bytes are deterministic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::spectrum::{CurveSegment, EnergySpectrumTable, MassAttenuationCurve};
use crate::Image;

#[derive(Error, Debug)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Spectrum(#[from] crate::spectrum::SpectrumError),
}

type Result<T> = std::result::Result<T, IoError>;

fn wrap<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.display().to_string(), line, message: message.into() }
}

/// Writes a square image as row-major CSV, one row per line.
pub fn write_image_csv(path: &Path, image: &Image) -> Result<()> {
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    let n = image.side();
    for r in 0..n {
        let row: Vec<String> = (0..n).map(|c| format!("{}", image.get(r, c))).collect();
        wrap(path, writeln!(w, "{}", row.join(",")))?;
    }
    wrap(path, w.flush())
}

pub fn read_image_csv(path: &Path) -> Result<Image> {
    let file = wrap(path, File::open(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = wrap(path, line)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(path, ln + 1, format!("bad float {tok:?}")))?;
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(parse_err(path, 0, "image CSV must be square"));
    }
    Ok(Image::from_vec(n, rows.into_iter().flatten().collect()))
}

/// Writes a sinogram as `angle_index,detector_index,value` rows.
pub fn write_sinogram_csv(path: &Path, values: &[f64], detectors: usize) -> Result<()> {
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    wrap(path, writeln!(w, "angle_index,detector_index,value"))?;
    for (i, v) in values.iter().enumerate() {
        wrap(path, writeln!(w, "{},{},{}", i / detectors, i % detectors, v))?;
    }
    wrap(path, w.flush())
}

pub fn read_sinogram_csv(path: &Path) -> Result<Vec<f64>> {
    let file = wrap(path, File::open(path))?;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = wrap(path, line)?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(parse_err(path, ln + 1, "expected angle,detector,value"));
        }
        let a: usize =
            parts[0].trim().parse().map_err(|_| parse_err(path, ln + 1, "bad angle index"))?;
        let d: usize =
            parts[1].trim().parse().map_err(|_| parse_err(path, ln + 1, "bad detector index"))?;
        let v: f64 =
            parts[2].trim().parse().map_err(|_| parse_err(path, ln + 1, "bad value"))?;
        entries.push((a, d, v));
    }
    if entries.is_empty() {
        return Err(parse_err(path, 0, "empty sinogram"));
    }
    let detectors = entries.iter().map(|e| e.1).max().unwrap() + 1;
    let angles = entries.iter().map(|e| e.0).max().unwrap() + 1;
    let mut out = vec![f64::NAN; angles * detectors];
    for (a, d, v) in entries {
        out[a * detectors + d] = v;
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(parse_err(path, 0, "sinogram has missing entries"));
    }
    Ok(out)
}

/// Writes spectrum coefficients as `knot,coeff` rows (one per spline).
pub fn write_spectrum_csv(path: &Path, knots: &[f64], coeffs: &[f64]) -> Result<()> {
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    wrap(path, writeln!(w, "knot,coeff"))?;
    for (j, c) in coeffs.iter().enumerate() {
        wrap(path, writeln!(w, "{},{}", knots[j + 1], c))?;
    }
    wrap(path, w.flush())
}

pub fn read_spectrum_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = read_two_column(path, "knot")?;
    Ok((a, b))
}

/// Reads a 2-column CSV with an `energy_kev,value` style header.
fn read_two_column(path: &Path, _expect_first: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let file = wrap(path, File::open(path))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = wrap(path, line)?;
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 {
            return Err(parse_err(path, ln + 1, "expected two columns"));
        }
        let x: f64 =
            parts[0].trim().parse().map_err(|_| parse_err(path, ln + 1, "bad first column"))?;
        let y: f64 =
            parts[1].trim().parse().map_err(|_| parse_err(path, ln + 1, "bad second column"))?;
        xs.push(x);
        ys.push(y);
    }
    if xs.len() < 2 {
        return Err(parse_err(path, 0, "need at least 2 rows"));
    }
    Ok((xs, ys))
}

pub fn write_table_csv(path: &Path, energies: &[f64], values: &[f64]) -> Result<()> {
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    wrap(path, writeln!(w, "energy_kev,value"))?;
    for (e, v) in energies.iter().zip(values) {
        wrap(path, writeln!(w, "{},{}", e, v))?;
    }
    wrap(path, w.flush())
}

/// Loads an incident-spectrum table from `energy_kev,value` CSV.
pub fn read_energy_table(path: &Path) -> Result<EnergySpectrumTable> {
    let (e, d) = read_two_column(path, "energy_kev")?;
    Ok(EnergySpectrumTable::new(e, d)?)
}

/// Loads a mass-attenuation curve from `energy_kev,value` CSV. Rows where κ
/// jumps upward split the curve into K-edge branches.
pub fn read_attenuation_curve(path: &Path) -> Result<MassAttenuationCurve> {
    let (e, k) = read_two_column(path, "energy_kev")?;
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 1..e.len() {
        if k[i] > k[i - 1] {
            segments.push(CurveSegment::new(e[start..i].to_vec(), k[start..i].to_vec())?);
            start = i;
        }
    }
    segments.push(CurveSegment::new(e[start..].to_vec(), k[start..].to_vec())?);
    Ok(MassAttenuationCurve::new(segments)?)
}

/// Writes an 8- or 16-bit binary PGM preview with min/max normalization.
pub fn write_graymap(path: &Path, image: &Image, sixteen_bit: bool) -> Result<()> {
    let n = image.side();
    let lo = image.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    wrap(path, write!(w, "P5\n{n} {n}\n{maxval}\n"))?;
    for &v in image.as_slice() {
        let q = (((v - lo) / span) * maxval as f64).round() as u32;
        let q = q.min(maxval);
        if sixteen_bit {
            wrap(path, w.write_all(&(q as u16).to_be_bytes()))?;
        } else {
            wrap(path, w.write_all(&[q as u8]))?;
        }
    }
    wrap(path, w.flush())
}

/// Writes per-iteration solver traces.
pub fn write_trace_csv(path: &Path, trace: &crate::solvers::IterationTrace) -> Result<()> {
    let file = wrap(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    wrap(path, writeln!(w, "iteration,objective,nll,beta,delta,deltaL,rse"))?;
    for i in 0..trace.len() {
        wrap(
            path,
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                i + 1,
                trace.objective[i],
                trace.nll[i],
                trace.beta[i],
                trace.delta[i],
                trace.delta_nll[i],
                trace.rse[i]
            ),
        )?;
    }
    wrap(path, w.flush())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("polyct_io_{}_{}", std::process::id(), name));
        p
    }

    #[test]
    fn image_csv_round_trip_exact() {
        let img = Image::from_vec(3, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 5e300, 0.0, 1.5, 2.5, -1.0]);
        let p = tmp("img.csv");
        write_image_csv(&p, &img).unwrap();
        let back = read_image_csv(&p).unwrap();
        assert_eq!(img, back);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn sinogram_csv_round_trip() {
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 + 0.5) / 7.0).collect();
        let p = tmp("sino.csv");
        write_sinogram_csv(&p, &vals, 4).unwrap();
        let back = read_sinogram_csv(&p).unwrap();
        assert_eq!(vals, back);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn curve_csv_splits_at_k_edges() {
        let p = tmp("curve.csv");
        let e: Vec<f64> = (0..40).map(|i| 10.0 + i as f64).collect();
        let k: Vec<f64> = e
            .iter()
            .map(|&en| if en < 30.0 { (en / 20.0).powi(-3) } else { 0.9 * (en / 30.0).powi(-3) })
            .collect();
        write_table_csv(&p, &e, &k).unwrap();
        let curve = read_attenuation_curve(&p).unwrap();
        assert_eq!(curve.segments().len(), 2);
        assert_eq!(curve.breakpoints().len(), 1);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn graymap_bytes_well_formed() {
        let img = Image::from_vec(2, vec![0.0, 1.0, 2.0, 3.0]);
        let p = tmp("img.pgm");
        write_graymap(&p, &img, true).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n65535\n".len() + 8);
        std::fs::remove_file(&p).ok();
    }
}
