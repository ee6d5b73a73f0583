//! Sample-quality metrics: energy distance, ensemble CRPS, power spectrum
//! ratio and RMSE, plus the CSV row format shared by all reports.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::Field;

fn check_sets(a: &[Field], b: &[Field]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("sample sets must be non-empty".into()));
    }
    let d = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|f| f.len() != d) {
        return Err(shape_err("sample dimension", d, bad.len()));
    }
    Ok(d)
}

fn mean_pair_distance(a: &[Field], b: &[Field]) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            let sq: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
            row += sq.sqrt();
        }
        total += row;
    }
    total / (a.len() as f64 * b.len() as f64)
}

fn cmp_sets(a: &[Field], b: &[Field]) -> Ordering {
    let flat = |s: &[Field]| s.iter().flat_map(|f| f.data().iter().copied()).collect::<Vec<_>>();
    a.len().cmp(&b.len()).then_with(|| {
        flat(a)
            .iter()
            .zip(flat(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// V-statistic energy distance `2 E|A - B| - E|A - A'| - E|B - B'|`.
///
/// Arguments are put in a canonical order first, so the result is exactly
/// symmetric, and identical sets give exactly zero.
pub fn energy_distance(a: &[Field], b: &[Field]) -> Result<f64> {
    check_sets(a, b)?;
    let (a, b) = if cmp_sets(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let ab = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    Ok(2.0 * ab - aa - bb)
}

/// Ensemble CRPS `(1/M) sum |x_i - y| - (1/2M^2) sum |x_i - x_j|`,
/// averaged over grid points.
pub fn crps_ensemble(members: &[Field], truth: &Field) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("CRPS needs at least one ensemble member".into()));
    }
    let d = truth.len();
    if let Some(bad) = members.iter().find(|f| f.len() != d) {
        return Err(shape_err("ensemble member", d, bad.len()));
    }
    let m = members.len() as f64;
    let mut col = vec![0.0; members.len()];
    let mut total = 0.0;
    for (k, &y) in truth.data().iter().enumerate() {
        for (c, f) in col.iter_mut().zip(members) {
            *c = f.data()[k];
        }
        let skill: f64 = col.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
        col.sort_by(f64::total_cmp);
        // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - M + 1) x_(i) over sorted members
        let spread: f64 = col
            .iter()
            .enumerate()
            .map(|(i, &x)| (2.0 * i as f64 - m + 1.0) * x)
            .sum::<f64>()
            * 2.0;
        total += skill - spread / (2.0 * m * m);
    }
    Ok(total / d as f64)
}

/// Ratio of predicted to true mean spectral power per wavelength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRatio {
    /// Wavelengths `n / k` in grid units, for the retained wavenumbers.
    pub wavelengths: Vec<f64>,
    pub eta: Vec<f64>,
    /// Wavenumbers dropped because the truth has no power there.
    pub excluded: Vec<usize>,
    pub summary: f64,
}

/// Mean power `|X_k|^2` at `k = 1..=n/2`, averaged over `fields`.
pub fn mean_power_spectrum(fields: &[Field]) -> Result<Vec<f64>> {
    let n = fields.first().map(Field::len).ok_or_else(|| {
        Error::InvalidArgument("power spectrum of an empty set".into())
    })?;
    if let Some(bad) = fields.iter().find(|f| f.len() != n) {
        return Err(shape_err("field length", n, bad.len()));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut power = vec![0.0; n / 2];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in fields {
        for (b, &v) in buf.iter_mut().zip(f.data()) {
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k + 1].norm_sqr();
        }
    }
    power.iter_mut().for_each(|p| *p /= fields.len() as f64);
    Ok(power)
}

/// Power spectrum ratio of periodic 1D fields, DC excluded.
pub fn power_spectrum_ratio(pred: &[Field], truth: &[Field]) -> Result<SpectrumRatio> {
    check_sets(pred, truth)?;
    let n = truth[0].len();
    let pp = mean_power_spectrum(pred)?;
    let pt = mean_power_spectrum(truth)?;
    let mut out = SpectrumRatio {
        wavelengths: Vec::new(),
        eta: Vec::new(),
        excluded: Vec::new(),
        summary: 0.0,
    };
    for (i, (&p, &t)) in pp.iter().zip(&pt).enumerate() {
        let k = i + 1;
        if t > 0.0 {
            let eta = p / t;
            out.wavelengths.push(n as f64 / k as f64);
            out.eta.push(eta);
            out.summary += (1.0 - eta).abs();
        } else {
            out.excluded.push(k);
        }
    }
    Ok(out)
}

pub fn rmse(pred: &Field, truth: &Field) -> Result<f64> {
    pred.check_same_shape(truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// One metric value in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub task: String,
    pub mode: String,
    pub method: String,
    pub grid: String,
    pub nfe: usize,
    pub warmth: f64,
    pub metric_name: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub fn write_metric_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_rows<R: Read>(input: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
