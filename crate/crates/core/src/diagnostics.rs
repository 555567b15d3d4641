//! Temporal-locality diagnostics on embedding trajectories: adjacent-step
//! distance, averaged magnitude spectra, and CSV/JSON trace exports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Tap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bins below this fraction of the largest magnitude are never peaks.
pub const PEAK_FLOOR: f64 = 0.1;
/// Peaks kept in a [`SpectrumReport`].
pub const TOP_PEAKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    RawObservations,
    BackboneEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub source: TraceSource,
    /// `latent`, `baseline` or `raw`.
    pub model: String,
    pub dataset: String,
    pub tap: Option<Tap>,
    /// Training progress in percent.
    pub progress: u32,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
}

/// A `steps×dims` trajectory with the time index of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTrace {
    pub matrix: Tensor,
    pub step_index: Vec<usize>,
    pub meta: TraceMeta,
}

impl EmbeddingTrace {
    pub fn new(matrix: Tensor, step_index: Vec<usize>, meta: TraceMeta) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[0] != step_index.len() {
            return Err(Error::shape(
                "embedding_trace",
                &[step_index.len(), matrix.inner()],
                matrix.shape(),
            ));
        }
        if step_index.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("trace step_index must be strictly increasing".into()));
        }
        Ok(EmbeddingTrace {
            matrix,
            step_index,
            meta,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_index.len()
    }

    pub fn dims(&self) -> usize {
        self.matrix.inner()
    }
}

/// Mean distance between consecutive rows divided by the mean row norm.
pub fn adjacent_distance(trace: &EmbeddingTrace) -> Result<f64> {
    let m = &trace.matrix;
    let steps = m.shape()[0];
    if steps < 2 {
        return Err(Error::Data(format!(
            "adjacent distance needs at least 2 steps, got {steps}"
        )));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_norm = (0..steps).map(|i| norm(m.row(i))).sum::<f64>() / steps as f64;
    if mean_norm == 0.0 {
        log::warn!("adjacent distance of an all-zero trace is reported as 0");
        return Ok(0.0);
    }
    let gaps = (1..steps)
        .map(|i| {
            m.row(i)
                .iter()
                .zip(m.row(i - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / (steps - 1) as f64;
    Ok(gaps / mean_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub bin: usize,
    /// Cycles per step.
    pub frequency: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Transform length after zero-padding.
    pub n_fft: usize,
    pub frequencies: Vec<f64>,
    pub magnitude: Vec<f64>,
    /// Largest local maxima, strongest first.
    pub peaks: Vec<Peak>,
}

impl SpectrumReport {
    /// Bins of the `k` strongest peaks in ascending order.
    pub fn top_bins(&self, k: usize) -> Vec<usize> {
        let mut bins: Vec<usize> = self.peaks.iter().take(k).map(|p| p.bin).collect();
        bins.sort_unstable();
        bins
    }
}

/// In-place iterative radix-2 FFT; `re.len()` must be a power of two.
pub fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n);
    let bits = n.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * std::f64::consts::PI / len as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            for start in (0..n).step_by(len) {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len *= 2;
    }
}

/// One-sided complex spectrum of each mean-removed column, zero-padded to
/// the next power of two. Returns `(n_fft, re, im)` with `dims` rows of
/// `n_fft/2 + 1` bins.
pub fn column_spectra(m: &Tensor) -> (usize, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (steps, dims) = (m.shape()[0], m.shape()[1]);
    let n_fft = steps.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let mut res = Vec::with_capacity(dims);
    let mut ims = Vec::with_capacity(dims);
    for d in 0..dims {
        let mean = (0..steps).map(|t| m.at2(t, d)).sum::<f64>() / steps as f64;
        let mut re = vec![0.0; n_fft];
        for (t, r) in re.iter_mut().enumerate().take(steps) {
            *r = m.at2(t, d) - mean;
        }
        let mut im = vec![0.0; n_fft];
        fft(&mut re, &mut im);
        re.truncate(bins);
        im.truncate(bins);
        res.push(re);
        ims.push(im);
    }
    (n_fft, res, ims)
}

pub fn spectrum(trace: &EmbeddingTrace) -> Result<SpectrumReport> {
    let steps = trace.steps();
    if steps < 4 {
        return Err(Error::Data(format!("spectrum needs at least 4 steps, got {steps}")));
    }
    let (n_fft, re, im) = column_spectra(&trace.matrix);
    let bins = n_fft / 2 + 1;
    let dims = re.len() as f64;
    let magnitude: Vec<f64> = (0..bins)
        .map(|k| re.iter().zip(&im).map(|(r, i)| r[k].hypot(i[k])).sum::<f64>() / dims)
        .collect();
    let frequencies = (0..bins).map(|k| k as f64 / n_fft as f64).collect();
    let peaks = find_peaks(&magnitude, n_fft);
    Ok(SpectrumReport {
        n_fft,
        frequencies,
        magnitude,
        peaks,
    })
}

fn find_peaks(mag: &[f64], n_fft: usize) -> Vec<Peak> {
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    let mut peaks: Vec<Peak> = (1..mag.len())
        .filter(|&k| {
            let left = mag[k] > mag[k - 1];
            let right = k + 1 == mag.len() || mag[k] >= mag[k + 1];
            left && right && mag[k] >= PEAK_FLOOR * max
        })
        .map(|k| Peak {
            bin: k,
            frequency: k as f64 / n_fft as f64,
            magnitude: mag[k],
        })
        .collect();
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.bin.cmp(&b.bin)));
    peaks.truncate(TOP_PEAKS);
    peaks
}

/// Fraction of the reference's two strongest peak bins that are also among
/// the candidate's two strongest.
pub fn peak_alignment(candidate: &SpectrumReport, reference: &SpectrumReport) -> f64 {
    let r = reference.top_bins(2);
    if r.is_empty() {
        return 0.0;
    }
    let c = candidate.top_bins(2);
    r.iter().filter(|b| c.contains(b)).count() as f64 / r.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub meta: TraceMeta,
    pub adjacent_distance: f64,
    pub spectrum: SpectrumReport,
    /// Agreement with the raw spectrum's top-2 peaks, when a raw trace is given.
    pub peak_alignment: Option<f64>,
    pub top2_match: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: TraceSummary,
    pub b: TraceSummary,
    pub raw: Option<TraceSummary>,
    /// `adjacent_distance(a) - adjacent_distance(b)`.
    pub difference: f64,
    /// Sign of `difference`: -1 when `a` is the more local trajectory.
    pub sign: i8,
}

fn summarize(trace: &EmbeddingTrace, raw: Option<&SpectrumReport>) -> Result<TraceSummary> {
    let spec = spectrum(trace)?;
    Ok(TraceSummary {
        meta: trace.meta.clone(),
        adjacent_distance: adjacent_distance(trace)?,
        peak_alignment: raw.map(|r| peak_alignment(&spec, r)),
        top2_match: raw.map(|r| r.top_bins(2) == spec.top_bins(2) && !r.peaks.is_empty()),
        spectrum: spec,
    })
}

/// Compares two traces over the same time steps, optionally against the raw
/// observations at those steps.
pub fn compare_runs(a: &EmbeddingTrace, b: &EmbeddingTrace, raw: Option<&EmbeddingTrace>) -> Result<Comparison> {
    for (name, t) in [("second", Some(b)), ("raw", raw)] {
        if let Some(t) = t {
            if t.step_index != a.step_index {
                return Err(Error::Data(format!(
                    "{name} trace covers different time steps than the first"
                )));
            }
        }
    }
    let raw_summary = raw.map(|r| summarize(r, None)).transpose()?;
    let raw_spec = raw_summary.as_ref().map(|s| &s.spectrum);
    let sa = summarize(a, raw_spec)?;
    let sb = summarize(b, raw_spec)?;
    let difference = sa.adjacent_distance - sb.adjacent_distance;
    let sign = if difference < 0.0 {
        -1
    } else if difference > 0.0 {
        1
    } else {
        0
    };
    Ok(Comparison {
        a: sa,
        b: sb,
        raw: raw_summary,
        difference,
        sign,
    })
}

/// Sidecar metadata path of a trace CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `step_index, dim_0, ...` rows and the JSON sidecar.
pub fn write_trace(trace: &EmbeddingTrace, csv_path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(csv_path).map_err(io)?;
    let mut header = vec!["step_index".to_string()];
    header.extend((0..trace.dims()).map(|d| format!("dim_{d}")));
    w.write_record(&header).map_err(io)?;
    for (i, step) in trace.step_index.iter().enumerate() {
        let mut rec = vec![step.to_string()];
        rec.extend(trace.matrix.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let side = sidecar_path(csv_path);
    let json = serde_json::to_string_pretty(&trace.meta)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_trace(csv_path: &Path) -> Result<EmbeddingTrace> {
    let side = sidecar_path(csv_path);
    let meta: TraceMeta = serde_json::from_str(&std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    let bad = |m: String| Error::Data(format!("{}: {m}", csv_path.display()));
    let mut r = csv::Reader::from_path(csv_path).map_err(|e| bad(e.to_string()))?;
    let mut index = Vec::new();
    let mut rows = Vec::new();
    let mut dims = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        index.push(rec[0].parse::<usize>().map_err(|e| bad(e.to_string()))?);
        for v in rec.iter().skip(1) {
            rows.push(v.parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        dims = Some(rec.len() - 1);
    }
    let dims = dims.filter(|&d| d > 0).ok_or_else(|| bad("trace has no rows".into()))?;
    EmbeddingTrace::new(Tensor::new(&[index.len(), dims], rows)?, index, meta)
}

/// Writes `frequency, magnitude_<label>...` for spectra of equal length.
pub fn write_spectra(path: &Path, spectra: &[(&str, &SpectrumReport)]) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let first = spectra
        .first()
        .ok_or_else(|| Error::Internal("no spectra to write".into()))?
        .1;
    if spectra.iter().any(|(_, s)| s.magnitude.len() != first.magnitude.len()) {
        return Err(Error::Data("spectra have different lengths".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["frequency".to_string()];
    header.extend(spectra.iter().map(|(l, _)| format!("magnitude_{l}")));
    w.write_record(&header).map_err(io)?;
    for k in 0..first.magnitude.len() {
        let mut rec = vec![first.frequencies[k].to_string()];
        rec.extend(spectra.iter().map(|(_, s)| s.magnitude[k].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
