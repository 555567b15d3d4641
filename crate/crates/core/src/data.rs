//! Benchmark CSV loading, chronological splits, z-score standardization and
//! sliding lookback/horizon windows.
//!
//! Split convention: the ETT datasets use fixed 12/4/4-month borders and the
//! other benchmarks a 0.7/0.1/0.2 ratio split. Validation and test windows
//! may take their lookback context from the end of the preceding split, so a
//! split's *segment* for lookback `L` starts `L` points before its first
//! owned point. Training windows never leave the training split.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series, stored time-major (`N×C`).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub values: Tensor,
    pub channel_names: Vec<String>,
}

impl SeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != channel_names.len() {
            return Err(Error::shape(
                "SeriesDataset",
                &[values.outer(), channel_names.len()],
                values.shape(),
            ));
        }
        Ok(SeriesDataset {
            name: name.into(),
            values,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Loads a comma-separated file with one header row. A first column named
/// `date` is skipped; every other cell must parse as a float.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let skip = usize::from(headers[0].trim().eq_ignore_ascii_case("date"));
    let channel_names: Vec<String> = headers.iter().skip(skip).map(|h| h.trim().to_string()).collect();
    if channel_names.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = i + 2;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {row} has {} fields, header has {}",
                path.display(),
                record.len(),
                headers.len()
            )));
        }
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: j + 1,
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let values = Tensor::new(&[rows, channel_names.len()], values)?;
    SeriesDataset::new(name, values, channel_names)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// How a dataset is cut into train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// 12/4/4 months of hourly data.
    EttHourly,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
    /// Fractions of the full length; validation takes whatever train and test
    /// leave over.
    Ratios { train: f64, test: f64 },
}

const HOURS_PER_MONTH: usize = 30 * 24;

impl SplitRule {
    /// Split rule of a known benchmark, matched case-insensitively.
    pub fn registered(name: &str) -> Option<SplitRule> {
        match name.to_ascii_lowercase().as_str() {
            "etth1" | "etth2" => Some(SplitRule::EttHourly),
            "ettm1" | "ettm2" => Some(SplitRule::EttMinute),
            "electricity" | "ecl" | "traffic" | "weather" => Some(SplitRule::Ratios { train: 0.7, test: 0.2 }),
            _ => None,
        }
    }

    pub fn apply(self, n: usize) -> Result<Splits> {
        let (train, val, test) = match self {
            SplitRule::EttHourly | SplitRule::EttMinute => {
                let per_month = if self == SplitRule::EttHourly {
                    HOURS_PER_MONTH
                } else {
                    4 * HOURS_PER_MONTH
                };
                let (a, b, c) = (12 * per_month, 16 * per_month, 20 * per_month);
                if n < c {
                    return Err(Error::Data(format!(
                        "ETT split needs at least {c} time points, dataset has {n}"
                    )));
                }
                (0..a, a..b, b..c)
            }
            SplitRule::Ratios { train, test } => {
                if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
                    return Err(Error::Config(format!(
                        "split ratios must be positive and leave room for validation, got train={train}, test={test}"
                    )));
                }
                // truncation as in the usual int() conversion; the epsilon absorbs
                // representation error such as 0.7 * 100 = 70.00000000000001
                let n_train = (n as f64 * train + 1e-9).floor() as usize;
                let n_test = (n as f64 * test + 1e-9).floor() as usize;
                let n_val = n.saturating_sub(n_train + n_test);
                if n_train == 0 || n_val == 0 || n_test == 0 {
                    return Err(Error::Data(format!(
                        "dataset of {n} points is too short for a three-way split"
                    )));
                }
                (0..n_train, n_train..n_train + n_val, n_train + n_val..n)
            }
        };
        Ok(Splits { train, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Time points owned by each split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn owned(&self, part: Part) -> Range<usize> {
        match part {
            Part::Train => self.train.clone(),
            Part::Val => self.val.clone(),
            Part::Test => self.test.clone(),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Rows windows of `part` may read for a lookback of `lookback` points.
    pub fn segment(&self, part: Part, lookback: usize) -> Range<usize> {
        let owned = self.owned(part);
        match part {
            Part::Train => owned,
            _ => owned.start.saturating_sub(lookback)..owned.end,
        }
    }

    /// Number of forecast origins per split: time indices at which a full
    /// lookback of `lookback` points ends inside the split's segment. With a
    /// lookback of 96 this is the per-split "dataset size" the standard
    /// benchmark tables report.
    pub fn origin_counts(&self, lookback: usize) -> (usize, usize, usize) {
        let count = |p| {
            let seg = self.segment(p, lookback);
            (seg.len() + 1).saturating_sub(lookback)
        };
        (count(Part::Train), count(Part::Val), count(Part::Test))
    }
}

/// Resolves the split for `ds`: explicit ratios win, otherwise the dataset
/// name must be registered.
pub fn split(ds: &SeriesDataset, ratios: Option<(f64, f64, f64)>) -> Result<Splits> {
    let rule = match ratios {
        Some((train, val, test)) => {
            if ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios must sum to 1, got {train}+{val}+{test}"
                )));
            }
            SplitRule::Ratios { train, test }
        }
        None => SplitRule::registered(&ds.name).ok_or_else(|| {
            Error::Config(format!(
                "dataset {:?} has no registered split; supply split ratios",
                ds.name
            ))
        })?,
    };
    rule.apply(ds.len())
}

/// Start offsets of every window of `lookback + horizon` points inside a
/// series of `len` points, in chronological order.
pub fn window_starts(len: usize, lookback: usize, horizon: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1, "stride must be positive");
    let span = lookback + horizon;
    if len < span {
        log::warn!("series of {len} points is shorter than lookback {lookback} + horizon {horizon}; no windows");
        return Vec::new();
    }
    (0..=len - span).step_by(stride).collect()
}

/// One training sample: lookback block `x` (C×L) and the `y` block (C×T)
/// that immediately follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x: Tensor,
    pub y: Tensor,
    /// Row of the first lookback point in the full series.
    pub start_index: usize,
}

/// A contiguous read-only range of rows of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    pub values: &'a Tensor,
    pub start: usize,
    pub end: usize,
}

impl<'a> SeriesView<'a> {
    pub fn new(values: &'a Tensor, range: Range<usize>) -> Self {
        assert!(range.end <= values.shape()[0]);
        SeriesView {
            values,
            start: range.start,
            end: range.end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Rows `[from, from+len)` (absolute indices) transposed to channel-major
    /// `C×len`.
    pub fn block(&self, from: usize, len: usize) -> Tensor {
        channel_block(self.values, from, len)
    }
}

/// Rows `[from, from+len)` of a time-major `N×C` matrix as `C×len`.
pub fn channel_block(values: &Tensor, from: usize, len: usize) -> Tensor {
    let c = values.shape()[1];
    let src = values.data();
    let mut out = vec![0.0; c * len];
    for t in 0..len {
        let row = &src[(from + t) * c..(from + t + 1) * c];
        for (ch, &v) in row.iter().enumerate() {
            out[ch * len + t] = v;
        }
    }
    Tensor::new(&[c, len], out).expect("sized")
}

/// Materializes every window of a view.
pub fn make_windows(view: SeriesView<'_>, lookback: usize, horizon: usize, stride: usize) -> Vec<WindowPair> {
    window_starts(view.len(), lookback, horizon, stride)
        .into_iter()
        .map(|s| {
            let start = view.start + s;
            WindowPair {
                x: view.block(start, lookback),
                y: view.block(start + lookback, horizon),
                start_index: start,
            }
        })
        .collect()
}

/// Per-channel z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation over `rows`; a zero deviation
    /// is replaced by 1.
    pub fn fit(values: &Tensor, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot standardize on an empty training split".into()));
        }
        let c = values.shape()[1];
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, &v) in mean.iter_mut().zip(values.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(values.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        self.map_rows(values, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, values: &Tensor) -> Tensor {
        self.map_rows(values, |v, m, s| v * s + m)
    }

    fn map_rows(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        assert_eq!(values.inner(), c, "standardizer channel count");
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        out
    }
}

/// Fits a standardizer on the training split and applies it to the whole
/// series.
pub fn standardize_fit_apply(ds: &SeriesDataset, splits: &Splits) -> Result<(SeriesDataset, Standardizer)> {
    let scaler = Standardizer::fit(&ds.values, splits.train.clone())?;
    let standardized = SeriesDataset {
        name: ds.name.clone(),
        values: scaler.apply(&ds.values),
        channel_names: ds.channel_names.clone(),
    };
    Ok((standardized, scaler))
}
