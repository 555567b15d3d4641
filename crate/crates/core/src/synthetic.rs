//! Synthetic multichannel periodic series for smoke runs and diagnostics.

use std::path::Path;

use rand::Rng as _;

use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Periods (in steps) shared by every channel.
pub const PERIODS: [f64; 2] = [32.0, 16.0];

/// `len×channels` series: per channel, two sinusoids with the periods in
/// [`PERIODS`], random phases and amplitudes, a small offset and uniform
/// noise of amplitude 0.1.
pub fn periodic(len: usize, channels: usize, seed: u64) -> Result<SeriesDataset> {
    if len == 0 || channels == 0 {
        return Err(Error::Config(
            "synthetic series needs a positive length and channel count".into(),
        ));
    }
    let mut rng = rng_for(seed, 100);
    let params: Vec<[f64; 5]> = (0..channels)
        .map(|_| {
            [
                rng.gen_range(0.8..1.2),
                rng.gen_range(0.5..0.8),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(-0.5..0.5),
            ]
        })
        .collect();
    let mut values = Vec::with_capacity(len * channels);
    for t in 0..len {
        for p in &params {
            let w = std::f64::consts::TAU * t as f64;
            let v = p[0] * (w / PERIODS[0] + p[2]).sin() + p[1] * (w / PERIODS[1] + p[3]).sin() + p[4];
            values.push(v + rng.gen_range(-0.1..0.1));
        }
    }
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    SeriesDataset::new("synthetic", Tensor::new(&[len, channels], values)?, names)
}

/// Writes a dataset as CSV with a leading `date` column of step numbers.
pub fn write_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for t in 0..ds.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(ds.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
