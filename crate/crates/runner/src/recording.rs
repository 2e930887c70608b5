//! Reader for the recording CSV format.
//!
//! One file per recording, UTF-8, comma separated, `.` decimals:
//!
//! ```text
//! timestamp,ch_0,ch_1,...,ch_{n-1},label
//! 0.00,0.12,-0.40,...,3
//! ```
//!
//! Timestamps are in seconds and strictly increasing. Labels are
//! non-negative integers.

use std::io::Read;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use lapnet_core::ingest::RawRecording;
use lapnet_core::ClassId;

/// Parses one recording. `sample_rate_hz` overrides the rate implied by the
/// timestamps.
pub fn read_recording(reader: impl Read, sample_rate_hz: Option<f64>) -> anyhow::Result<RawRecording> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers()?.clone();
    let n = header.len();
    ensure!(n >= 3, "header needs timestamp, at least one channel and label");
    ensure!(&header[0] == "timestamp", "first column must be `timestamp`, found `{}`", &header[0]);
    ensure!(&header[n - 1] == "label", "last column must be `label`, found `{}`", &header[n - 1]);
    for (i, name) in header.iter().enumerate().take(n - 1).skip(1) {
        ensure!(name == format!("ch_{}", i - 1), "column {} must be `ch_{}`, found `{name}`", i + 1, i - 1);
    }

    let mut rows = Vec::new();
    let mut times = Vec::new();
    for (line, rec) in csv.records().enumerate() {
        let rec = rec?;
        let at = || format!("data row {}", line + 1);
        ensure!(rec.len() == n, "{}: expected {n} fields, found {}", at(), rec.len());
        let t: f64 = rec[0].parse().with_context(at)?;
        ensure!(t.is_finite(), "{}: timestamp is not finite", at());
        if let Some(&prev) = times.last() {
            ensure!(t > prev, "{}: timestamps must strictly increase", at());
        }
        times.push(t);
        let values = (1..n - 1)
            .map(|c| {
                let v: f64 = rec[c].parse().with_context(|| format!("{}, column ch_{}", at(), c - 1))?;
                ensure!(v.is_finite(), "{}: ch_{} is not finite", at(), c - 1);
                Ok(v)
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        let label: u32 = rec[n - 1].parse().with_context(|| format!("{}: bad label `{}`", at(), &rec[n - 1]))?;
        rows.push((values, ClassId(label)));
    }
    let rate = match sample_rate_hz {
        Some(r) => r,
        None => {
            if times.len() < 2 {
                bail!("need at least two rows to infer the sample rate");
            }
            (times.len() - 1) as f64 / (times[times.len() - 1] - times[0])
        }
    };
    Ok(RawRecording::new(rate, rows)?)
}

pub fn load_recording(path: &Path, sample_rate_hz: Option<f64>) -> anyhow::Result<RawRecording> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_recording(std::io::BufReader::new(f), sample_rate_hz).with_context(|| format!("reading {}", path.display()))
}
