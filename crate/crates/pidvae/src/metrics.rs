//! CSV output. Floats are written with 17 significant digits so they read
//! back to the same `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pidvae_core::train::EpochRecord;

use crate::error::{csv_err, io, Result};

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn metrics_header(free_names: &[String]) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "elbo".into(), "nmse".into()];
    h.extend(free_names.iter().map(|n| format!("mu_{n}")));
    h.extend(free_names.iter().map(|n| format!("sigma_{n}")));
    h.push("wallclock_s".into());
    h
}

pub fn metrics_row(r: &EpochRecord) -> Vec<String> {
    let mut row = vec![r.epoch.to_string(), fmt_f64(r.elbo), fmt_f64(r.nmse)];
    row.extend(r.mu_lambda.iter().map(|v| fmt_f64(*v)));
    row.extend(r.sigma_lambda.iter().map(|v| fmt_f64(*v)));
    row.push(fmt_f64(r.wallclock_s));
    row
}

/// Writes a whole CSV file.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

/// Appends rows to `metrics.csv`, one flush per epoch.
pub struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    /// Starts a fresh file.
    pub fn create(path: &Path, header: &[String]) -> Result<Self> {
        write_csv(path, header, &[])?;
        Self::append_to(path)
    }

    /// Keeps the header and the rows up to `epoch`, dropping any written
    /// after the checkpoint being resumed.
    pub fn resume(path: &Path, header: &[String], epoch: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
            for rec in r.records() {
                let rec = rec.map_err(csv_err(path))?;
                match rec.get(0).and_then(|e| e.parse::<usize>().ok()) {
                    Some(e) if e <= epoch => kept.push(rec.iter().map(str::to_string).collect()),
                    _ => {}
                }
            }
        }
        write_csv(path, header, &kept)?;
        Self::append_to(path)
    }

    fn append_to(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().append(true).open(path).map_err(io(path))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn push(&mut self, record: &EpochRecord) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(metrics_row(record)).map_err(csv_err(&self.path))?;
        let bytes = w.into_inner().expect("in-memory writer");
        self.file.write_all(&bytes).map_err(io(&self.path))?;
        self.file.flush().map_err(io(&self.path))
    }
}
