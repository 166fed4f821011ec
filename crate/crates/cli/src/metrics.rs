//! Append-only metrics CSV.
//!
//! Header: `iteration,epoch,split,elbo,reconstruction,kl_1,...,kl_L,lambda,lr,wall_time`.
//! Floats use the shortest representation that round-trips, so two runs
//! with identical arithmetic write identical text.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: u64,
    pub split: String,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl_per_layer: Vec<f64>,
    pub lambda: f64,
    pub lr: f64,
    /// Seconds since the run (or resumed run) started.
    pub wall_time: f64,
}

pub fn header(layers: usize) -> String {
    let mut cols = vec!["iteration", "epoch", "split", "elbo", "reconstruction"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    cols.extend((1..=layers).map(|l| format!("kl_{l}")));
    cols.extend(["lambda", "lr", "wall_time"].map(String::from));
    cols.join(",")
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            self.epoch.to_string(),
            self.split.clone(),
            self.elbo.to_string(),
            self.reconstruction.to_string(),
        ];
        cols.extend(self.kl_per_layer.iter().map(f64::to_string));
        cols.extend([self.lambda, self.lr, self.wall_time].map(|v| v.to_string()));
        cols.join(",")
    }

    pub fn parse(line: &str) -> Result<Self, CliError> {
        let bad = || CliError::Data(format!("malformed metrics row {line:?}"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 8 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let n = cols.len();
        Ok(Self {
            iteration: cols[0].parse().map_err(|_| bad())?,
            epoch: cols[1].parse().map_err(|_| bad())?,
            split: cols[2].to_string(),
            elbo: f(cols[3])?,
            reconstruction: f(cols[4])?,
            kl_per_layer: cols[5..n - 3].iter().map(|s| f(s)).collect::<Result<_, _>>()?,
            lambda: f(cols[n - 3])?,
            lr: f(cols[n - 2])?,
            wall_time: f(cols[n - 1])?,
        })
    }
}

/// Starts a fresh file containing only the header.
pub fn create(path: &Path, layers: usize) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{}", header(layers)).map_err(|e| CliError::io(path, e))
}

pub fn append(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
    let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<(String, Vec<MetricsRow>), CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| CliError::io(path, e))?,
        None => return Err(CliError::Data(format!("{}: empty metrics file", path.display()))),
    };
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.is_empty() {
            rows.push(MetricsRow::parse(&line)?);
        }
    }
    Ok((header, rows))
}

/// Drops rows logged after `epoch`, as when resuming from that checkpoint.
/// Kept rows are copied verbatim.
pub fn truncate_after(path: &Path, epoch: u64) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let mut out = lines.next().unwrap_or_default().to_string() + "\n";
    for line in lines.filter(|l| !l.is_empty()) {
        if MetricsRow::parse(line)?.epoch <= epoch {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}
