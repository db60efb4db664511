//! File formats: electrode and grid tables, the binary lead-field cache,
//! measurements, time series, matrices and JSON results.
//!
//! CSV floats are written with Rust's shortest round-trip formatting, so a
//! write followed by a read gives back the same bits.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::carss::CertaintyPrior;
use crate::error::{Error, Result};
use crate::forward::{HeadModel, LeadField};
use crate::geometry::{ElectrodeArray, GridSpec, Point3, SourceGrid};
use crate::solvers::SourceEstimate;

/// First bytes of a lead-field cache file.
pub const LEAD_FIELD_MAGIC: &[u8; 8] = b"CARSSLF1";

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line()).unwrap_or(0);
    Error::parse(format!("{}:{row}", path.display()), e.to_string())
}

/// Reads every record of a CSV file with its 1-based line number.
fn records(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for (i, rec) in csv_reader(path)?.into_records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

fn field<'a>(path: &Path, line: u64, rec: &'a csv::StringRecord, col: usize) -> Result<&'a str> {
    rec.get(col).map(str::trim).ok_or_else(|| {
        Error::parse(
            format!("{}:{line}, column {}", path.display(), col + 1),
            format!("missing field (row has {} fields)", rec.len()),
        )
    })
}

fn number(path: &Path, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
    let s = field(path, line, rec, col)?;
    let v: f64 = s.parse().map_err(|_| {
        Error::parse(
            format!("{}:{line}, column {}", path.display(), col + 1),
            format!("not a number: {s:?}"),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::parse(
            format!("{}:{line}, column {}", path.display(), col + 1),
            format!("non-finite value {s:?}"),
        ));
    }
    Ok(v)
}

fn expect_width(path: &Path, line: u64, rec: &csv::StringRecord, width: usize) -> Result<()> {
    if rec.len() != width {
        return Err(Error::parse(
            format!("{}:{line}", path.display()),
            format!("expected {width} fields, found {}", rec.len()),
        ));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// `label,x_mm,y_mm,z_mm` with a header row.
pub fn write_electrodes_csv(path: &Path, electrodes: &ElectrodeArray) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "label,x_mm,y_mm,z_mm")?;
    for (label, p) in electrodes.labels().iter().zip(electrodes.positions()) {
        writeln!(w, "{label},{},{},{}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `label,x_mm,y_mm,z_mm`. Positions must lie on the scalp sphere of
/// `radius`.
pub fn read_electrodes_csv(path: &Path, radius: f64) -> Result<ElectrodeArray> {
    let rows = records(path)?;
    let mut labels = Vec::new();
    let mut positions = Vec::new();
    for (i, (line, rec)) in rows.iter().enumerate() {
        if i == 0 && field(path, *line, rec, 0)? == "label" {
            continue;
        }
        expect_width(path, *line, rec, 4)?;
        labels.push(field(path, *line, rec, 0)?.to_string());
        positions.push(Point3::new(
            number(path, *line, rec, 1)?,
            number(path, *line, rec, 2)?,
            number(path, *line, rec, 3)?,
        ));
    }
    ElectrodeArray::new(labels, positions, radius)
}

/// `point,x_mm,y_mm,z_mm` for every grid point.
pub fn write_grid_csv(path: &Path, grid: &SourceGrid) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "point,x_mm,y_mm,z_mm")?;
    for (i, p) in grid.points().iter().enumerate() {
        writeln!(w, "{i},{},{},{}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot data: `point,x_mm,y_mm,z_mm,power,certainty`. Certainty is the
/// largest prior certainty over a point's columns, empty outside the prior.
pub fn write_power_csv(
    path: &Path,
    grid: &SourceGrid,
    power: &[f64],
    prior: Option<&CertaintyPrior>,
) -> Result<()> {
    if power.len() != grid.len() {
        return Err(Error::Dimension {
            what: "power vs grid points",
            expected: grid.len(),
            actual: power.len(),
        });
    }
    let mut certainty = vec![None::<f64>; grid.len()];
    for e in prior.map(|p| p.entries.as_slice()).unwrap_or_default() {
        let c = &mut certainty[e.column / 3];
        *c = Some(c.map_or(e.certainty, |v| v.max(e.certainty)));
    }
    let mut w = create(path)?;
    writeln!(w, "point,x_mm,y_mm,z_mm,power,certainty")?;
    for (i, p) in grid.points().iter().enumerate() {
        let c = certainty[i].map(|c| c.to_string()).unwrap_or_default();
        writeln!(w, "{i},{},{},{},{},{c}", p.x, p.y, p.z, power[i])?;
    }
    w.flush()?;
    Ok(())
}

/// What a cached lead field was computed from. A cache is reused only when
/// its key equals the requested one exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadFieldKey {
    pub head: HeadModel,
    pub grid: GridSpec,
    pub electrodes: Vec<[f64; 3]>,
}

impl LeadFieldKey {
    pub fn new(head: &HeadModel, grid: &SourceGrid, electrodes: &ElectrodeArray) -> Self {
        Self {
            head: *head,
            grid: grid.spec(),
            electrodes: electrodes.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

/// Outcome of looking up a lead-field cache.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheLookup {
    Hit(LeadField),
    Missing,
    /// The file exists but cannot be used; the reason is for the log.
    Stale(String),
}

/// Binary layout: magic, `u64` key length, key JSON, `u64` rows, `u64`
/// columns, then the matrix column-major as little-endian `f64`.
pub fn write_lead_field(path: &Path, key: &LeadFieldKey, lf: &LeadField) -> Result<()> {
    let key = serde_json::to_vec(key)?;
    let m = lf.matrix();
    let mut w = create(path)?;
    w.write_all(LEAD_FIELD_MAGIC)?;
    w.write_all(&(key.len() as u64).to_le_bytes())?;
    w.write_all(&key)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Loads a cached lead field if it exists and was built from `key`.
pub fn read_lead_field(path: &Path, key: &LeadFieldKey) -> Result<CacheLookup> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(CacheLookup::Missing),
        Err(e) => return Err(e.into()),
    };
    let len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let stale = |why: &str| Ok(CacheLookup::Stale(why.to_string()));
    let mut magic = [0u8; 8];
    if r.read_exact(&mut magic).is_err() || &magic != LEAD_FIELD_MAGIC {
        return stale("bad magic");
    }
    let Ok(key_len) = read_u64(&mut r) else { return stale("truncated header") };
    if key_len > len {
        return stale("corrupt header");
    }
    let mut stored = vec![0u8; key_len as usize];
    if r.read_exact(&mut stored).is_err() {
        return stale("truncated header");
    }
    match serde_json::from_slice::<LeadFieldKey>(&stored) {
        Ok(k) if &k == key => {}
        Ok(_) => return stale("built for a different head, grid or montage"),
        Err(_) => return stale("unreadable header"),
    }
    let (Ok(rows), Ok(cols)) = (read_u64(&mut r), read_u64(&mut r)) else {
        return stale("truncated header");
    };
    let expected = 8 + 8 + key_len + 16 + rows.saturating_mul(cols).saturating_mul(8);
    if expected != len {
        return stale("size does not match header");
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = vec![0f64; rows * cols];
    let mut b = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    match LeadField::from_matrix(DMatrix::from_vec(rows, cols, data)) {
        Ok(lf) => Ok(CacheLookup::Hit(lf)),
        Err(e) => Ok(CacheLookup::Stale(e.to_string())),
    }
}

/// `label,value` per channel with a header row.
pub fn write_measurement_csv(path: &Path, labels: &[String], phi: &DVector<f64>) -> Result<()> {
    if labels.len() != phi.len() {
        return Err(Error::Dimension {
            what: "measurement labels vs values",
            expected: phi.len(),
            actual: labels.len(),
        });
    }
    let mut w = create(path)?;
    writeln!(w, "label,value")?;
    for (l, v) in labels.iter().zip(phi.iter()) {
        writeln!(w, "{l},{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `label,value` rows and orders them as `labels`.
pub fn read_measurement_csv(path: &Path, labels: &[String]) -> Result<DVector<f64>> {
    let rows = records(path)?;
    let mut values = vec![None; labels.len()];
    let index: std::collections::HashMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    for (i, (line, rec)) in rows.iter().enumerate() {
        if i == 0 && field(path, *line, rec, 0)? == "label" {
            continue;
        }
        expect_width(path, *line, rec, 2)?;
        let label = field(path, *line, rec, 0)?;
        let &slot = index.get(label).ok_or_else(|| {
            Error::parse(format!("{}:{line}", path.display()), format!("unknown channel {label:?}"))
        })?;
        if values[slot].is_some() {
            return Err(Error::parse(
                format!("{}:{line}", path.display()),
                format!("channel {label:?} listed twice"),
            ));
        }
        values[slot] = Some(number(path, *line, rec, 1)?);
    }
    if let Some(i) = values.iter().position(Option::is_none) {
        return Err(Error::parse(path.display().to_string(), format!("channel {:?} missing", labels[i])));
    }
    Ok(DVector::from_iterator(labels.len(), values.into_iter().flatten()))
}

/// Multichannel recording, `channels × samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub data: DMatrix<f64>,
}

impl TimeSeries {
    /// Sampling rate from the mean sample spacing.
    pub fn rate(&self) -> Result<f64> {
        let n = self.times.len();
        if n < 2 {
            return Err(Error::Domain("need two samples to infer a sampling rate".into()));
        }
        let dt = (self.times[n - 1] - self.times[0]) / (n - 1) as f64;
        if !(dt > 0.0) {
            return Err(Error::Domain("sample times must increase".into()));
        }
        Ok(1.0 / dt)
    }
}

/// Header `time_s,<label>...`, then one row per sample.
pub fn read_time_series_csv(path: &Path) -> Result<TimeSeries> {
    let rows = records(path)?;
    let Some((hline, header)) = rows.first() else {
        return Err(Error::parse(path.display().to_string(), "empty file"));
    };
    if field(path, *hline, header, 0)? != "time_s" {
        return Err(Error::parse(
            format!("{}:{hline}, column 1", path.display()),
            "header must start with time_s",
        ));
    }
    let labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if labels.is_empty() {
        return Err(Error::parse(format!("{}:{hline}", path.display()), "no channel columns"));
    }
    let width = labels.len() + 1;
    let samples = rows.len() - 1;
    let mut times = Vec::with_capacity(samples);
    let mut data = DMatrix::zeros(labels.len(), samples);
    for (j, (line, rec)) in rows[1..].iter().enumerate() {
        expect_width(path, *line, rec, width)?;
        times.push(number(path, *line, rec, 0)?);
        for c in 0..labels.len() {
            data[(c, j)] = number(path, *line, rec, c + 1)?;
        }
    }
    Ok(TimeSeries { labels, times, data })
}

pub fn write_time_series_csv(path: &Path, ts: &TimeSeries) -> Result<()> {
    if ts.data.nrows() != ts.labels.len() || ts.data.ncols() != ts.times.len() {
        return Err(Error::Contract("time series shape does not match labels and times".into()));
    }
    let mut w = create(path)?;
    write!(w, "time_s")?;
    for l in &ts.labels {
        write!(w, ",{l}")?;
    }
    writeln!(w)?;
    for (j, t) in ts.times.iter().enumerate() {
        write!(w, "{t}")?;
        for v in ts.data.column(j).iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain numeric matrix, one CSV row per matrix row, no header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let rows = records(path)?;
    let Some((_, first)) = rows.first() else {
        return Err(Error::parse(path.display().to_string(), "empty file"));
    };
    let width = first.len();
    let mut values = Vec::with_capacity(rows.len() * width);
    for (line, rec) in &rows {
        expect_width(path, *line, rec, width)?;
        for c in 0..width {
            values.push(number(path, *line, rec, c)?);
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), width, &values))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = create(path)?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| {
        Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string())
    })
}

/// Entries with magnitude at or below this are left out of estimate files.
pub const ESTIMATE_ZERO: f64 = 1e-14;

/// On-disk form of a [`SourceEstimate`]: only non-zero entries are stored,
/// as `[component_index, value]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub solver: String,
    pub alpha: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Length of the full current vector, `3M`.
    pub length: usize,
    pub entries: Vec<(usize, f64)>,
    /// Reduced solution-space size for two-stage methods.
    pub prior_size: Option<usize>,
}

impl EstimateFile {
    pub fn new(e: &SourceEstimate, prior: Option<&CertaintyPrior>) -> Self {
        Self {
            solver: e.solver.clone(),
            alpha: e.alpha,
            iterations: e.iterations,
            residual: e.residual,
            length: e.j.len(),
            entries: e
                .j
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > ESTIMATE_ZERO)
                .map(|(i, &v)| (i, v))
                .collect(),
            prior_size: prior.map(CertaintyPrior::len),
        }
    }

    pub fn estimate(&self) -> Result<SourceEstimate> {
        let mut j = DVector::zeros(self.length);
        for &(i, v) in &self.entries {
            if i >= self.length {
                return Err(Error::Contract(format!(
                    "estimate entry {i} out of range for length {}",
                    self.length
                )));
            }
            j[i] = v;
        }
        Ok(SourceEstimate {
            j,
            solver: self.solver.clone(),
            alpha: self.alpha,
            iterations: self.iterations,
            residual: self.residual,
        })
    }
}
