//! Flat-file formats: observation CSVs and JSON artefacts with provenance.
//!
//! Observation files carry a header `x1,...,xp,y` and one row per
//! observation. Values are written with 17 significant digits so that a
//! write/read round trip reproduces every `f64` exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nls::Observation;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{}: {e}", path.display()))
}

/// Reads observations, checking the header against `x1..xp,y`.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidConfig(format!("cannot read CSV header: {e}")))?
        .clone();
    let n = headers.len();
    let expected: Vec<String> = (1..n).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
    if n < 2 || headers.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidConfig(format!(
            "CSV header must be x1,...,xp,y; got '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.records()
        .enumerate()
        .map(|(row, record)| {
            let record = record.map_err(|e| Error::InvalidConfig(format!("row {}: {e}", row + 1)))?;
            let values = record
                .iter()
                .map(|field| {
                    field
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::InvalidConfig(format!("row {}: bad value '{field}'", row + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (y, x) = values.split_last().expect("header checked");
            Ok(Observation::new(x.to_vec(), *y))
        })
        .collect()
}

pub fn read_observations_path(path: &Path) -> Result<Vec<Observation>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_observations(file).map_err(|e| match e {
        Error::InvalidConfig(msg) => io_err(path, msg),
        other => other,
    })
}

/// Writes observations with LF line endings; all rows must share one `p`.
pub fn write_observations<W: Write>(writer: W, data: &[Observation]) -> Result<()> {
    let p = data.first().map_or(1, |o| o.x.len());
    if data.iter().any(|o| o.x.len() != p) {
        return Err(Error::InvalidConfig("observations have differing regressor dimensions".into()));
    }
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let header: Vec<String> = (1..=p).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
    let write_err = |e: csv::Error| Error::InvalidConfig(format!("cannot write CSV: {e}"));
    wtr.write_record(&header).map_err(write_err)?;
    for o in data {
        let row: Vec<String> = o.x.iter().chain([&o.y]).map(|v| format!("{v:.16e}")).collect();
        wtr.write_record(&row).map_err(write_err)?;
    }
    wtr.flush().map_err(|e| Error::InvalidConfig(format!("cannot write CSV: {e}")))
}

pub fn write_observations_path(path: &Path, data: &[Observation]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_observations(BufWriter::new(file), data)
}

/// Who produced an artefact and from which settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// SHA-256 of the canonical JSON form of the run configuration.
    pub config_hash: String,
    pub engine_version: String,
}

impl Provenance {
    pub fn new<T: Serialize>(seed: Option<u64>, config: &T) -> Result<Self> {
        Ok(Provenance {
            seed,
            config_hash: config_hash(config)?,
            engine_version: ENGINE_VERSION.to_string(),
        })
    }
}

/// Hex SHA-256 of `config` serialised through `serde_json::Value`, whose
/// object keys are sorted, so field order does not affect the hash.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let digest = Sha256::digest(value.to_string().as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| io_err(path, e))
}
