//! CSV and JSON file helpers shared by every artifact writer.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Prefix of the provenance comment line written at the top of CSV artifacts.
pub const DIGEST_PREFIX: &str = "# config_digest=";

/// Seventeen significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvOut {
    path: std::path::PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, digest: Option<&str>) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = BufWriter::new(file);
        if let Some(d) = digest {
            writeln!(buf, "{DIGEST_PREFIX}{d}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(buf),
        })
    }

    pub fn record<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.inner
            .write_record(fields)
            .map_err(|e| Error::io(&self.path, e.into()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner
            .flush()
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// A parsed CSV file: header plus records tagged with their 1-based line number.
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut header = None;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields: Vec<String> = rec.iter().map(str::to_owned).collect();
        if header.is_none() {
            header = Some(fields);
            continue;
        }
        let width = header.as_ref().map(Vec::len).unwrap_or_default();
        if fields.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        rows.push((line, fields));
    }
    let header = header.ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    Ok(CsvTable { header, rows })
}

pub fn parse_field<T: std::str::FromStr>(value: &str, column: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("column `{column}`: cannot parse `{value}`"),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// The provenance digest on the first line of a CSV artifact, if present.
pub fn read_digest(path: &Path) -> Result<Option<String>> {
    use std::io::BufRead;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(first
        .trim_end()
        .strip_prefix(DIGEST_PREFIX)
        .map(str::to_owned))
}
