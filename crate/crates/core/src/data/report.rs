//! Report persistence.
//!
//! Floats are written with 17 significant digits in exponent form so every
//! value survives a save/load cycle bit-for-bit. Single-document reports carry
//! a top-level `schema_version`; JSONL reports carry it in a header line.

use super::{
    DataError, EvalReport, PartitionReport, EntropyRecord, RoutingDecision, SCHEMA_VERSION,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};
use serde_json::Value;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Formatter that writes every `f64` as `{:.16e}`.
struct Sig17<F> {
    inner: F,
}

macro_rules! delegate {
    ($($name:ident),*) => {
        $(fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
            self.inner.$name(w)
        })*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    delegate!(begin_array, end_array, begin_object, end_object, begin_object_value, end_object_value, end_array_value);

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
}

/// Serializes `value` on a single line.
pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        Sig17 {
            inner: CompactFormatter,
        },
    );
    value
        .serialize(&mut ser)
        .expect("report types serialize infallibly");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut buf,
        Sig17 {
            inner: PrettyFormatter::new(),
        },
    );
    value
        .serialize(&mut ser)
        .expect("report types serialize infallibly");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes a single-document report with a `schema_version` field.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = to_json_pretty(&Versioned {
        schema_version: SCHEMA_VERSION,
        body: value,
    });
    write_text(path, &text)
}

/// Reads a report written by [`write_json`], rejecting unknown versions.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    check_version(path, &value)?;
    if let Value::Object(map) = &mut value {
        map.remove("schema_version");
    }
    serde_json::from_value(value).map_err(|e| malformed(path, e))
}

fn malformed(path: &Path, e: impl ToString) -> DataError {
    DataError::MalformedReport {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn check_version(path: &Path, value: &Value) -> Result<(), DataError> {
    let found = value
        .get("schema_version")
        .ok_or_else(|| malformed(path, "missing schema_version"))?;
    let found = match found {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| malformed(path, "schema_version is not an integer"))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(DataError::SchemaVersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// Writes a header object followed by one record per line.
fn write_jsonl<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: &[R],
) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&to_json_line(&Versioned {
        schema_version: SCHEMA_VERSION,
        body: header,
    }));
    out.push('\n');
    for r in records {
        out.push_str(&to_json_line(r));
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_jsonl<H: DeserializeOwned, R: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<R>), DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| malformed(path, "empty file"))?
        .map_err(|e| DataError::io(path, e))?;
    let mut header: Value = serde_json::from_str(&header_line).map_err(|e| malformed(path, e))?;
    check_version(path, &header)?;
    if let Value::Object(map) = &mut header {
        map.remove("schema_version");
    }
    let header: H = serde_json::from_value(header).map_err(|e| malformed(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| malformed(path, format!("line {}: {e}", idx + 2)))?;
        records.push(record);
    }
    Ok((header, records))
}

#[derive(Serialize, Deserialize)]
struct PartitionHeader {
    kind: String,
    tau: f64,
    n_ambiguous: usize,
    n_unambiguous: usize,
}

pub fn save_partition(path: &Path, report: &PartitionReport) -> Result<(), DataError> {
    let header = PartitionHeader {
        kind: "partition".into(),
        tau: report.tau,
        n_ambiguous: report.n_ambiguous,
        n_unambiguous: report.n_unambiguous,
    };
    write_jsonl(path, &header, &report.records)
}

pub fn load_partition(path: &Path) -> Result<PartitionReport, DataError> {
    let (header, records): (PartitionHeader, Vec<EntropyRecord>) = read_jsonl(path)?;
    Ok(PartitionReport {
        tau: header.tau,
        n_ambiguous: header.n_ambiguous,
        n_unambiguous: header.n_unambiguous,
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct RoutingHeader {
    kind: String,
    n: usize,
}

pub fn save_routing(path: &Path, routing: &[RoutingDecision]) -> Result<(), DataError> {
    let header = RoutingHeader {
        kind: "routing".into(),
        n: routing.len(),
    };
    write_jsonl(path, &header, routing)
}

pub fn load_routing(path: &Path) -> Result<Vec<RoutingDecision>, DataError> {
    let (header, records): (RoutingHeader, Vec<RoutingDecision>) = read_jsonl(path)?;
    if header.n != records.len() {
        return Err(malformed(
            path,
            format!("header announces {} records, found {}", header.n, records.len()),
        ));
    }
    Ok(records)
}

pub const REPORT_FILE: &str = "report.json";
pub const PARTITION_FILE: &str = "partition.jsonl";
pub const ROUTING_FILE: &str = "routing.jsonl";

/// Everything a finished run persists.
///
/// State paths are relative to the run directory so a directory can be moved
/// or compared byte-for-byte against another run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineArtifacts {
    pub mode: String,
    pub prior_state_path: Option<String>,
    pub reasoner1_state_path: String,
    pub reasoner2_state_path: Option<String>,
    pub tau: Option<f64>,
    #[serde(skip)]
    pub partition: Option<PartitionReport>,
    #[serde(skip)]
    pub routing: Vec<RoutingDecision>,
    pub partition_path: Option<String>,
    pub routing_path: String,
    pub report: EvalReport,
}

impl PipelineArtifacts {
    pub fn resolve(dir: &Path, relative: &str) -> PathBuf {
        dir.join(relative)
    }
}

/// Writes `report.json`, `routing.jsonl` and (when present) `partition.jsonl`.
pub fn save_artifacts(dir: &Path, artifacts: &PipelineArtifacts) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    if let (Some(partition), Some(rel)) = (&artifacts.partition, &artifacts.partition_path) {
        save_partition(&dir.join(rel), partition)?;
    }
    save_routing(&dir.join(&artifacts.routing_path), &artifacts.routing)?;
    write_json(&dir.join(REPORT_FILE), artifacts)
}

pub fn load_artifacts(dir: &Path) -> Result<PipelineArtifacts, DataError> {
    let mut artifacts: PipelineArtifacts = read_json(&dir.join(REPORT_FILE))?;
    if let Some(rel) = &artifacts.partition_path {
        artifacts.partition = Some(load_partition(&dir.join(rel))?);
    }
    artifacts.routing = load_routing(&dir.join(&artifacts.routing_path))?;
    Ok(artifacts)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| DataError::io(path, e))
}
