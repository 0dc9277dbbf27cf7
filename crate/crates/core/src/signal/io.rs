//! Trace files: `time_ns,value` CSV rows at bin left edges plus a
//! `<stem>.meta.json` sidecar holding the final edge, mode and metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PLTrace, TraceMetadata, TraceMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFileMetadata {
    pub end_ns: f64,
    pub mode: TraceMode,
    #[serde(flatten)]
    pub metadata: TraceMetadata,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Write via a temporary file and rename so readers never see partial output.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_trace(path: &Path, trace: &PLTrace) -> Result<()> {
    trace.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| parse_err(path, e);
    w.write_record(["time_ns", "value"]).map_err(csv_err)?;
    for (t, v) in trace.bin_edges.iter().zip(&trace.values) {
        w.write_record([t.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| parse_err(path, e))?;
    write_atomic(path, &bytes)?;
    let meta = TraceFileMetadata {
        end_ns: trace.end(),
        mode: trace.mode,
        metadata: trace.metadata.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write_atomic(&sidecar_path(path), json.as_bytes())
}

/// Read a trace file. Without a sidecar the bins are taken as uniform and the
/// mode is inferred from integrality.
pub fn read_trace(path: &Path) -> Result<PLTrace> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| parse_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, format!("missing column '{name}'")))
    };
    let (ti, vi) = (col("time_ns")?, col("value")?);
    let mut edges = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .map_err(|_| parse_err(path, format!("line {}: bad number '{s}'", line + 2)))
        };
        edges.push(num(ti)?);
        values.push(num(vi)?);
    }
    if values.is_empty() {
        return Err(parse_err(path, "no data rows"));
    }
    let side = sidecar_path(path);
    let (end, mode, metadata) = if side.exists() {
        let s = fs::read_to_string(&side).map_err(io_err(&side))?;
        let m: TraceFileMetadata = serde_json::from_str(&s).map_err(|e| parse_err(&side, e))?;
        (m.end_ns, m.mode, m.metadata)
    } else {
        let dt = if edges.len() > 1 {
            edges[edges.len() - 1] - edges[edges.len() - 2]
        } else {
            return Err(parse_err(path, "single-row trace needs a metadata sidecar"));
        };
        let mode = if values.iter().all(|v| v.fract() == 0.0) {
            TraceMode::Counts
        } else {
            TraceMode::Rate
        };
        (edges[edges.len() - 1] + dt, mode, TraceMetadata::default())
    };
    edges.push(end);
    PLTrace::new(edges, values, mode, metadata).map_err(|e| parse_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::uniform_edges;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let edges = uniform_edges(1000.0, 1010.0, 0.5).unwrap();
        let values: Vec<f64> = (0..20).map(|i| (i as f64 * 0.1).sin().abs() / 3.0).collect();
        let meta = TraceMetadata {
            power_mw: Some(13.6),
            sequence_id: Some("pp".into()),
            pulse_index: Some(1),
            ..Default::default()
        };
        let t = PLTrace::new(edges, values, TraceMode::Rate, meta).unwrap();
        write_trace(&p, &t).unwrap();
        assert!(dir.path().join("trace.meta.json").exists());
        assert_eq!(read_trace(&p).unwrap(), t);
    }

    #[test]
    fn reads_without_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "time_ns,value\n0,3\n1,4\n2,5\n").unwrap();
        let t = read_trace(&p).unwrap();
        assert_eq!(t.mode, TraceMode::Counts);
        assert_eq!(t.bin_edges, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bad_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "time_ns,value\n0,3\n1,abc\n").unwrap();
        let msg = read_trace(&p).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(read_trace(&dir.path().join("missing.csv")).is_err());
    }
}
