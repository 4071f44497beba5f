//! Artifact persistence. JSONL files start with a header line
//! `{"schema":N,"kind":"...","records":n}` so readers reject stale or
//! foreign files before parsing any record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTIFACT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub kind: String,
    pub records: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::CorruptArtifact { path: path.to_path_buf(), message: message.into() }
}

pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    let header = Header { schema: ARTIFACT_SCHEMA, kind: kind.to_string(), records: records.len() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>> {
    let mut lines = BufReader::new(open(path)?).lines();
    let first = lines.next().ok_or_else(|| corrupt(path, "empty file"))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.schema != ARTIFACT_SCHEMA {
        return Err(Error::SchemaMismatch { path: path.to_path_buf(), expected: ARTIFACT_SCHEMA, found: header.schema });
    }
    if header.kind != kind {
        return Err(corrupt(path, format!("expected `{kind}` records, found `{}`", header.kind)));
    }
    let mut out = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| corrupt(path, format!("record {}: {e}", i + 1)))?);
    }
    if out.len() != header.records {
        return Err(corrupt(path, format!("header promises {} records, found {}", header.records, out.len())));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: u32,
    kind: String,
    value: T,
}

/// Single-object artifact with the same schema and kind checks as JSONL.
pub fn write_json<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &Envelope { schema: ARTIFACT_SCHEMA, kind: kind.to_string(), value })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let env: Envelope<serde_json::Value> = serde_json::from_reader(BufReader::new(open(path)?))?;
    if env.schema != ARTIFACT_SCHEMA {
        return Err(Error::SchemaMismatch { path: path.to_path_buf(), expected: ARTIFACT_SCHEMA, found: env.schema });
    }
    if env.kind != kind {
        return Err(corrupt(path, format!("expected `{kind}`, found `{}`", env.kind)));
    }
    Ok(serde_json::from_value(env.value)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
