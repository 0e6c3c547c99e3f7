//! Versioned line-delimited artifact files.
//!
//! Every file starts with a header line `{"format": ..., "version": ..., "meta": {...}}`
//! followed by one JSON record per line. JSON artifacts that hold a single document use
//! the same header wrapped around a `body` field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: Value,
}

impl Header {
    pub fn new(format: &str, version: u32) -> Self {
        Self {
            format: format.to_owned(),
            version,
            meta: Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: impl Serialize) -> Self {
        self.meta = serde_json::to_value(meta).unwrap_or(Value::Null);
        self
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    File::open(path).map_err(io_err(path))
}

fn check_header(path: &Path, header: &Header, format: &str, version: u32) -> Result<()> {
    if header.format != format {
        return Err(format_err(
            path,
            format!("expected format {format:?}, found {:?}", header.format),
        ));
    }
    if header.version != version {
        return Err(format_err(
            path,
            format!("unsupported {format} version {} (expected {version})", header.version),
        ));
    }
    Ok(())
}

fn to_line<T: Serialize>(path: &Path, v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", to_line(path, header)?).map_err(io_err(path))?;
    for r in records {
        writeln!(w, "{}", to_line(path, r)?).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(Header, Vec<T>)> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| format_err(path, "empty file"))?
        .map_err(io_err(path))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| format_err(path, format!("header: {e}")))?;
    check_header(path, &header, format, version)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| format_err(path, format!("line {}: {e}", i + 2)))?;
        out.push(rec);
    }
    Ok((header, out))
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    #[serde(flatten)]
    header: Header,
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, header: &Header, body: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let doc = Document {
        header: header.clone(),
        body,
    };
    let text = serde_json::to_string(&doc).map_err(|e| format_err(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(Header, T)> {
    let reader = BufReader::new(open(path)?);
    let doc: Document<T> =
        serde_json::from_reader(reader).map_err(|e| format_err(path, e.to_string()))?;
    check_header(path, &doc.header, format, version)?;
    Ok((doc.header, doc.body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &Header::new("a", 1), &[1u32, 2, 3]).unwrap();
        let (_, v): (_, Vec<u32>) = read_jsonl(&p, "a", 1).unwrap();
        assert_eq!(v, vec![1, 2, 3]);
        assert!(matches!(
            read_jsonl::<u32>(&p, "b", 1),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_jsonl::<u32>(&p, "a", 2),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            read_jsonl::<u32>(&dir.path().join("nope"), "a", 1),
            Err(Error::MissingArtifact(_))
        ));
    }
}
