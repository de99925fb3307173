//! JSONL persistence for dataset records: one image per line, each line
//! independently parseable and stamped with a schema version.

use crate::graph::{DatasetRecord, SceneGraph, StageTag};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Current record schema version; readers reject anything else.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid record: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: schema version {found} (this build reads {SCHEMA_VERSION})")]
    SchemaVersion { line: usize, found: u32 },
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    schema_version: u32,
    source: String,
    provenance: Vec<StageTag>,
    scene_graph: SceneGraph,
}

impl From<DatasetRecord> for RecordLine {
    fn from(r: DatasetRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            source: r.source,
            provenance: r.provenance,
            scene_graph: r.scene_graph,
        }
    }
}

/// Streaming reader over a JSONL record file.
pub struct RecordReader<R: Read> {
    lines: std::io::Lines<BufReader<R>>,
    line_no: usize,
}

impl RecordReader<File> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RecordError> {
        Ok(Self::new(File::open(path)?))
    }
}

impl<R: Read> RecordReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: BufReader::new(reader).lines(),
            line_no: 0,
        }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<DatasetRecord, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Result<RecordLine, _> = serde_json::from_str(&line);
            return Some(match parsed {
                Ok(rl) if rl.schema_version != SCHEMA_VERSION => Err(RecordError::SchemaVersion {
                    line: self.line_no,
                    found: rl.schema_version,
                }),
                Ok(rl) => Ok(DatasetRecord {
                    scene_graph: rl.scene_graph,
                    source: rl.source,
                    provenance: rl.provenance,
                }),
                Err(source) => Err(RecordError::Parse {
                    line: self.line_no,
                    source,
                }),
            });
        }
    }
}

/// Read a whole record file into memory, preserving image order.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, RecordError> {
    RecordReader::open(path)?.collect()
}

/// Serialize one record as a single JSONL line (no trailing newline).
pub fn record_to_line(record: &DatasetRecord) -> String {
    serde_json::to_string(&RecordLine::from(record.clone())).expect("record serializes")
}

/// Write records to a JSONL file, one per line, in input order.
pub fn write_records<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a DatasetRecord>,
) -> Result<(), RecordError> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        writeln!(w, "{}", record_to_line(record))?;
    }
    w.flush()?;
    Ok(())
}
