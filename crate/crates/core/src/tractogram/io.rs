//! Line-delimited JSON tractogram files.
//!
//! ```text
//! {"format":"fibercluster-tractogram","version":1,"subject":"s01"}
//! {"points":[[x,y,z],...],"regions":[..],"parcels":[a,b],"truth":3}
//! ```
//!
//! Regions may be given per point; duplicates collapse into a set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use super::{Fiber, Point, Tractogram};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "fibercluster-tractogram";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    subject: String,
}

#[derive(Serialize, Deserialize)]
struct FiberRecord {
    points: Vec<Point>,
    regions: Vec<u32>,
    parcels: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<u64>,
}

fn line_error(line: usize, err: serde_json::Error) -> Error {
    match err.classify() {
        Category::Data => Error::Schema(format!("line {line}: {err}")),
        _ => Error::Parse {
            line,
            message: err.to_string(),
        },
    }
}

pub fn read_tractogram(reader: impl Read) -> Result<Tractogram> {
    let reader = BufReader::new(reader);
    let mut header: Option<Header> = None;
    let mut fibers = Vec::new();
    let mut truth = Vec::new();
    let mut truth_lines = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| line_error(lineno, e))?;
            if h.format != FORMAT_NAME {
                return Err(Error::Schema(format!(
                    "line {lineno}: expected format {FORMAT_NAME:?}, found {:?}",
                    h.format
                )));
            }
            if h.version != FORMAT_VERSION {
                return Err(Error::VersionMismatch {
                    expected: FORMAT_VERSION,
                    found: h.version,
                });
            }
            header = Some(h);
            continue;
        }
        let rec: FiberRecord = serde_json::from_str(&line).map_err(|e| line_error(lineno, e))?;
        let mut fiber = Fiber::new(rec.points, rec.regions, rec.parcels).map_err(|e| {
            Error::Schema(format!("line {lineno}: {e}"))
        })?;
        fiber.source_id = rec.source;
        if let Some(t) = rec.truth {
            truth_lines += 1;
            truth.push(t);
        }
        fibers.push(fiber);
    }

    let truth_labels = match truth_lines {
        0 => None,
        n if n == fibers.len() => Some(truth),
        n => {
            return Err(Error::Schema(format!(
                "truth present on {n} of {} fiber lines; it must be on all or none",
                fibers.len()
            )))
        }
    };
    Ok(Tractogram {
        subject_id: header.map(|h| h.subject).unwrap_or_default(),
        fibers,
        truth_labels,
    })
}

pub fn write_tractogram(t: &Tractogram, writer: impl Write) -> Result<()> {
    t.validate()?;
    let mut w = BufWriter::new(writer);
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        subject: t.subject_id.clone(),
    };
    let io_err = |e| Error::io("<tractogram stream>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io_err)?;
    for (i, f) in t.fibers.iter().enumerate() {
        let rec = FiberRecord {
            points: f.points.clone(),
            regions: f.region_set.iter().copied().collect(),
            parcels: f.endpoint_parcels,
            truth: t.truth_labels.as_ref().map(|l| l[i]),
            source: f.source_id,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_tractogram(path: impl AsRef<Path>) -> Result<Tractogram> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tractogram(file)
}

pub fn save_tractogram(t: &Tractogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tractogram(t, file)
}
