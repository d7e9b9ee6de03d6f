//! Feature store: `store.json` (header), `index.jsonl` (one line per clip)
//! and one raw matrix per modality, `video.bin` and `text.bin`.
//!
//! Matrix files start with the 8-byte magic `ARGF0001`, then `u64 rows`,
//! `u64 width`, then `rows × width` little-endian `f64` in row-major order.

use super::{Dataset, DatasetMeta, SampleRecord};
use crate::error::{CirError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const STORE_MAGIC: &[u8; 8] = b"ARGF0001";

const HEADER_FILE: &str = "store.json";
const INDEX_FILE: &str = "index.jsonl";
const VIDEO_FILE: &str = "video.bin";
const TEXT_FILE: &str = "text.bin";

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    clip_id: String,
    class_id: usize,
    scenario_id: u32,
    location_id: u32,
    video_id: String,
    row: usize,
}

fn write_matrix(path: &Path, rows: &[&[f64]], width: usize) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(STORE_MAGIC)?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(width as u64).to_le_bytes())?;
    for r in rows {
        for x in *r {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let name = path.display();
    if bytes.len() < 24 {
        return Err(CirError::Format(format!("{name}: truncated header")));
    }
    if &bytes[..8] != STORE_MAGIC {
        return Err(CirError::Format(format!("{name}: bad magic")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let width = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let payload = &bytes[24..];
    let expected = rows
        .checked_mul(width)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| CirError::Format(format!("{name}: header overflow")))?;
    if payload.len() != expected {
        return Err(CirError::Consistency(format!(
            "{name}: header declares {rows}×{width} but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, width, data))
}

pub fn write_feature_store(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(HEADER_FILE), serde_json::to_vec_pretty(&dataset.meta)?)?;
    let mut idx = BufWriter::new(std::fs::File::create(dir.join(INDEX_FILE))?);
    for (row, r) in dataset.records.iter().enumerate() {
        let line = IndexLine {
            clip_id: r.clip_id.clone(),
            class_id: r.class_id,
            scenario_id: r.scenario_id,
            location_id: r.location_id,
            video_id: r.video_id.clone(),
            row,
        };
        serde_json::to_writer(&mut idx, &line)?;
        idx.write_all(b"\n")?;
    }
    idx.flush()?;
    let video: Vec<&[f64]> = dataset.records.iter().map(|r| r.video_feat.as_slice()).collect();
    let text: Vec<&[f64]> = dataset.records.iter().map(|r| r.text_feat.as_slice()).collect();
    write_matrix(&dir.join(VIDEO_FILE), &video, dataset.meta.video_dim)?;
    write_matrix(&dir.join(TEXT_FILE), &text, dataset.meta.text_dim)?;
    Ok(())
}

/// Reads a store written by [`write_feature_store`]. Any disagreement
/// between header, index and matrices is an error; no partial dataset is
/// returned.
pub fn read_feature_store(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join(HEADER_FILE))?)?;
    let (vrows, vwidth, vdata) = read_matrix(&dir.join(VIDEO_FILE))?;
    let (trows, twidth, tdata) = read_matrix(&dir.join(TEXT_FILE))?;
    if vwidth != meta.video_dim || twidth != meta.text_dim {
        return Err(CirError::Consistency(format!(
            "matrix widths {vwidth}/{twidth} disagree with header {}/{}",
            meta.video_dim, meta.text_dim
        )));
    }
    if vrows != trows {
        return Err(CirError::Consistency(format!(
            "video matrix has {vrows} rows, text matrix {trows}"
        )));
    }
    let reader = BufReader::new(std::fs::File::open(dir.join(INDEX_FILE))?);
    let mut records = Vec::new();
    let mut seen = vec![false; vrows];
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: IndexLine = serde_json::from_str(&line)
            .map_err(|err| CirError::Format(format!("index line {}: {err}", n + 1)))?;
        if e.row >= vrows || std::mem::replace(&mut seen[e.row], true) {
            return Err(CirError::Consistency(format!(
                "index line {} points at row {} (matrix has {vrows} rows, or row reused)",
                n + 1,
                e.row
            )));
        }
        records.push(SampleRecord {
            video_feat: vdata[e.row * vwidth..(e.row + 1) * vwidth].to_vec(),
            text_feat: tdata[e.row * twidth..(e.row + 1) * twidth].to_vec(),
            clip_id: e.clip_id,
            class_id: e.class_id,
            scenario_id: e.scenario_id,
            location_id: e.location_id,
            video_id: e.video_id,
        });
    }
    if records.len() != vrows {
        return Err(CirError::Consistency(format!(
            "index lists {} clips but matrices hold {vrows} rows",
            records.len()
        )));
    }
    let ds = Dataset { meta, records };
    ds.validate()?;
    Ok(ds)
}
