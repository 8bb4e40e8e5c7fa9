//! Sequence directory layout:
//!   manifest.json          domain spec, seed, dimensions
//!   groundtruth.csv        frame,x,y,w,h (floats printed exactly)
//!   frames/f00000.bin ...  raw f64 little-endian, row-major H*W
//!
//! Floats in the CSV use Rust's shortest-roundtrip formatting, so import
//! reproduces the exported sequence bitwise.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, DomainSpec, Sequence, VideoError};
use crate::engine::Tensor;

#[derive(Serialize, Deserialize)]
struct SequenceManifest {
    domain: DomainSpec,
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
}

fn dir_err(path: &Path, msg: impl Into<String>) -> VideoError {
    VideoError::BadSequenceDir {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn export_sequence(
    dir: &Path,
    seq: &Sequence,
    spec: &DomainSpec,
    seed: u64,
) -> Result<(), VideoError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;

    let manifest = SequenceManifest {
        domain: spec.clone(),
        seed,
        frames: seq.len(),
        height: seq.height,
        width: seq.width,
    };
    let mjson = serde_json::to_string_pretty(&manifest)
        .map_err(|e| dir_err(dir, format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), mjson)?;

    let mut csv = BufWriter::new(fs::File::create(dir.join("groundtruth.csv"))?);
    writeln!(csv, "frame,x,y,w,h")?;
    for (i, b) in seq.truth.iter().enumerate() {
        writeln!(csv, "{},{},{},{},{}", i, b.x, b.y, b.w, b.h)?;
    }
    csv.flush()?;

    for (i, frame) in seq.frames.iter().enumerate() {
        let mut buf = Vec::with_capacity(frame.numel() * 8);
        for &v in frame.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(frames_dir.join(format!("f{i:05}.bin")), buf)?;
    }
    Ok(())
}

pub fn import_sequence(dir: &Path) -> Result<(Sequence, DomainSpec, u64), VideoError> {
    let mpath = dir.join("manifest.json");
    let mjson = fs::read_to_string(&mpath)
        .map_err(|e| dir_err(dir, format!("manifest.json: {e}")))?;
    let manifest: SequenceManifest = serde_json::from_str(&mjson)
        .map_err(|e| dir_err(dir, format!("manifest decode: {e}")))?;

    let csv = fs::read_to_string(dir.join("groundtruth.csv"))
        .map_err(|e| dir_err(dir, format!("groundtruth.csv: {e}")))?;
    let truth = parse_groundtruth(&csv).map_err(|msg| dir_err(dir, msg))?;
    if truth.len() != manifest.frames {
        return Err(dir_err(
            dir,
            format!(
                "groundtruth has {} rows, manifest says {} frames",
                truth.len(),
                manifest.frames
            ),
        ));
    }

    let n = manifest.height * manifest.width;
    let mut frames = Vec::with_capacity(manifest.frames);
    for i in 0..manifest.frames {
        let fpath = dir.join("frames").join(format!("f{i:05}.bin"));
        let mut buf = Vec::with_capacity(n * 8);
        fs::File::open(&fpath)
            .map_err(|e| dir_err(dir, format!("{}: {e}", fpath.display())))?
            .read_to_end(&mut buf)?;
        if buf.len() != n * 8 {
            return Err(dir_err(
                dir,
                format!("frame {i} has {} bytes, expected {}", buf.len(), n * 8),
            ));
        }
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Tensor::new(vec![manifest.height, manifest.width], data).unwrap());
    }

    Ok((
        Sequence {
            domain_id: manifest.domain.domain_id,
            height: manifest.height,
            width: manifest.width,
            frames,
            truth,
        },
        manifest.domain,
        manifest.seed,
    ))
}

pub fn parse_groundtruth(csv: &str) -> Result<Vec<BBox>, String> {
    let mut out = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "frame,x,y,w,h" {
                return Err(format!("bad header '{line}'"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!("line {}: expected 5 fields", lineno + 1));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| format!("line {}: bad frame index", lineno + 1))?;
        if frame != out.len() {
            return Err(format!(
                "line {}: frame {frame} out of order (expected {})",
                lineno + 1,
                out.len()
            ));
        }
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .map_err(|_| format!("line {}: bad float '{f}'", lineno + 1))?;
        }
        out.push(BBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}
