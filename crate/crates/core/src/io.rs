//! Frame CSV and OBJ export.
//!
//! The byte layouts are specified in `docs/formats.md`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::FrameRecord;
use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

/// One row of the frame CSV: one bone in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame: usize,
    pub chain: usize,
    pub bone: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    /// Tension of the segment between this bone and its parent (0 for roots).
    pub tension_above: f64,
    pub impulse_above: f64,
    pub phi: f64,
}

impl FrameRow {
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

pub fn frame_rows(records: &[FrameRecord]) -> impl Iterator<Item = FrameRow> + '_ {
    records.iter().flat_map(|r| {
        r.chains.iter().enumerate().flat_map(move |(c, ch)| {
            ch.positions.iter().enumerate().map(move |(b, p)| {
                let v = ch.velocities[b];
                let above = |xs: &[f64]| if b == 0 { 0.0 } else { xs[b - 1] };
                FrameRow {
                    frame: r.frame,
                    chain: c,
                    bone: b,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    vx: v.x,
                    vy: v.y,
                    vz: v.z,
                    tension_above: above(&ch.tensions),
                    impulse_above: above(&ch.impulses),
                    phi: ch.phi[b],
                }
            })
        })
    })
}

pub fn write_frames_csv<W: Write>(out: W, records: &[FrameRecord]) -> Result<(), FormatError> {
    write_rows_csv(out, frame_rows(records))
}

pub fn write_rows_csv<W: Write>(out: W, rows: impl IntoIterator<Item = FrameRow>) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frames_csv<R: Read>(input: R) -> Result<Vec<FrameRow>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<FrameRow>, _>>()?;
    Ok(rows)
}

/// Bone positions of one frame, `[chain][bone]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneFrame {
    pub frame: usize,
    pub chains: Vec<Vec<Vec3>>,
}

/// Groups CSV rows by frame. Rows must be in file order (frame, chain, bone
/// ascending) and every frame must have the same layout.
pub fn group_bone_frames(rows: &[FrameRow]) -> Result<Vec<BoneFrame>, FormatError> {
    let mut frames: Vec<BoneFrame> = Vec::new();
    for row in rows {
        if frames.last().is_none_or(|f| f.frame != row.frame) {
            if frames.last().is_some_and(|f| f.frame > row.frame) {
                return Err(FormatError::Invalid(format!("frame {} out of order", row.frame)));
            }
            frames.push(BoneFrame { frame: row.frame, chains: Vec::new() });
        }
        let f = frames.last_mut().expect("just pushed");
        if row.chain == f.chains.len() && row.bone == 0 {
            f.chains.push(Vec::new());
        }
        let last = f.chains.len().checked_sub(1);
        match f.chains.get_mut(row.chain) {
            Some(ch) if Some(row.chain) == last && ch.len() == row.bone => ch.push(row.position()),
            _ => {
                return Err(FormatError::Invalid(format!(
                    "unexpected row frame {} chain {} bone {}",
                    row.frame, row.chain, row.bone
                )))
            }
        }
    }
    if let Some(first) = frames.first() {
        let layout: Vec<usize> = first.chains.iter().map(Vec::len).collect();
        if let Some(bad) = frames.iter().find(|f| f.chains.iter().map(Vec::len).ne(layout.iter().copied())) {
            return Err(FormatError::Invalid(format!("frame {} has a different chain layout", bad.frame)));
        }
    }
    Ok(frames)
}

/// Wavefront OBJ with `v` lines and 1-based triangle `f` lines.
pub fn write_obj<W: Write>(mut out: W, positions: &[Vec3], triangles: &[[usize; 3]]) -> std::io::Result<()> {
    for p in positions {
        writeln!(out, "v {:?} {:?} {:?}", p.x, p.y, p.z)?;
    }
    for t in triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}
