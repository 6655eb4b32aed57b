//! Dense optical-flow sequences and their on-disk format.
//!
//! A flow file ("MSCF") is little-endian throughout:
//!
//! ```text
//! magic   4 bytes  4d 53 43 46 ("MSCF")
//! version u32      1
//! width   u32
//! height  u32
//! frames  u32
//! payload frames * height * width * 2 * f32   (u then v, row-major)
//! ```
//!
//! Vectors are stored as f32 and widened to f64 in memory; writing a
//! sequence read from disk reproduces the payload bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const FLOW_MAGIC: [u8; 4] = *b"MSCF";
pub const FLOW_VERSION: u32 = 1;

/// One optical-flow vector, in pixels per frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Velocity {
    pub u: f64,
    pub v: f64,
}

impl Velocity {
    pub fn new(u: f64, v: f64) -> Self {
        Velocity { u, v }
    }

    pub fn magnitude(self) -> f64 {
        self.u.hypot(self.v)
    }

    /// Angle in (-pi, pi], measured from the +x axis, y pointing down in
    /// image coordinates. Callers that need a bin index should go through
    /// [`crate::grid::quantize_direction`].
    pub fn angle(self) -> f64 {
        self.v.atan2(self.u)
    }
}

impl std::ops::Add for Velocity {
    type Output = Velocity;
    fn add(self, rhs: Velocity) -> Velocity {
        Velocity::new(self.u + rhs.u, self.v + rhs.v)
    }
}

impl std::ops::Mul<f64> for Velocity {
    type Output = Velocity;
    fn mul(self, rhs: f64) -> Velocity {
        Velocity::new(self.u * rhs, self.v * rhs)
    }
}

/// A fixed-size stack of per-pixel flow frames, row-major
/// (`index = y * width + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    width: usize,
    height: usize,
    frames: Vec<Vec<Velocity>>,
}

impl FlowSequence {
    /// Frames must all hold exactly `width * height` vectors, and there must
    /// be at least one frame.
    pub fn new(width: usize, height: usize, frames: Vec<Vec<Velocity>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Internal {
                context: "FlowSequence::new",
                reason: format!("zero frame dimension {width}x{height}"),
            });
        }
        if frames.is_empty() {
            return Err(Error::Internal {
                context: "FlowSequence::new",
                reason: "no frames".into(),
            });
        }
        let expected = width * height;
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != expected {
                return Err(Error::Internal {
                    context: "FlowSequence::new",
                    reason: format!(
                        "frame {t} holds {} vectors, expected {expected}",
                        frame.len()
                    ),
                });
            }
        }
        Ok(FlowSequence {
            width,
            height,
            frames,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &[Velocity] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<Velocity>] {
        &self.frames
    }

    pub fn at(&self, t: usize, x: usize, y: usize) -> Velocity {
        self.frames[t][y * self.width + x]
    }

    /// Appends the frames of `other`; dimensions must match.
    pub fn extend(&mut self, other: FlowSequence) -> Result<()> {
        if other.width != self.width || other.height != self.height {
            return Err(Error::ShapeMismatch {
                context: "FlowSequence::extend",
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            });
        }
        self.frames.extend(other.frames);
        Ok(())
    }
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<FlowSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io("open", path, e))?;
    let file_len = file
        .metadata()
        .map_err(|e| Error::io("stat", path, e))?
        .len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io("read header of", path, e))?;
    if magic != FLOW_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
        });
    }
    let version = read_u32(&mut reader, path)?;
    if version != FLOW_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let width = read_u32(&mut reader, path)?;
    let height = read_u32(&mut reader, path)?;
    let frames = read_u32(&mut reader, path)?;
    for (value, what) in [(width, "width"), (height, "height"), (frames, "frame count")] {
        if value == 0 {
            return Err(Error::ZeroDimension {
                path: path.into(),
                what,
            });
        }
    }

    let overflow = || Error::DimensionOverflow {
        path: path.into(),
        width,
        height,
        frames,
    };
    let pixels = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(overflow)?;
    let frame_bytes = pixels.checked_mul(8).ok_or_else(overflow)?;
    let payload_bytes = (frame_bytes as u64)
        .checked_mul(frames as u64)
        .ok_or_else(overflow)?;
    // Refuse to allocate more than the file can possibly back.
    let expected_total = payload_bytes.checked_add(20).ok_or_else(overflow)?;
    if file_len < expected_total {
        return Err(Error::Truncated {
            path: path.into(),
            expected: payload_bytes,
            actual: file_len.saturating_sub(20),
        });
    }

    let mut out = Vec::with_capacity(frames as usize);
    let mut raw = vec![0u8; frame_bytes];
    for _ in 0..frames {
        reader
            .read_exact(&mut raw)
            .map_err(|e| Error::io("read payload of", path, e))?;
        let mut frame = Vec::with_capacity(pixels);
        for chunk in raw.chunks_exact(8) {
            let u = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            let v = f32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
            frame.push(Velocity::new(u as f64, v as f64));
        }
        out.push(frame);
    }
    FlowSequence::new(width as usize, height as usize, out)
}

pub fn write_flow_file(path: impl AsRef<Path>, seq: &FlowSequence) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io("create", path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(&FLOW_MAGIC)
        .map_err(|e| Error::io("write", path, e))?;
    for value in [
        FLOW_VERSION,
        seq.width as u32,
        seq.height as u32,
        seq.frames.len() as u32,
    ] {
        writer
            .write_u32::<LittleEndian>(value)
            .map_err(|e| Error::io("write", path, e))?;
    }
    for frame in &seq.frames {
        for vel in frame {
            writer
                .write_f32::<LittleEndian>(vel.u as f32)
                .map_err(|e| Error::io("write", path, e))?;
            writer
                .write_f32::<LittleEndian>(vel.v as f32)
                .map_err(|e| Error::io("write", path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io("flush", path, e))
}

fn read_u32(reader: &mut impl Read, path: &Path) -> Result<u32> {
    reader
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::io("read header of", path, e))
}

/// Reads per-frame ground-truth labels: one `0` (normal) or `1` (abnormal)
/// per line, line i labelling frame i.
pub fn read_labels_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io("read", path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::InvalidLabel {
                    path: path.into(),
                    line: i + 1,
                    content: other.into(),
                })
            }
        }
    }
    Ok(labels)
}

pub fn write_labels_file(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 2);
    for &label in labels {
        text.push(if label == 0 { '0' } else { '1' });
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io("write", path, e))
}
