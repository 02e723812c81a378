//! IDX binary files (the MNIST distribution format).
//!
//! Layout: 4-byte big-endian magic `0x0000_08NN` (unsigned bytes, `NN`
//! dimensions), then `NN` big-endian `u32` dimension sizes, then the payload.

use std::path::Path;

use super::{LabeledSet, UnlabeledSet};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Labeled(LabeledSet),
    Unlabeled(UnlabeledSet),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let raw = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(raw.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("{what}: header declares {len} bytes, only {available} present"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Images scaled to `[0, 1]`, one flattened row per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let width = rows * cols;
    if count == 0 || width == 0 {
        return Err(Error::Format {
            offset: 4,
            message: format!("degenerate image header {count}×{rows}×{cols}"),
        });
    }
    let pixels = cur.payload(count * width, "image payload")?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Tensor::new(vec![count, width], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = cur.u32("label count")? as usize;
    Ok(cur
        .payload(count, "label payload")?
        .iter()
        .map(|&b| usize::from(b))
        .collect())
}

/// Reads an image file and, if given, its label file. The class count of a
/// labeled result is `max(label) + 1`, at least 2.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<IdxData> {
    let bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let x = parse_idx_images(&bytes)?;
    let Some(labels_path) = labels_path else {
        return Ok(IdxData::Unlabeled(UnlabeledSet::new(x)?));
    };
    let bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let y = parse_idx_labels(&bytes)?;
    if y.len() != x.shape()[0] {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} labels for {} images", y.len(), x.shape()[0]),
        });
    }
    let k = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    Ok(IdxData::Labeled(LabeledSet::new(x, y, k)?))
}
