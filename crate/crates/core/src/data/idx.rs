//! Big-endian IDX image and label files.
//!
//! Images: magic `0x00000803`, then `n`, `rows`, `cols` as u32, then
//! `n * rows * cols` bytes. Labels: magic `0x00000801`, then `n`, then
//! `n` bytes.

use std::path::Path;

use super::DataError;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Raw bytes, one `rows * cols` block per image.
    pub bytes: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.bytes[i * n..(i + 1) * n]
    }

    /// Intensities in `[0, 1]` for image `i`.
    pub fn intensities(&self, i: usize) -> Vec<f64> {
        self.image_bytes(i).iter().map(|&b| b as f64 / 255.0).collect()
    }
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32, DataError> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Parse {
            offset,
            message: format!(
                "file truncated: need 4 header bytes, have {}",
                buf.len().saturating_sub(offset)
            ),
        })
}

/// Parse an image file; returns `(rows, cols, bytes)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, Vec<u8>), DataError> {
    let magic = read_u32(buf, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        });
    }
    let n = read_u32(buf, 4)? as usize;
    let rows = read_u32(buf, 8)? as usize;
    let cols = read_u32(buf, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| DataError::Parse {
            offset: 4,
            message: "image dimensions overflow".into(),
        })?;
    let payload = &buf[16..];
    if payload.len() < need {
        return Err(DataError::Parse {
            offset: buf.len(),
            message: format!(
                "file truncated: expected {need} pixel bytes, found {}",
                payload.len()
            ),
        });
    }
    if payload.len() > need {
        return Err(DataError::Parse {
            offset: 16 + need,
            message: format!("{} trailing bytes after pixel data", payload.len() - need),
        });
    }
    Ok((rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32(buf, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        });
    }
    let n = read_u32(buf, 4)? as usize;
    let payload = &buf[8..];
    if payload.len() != n {
        return Err(DataError::Parse {
            offset: 8 + payload.len().min(n),
            message: format!("label count {n} does not match {} payload bytes", payload.len()),
        });
    }
    if let Some(pos) = payload.iter().position(|&l| l > 9) {
        return Err(DataError::Parse {
            offset: 8 + pos,
            message: format!("label {} outside 0..=9", payload[pos]),
        });
    }
    Ok(payload.to_vec())
}

/// Load an image file and its label file; counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxImages, DataError> {
    let (rows, cols, bytes) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    let n_images = bytes.len() / (rows * cols).max(1);
    if n_images != labels.len() {
        return Err(DataError::Parse {
            offset: 4,
            message: format!("{n_images} images but {} labels", labels.len()),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        bytes,
        labels,
    })
}

pub fn write_idx_images(rows: usize, cols: usize, bytes: &[u8]) -> Vec<u8> {
    let n = bytes.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + bytes.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(bytes);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
