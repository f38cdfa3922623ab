//! IDX file parsing for the MNIST distribution format.
//!
//! IDX is big-endian: a 4-byte magic (0, 0, dtype, ndim), one u32 per
//! dimension, then the raw payload. Only the u8 dtype (0x08) is accepted,
//! which covers both image and label files.

use std::path::Path;

const DTYPE_U8: u8 = 0x08;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { got: u32, expected: u32 },
    #[error("file truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("trailing garbage: {extra} bytes past the payload")]
    TrailingBytes { extra: usize },
    #[error("image dimensions {rows}x{cols} exceed supported bounds")]
    OversizedImage { rows: usize, cols: usize },
}

/// Images from an IDX3 file, row-major, one byte per pixel, 0 = background.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    data: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let got = read_u32(bytes, 0)?;
    if got != expected {
        return Err(IdxError::BadMagic { got, expected });
    }
    debug_assert_eq!((expected >> 8) as u8, DTYPE_U8);
    Ok(())
}

/// Parses an IDX3 image file from memory.
pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows > 4096 || cols > 4096 {
        return Err(IdxError::OversizedImage { rows, cols });
    }
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(IdxError::TrailingBytes {
            extra: bytes.len() - need,
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        data: bytes[16..].to_vec(),
    })
}

/// Parses an IDX1 label file from memory. Labels are returned raw; range
/// checks against a schema belong to the caller.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(IdxError::TrailingBytes {
            extra: bytes.len() - need,
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_images(&bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labels(&bytes)
}
