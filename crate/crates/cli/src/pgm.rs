//! Binary PGM (P5) export for sample grids, plus a strict parser so tests
//! and downstream tools can read the files back without an image library.
//!
//! A grid lays `rows x cols` tiles out row-major with a 2 px white gutter
//! between neighbors and no outer border, so a 6x6 grid of 28x56 canvases
//! is exactly 346x178. Unused trailing cells are solid white. Pixels map
//! through the same quantization the dataset loader inverts, so
//! export -> parse -> untile reproduces the quantized images byte for
//! byte.

use std::path::{Path, PathBuf};

use duogan_core::dataset::denormalize_pixel;
use ndarray::{Array2, Array4};

/// Gutter width between adjacent tiles, in pixels.
pub const SEPARATOR_PX: usize = 2;

const WHITE: u8 = 255;

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot render an empty batch")]
    EmptyBatch,
    #[error("images must be single-channel, got {0} channels")]
    NotGrayscale(usize),
    #[error("a {rows}x{cols} grid cannot hold {n} images")]
    GridTooSmall { rows: usize, cols: usize, n: usize },
    #[error("pgm parse: {0}")]
    Parse(String),
    #[error("pgm is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// A decoded grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Renders a batch (B, 1, H, W) into grid bytes. Tiles fill the grid
/// row-major in batch order.
pub fn grid_bytes(images: &Array4<f32>, rows: usize, cols: usize) -> Result<Vec<u8>, PgmError> {
    let (b, c, h, w) = images.dim();
    if b == 0 {
        return Err(PgmError::EmptyBatch);
    }
    if c != 1 {
        return Err(PgmError::NotGrayscale(c));
    }
    if rows.saturating_mul(cols) < b {
        return Err(PgmError::GridTooSmall { rows, cols, n: b });
    }
    let height = rows * h + (rows - 1) * SEPARATOR_PX;
    let width = cols * w + (cols - 1) * SEPARATOR_PX;
    let mut pixels = vec![WHITE; width * height];
    for i in 0..b {
        let y0 = (i / cols) * (h + SEPARATOR_PX);
        let x0 = (i % cols) * (w + SEPARATOR_PX);
        for y in 0..h {
            for x in 0..w {
                pixels[(y0 + y) * width + (x0 + x)] = denormalize_pixel(images[[i, 0, y, x]]);
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_grid(
    images: &Array4<f32>,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(), PgmError> {
    let bytes = grid_bytes(images, rows, cols)?;
    std::fs::write(path, bytes).map_err(|source| PgmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize, PgmError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if bytes.get(*pos) == Some(&b'#') {
        return Err(PgmError::Parse("header comments are not supported".into()));
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::Parse(format!(
            "expected a decimal header field at byte {start}"
        )));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("digits are ascii")
        .parse()
        .map_err(|_| PgmError::Parse("header field out of range".into()))
}

/// Decodes a binary PGM as this module writes them: `P5`, decimal width,
/// height, and maxval 255 separated by whitespace, one whitespace byte,
/// then exactly width*height raster bytes.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::Parse("missing P5 magic".into()));
    }
    let mut pos = 2;
    let width = header_field(bytes, &mut pos)?;
    let height = header_field(bytes, &mut pos)?;
    let maxval = header_field(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PgmError::Parse(format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(PgmError::Parse(format!("degenerate size {width}x{height}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(PgmError::Parse(
                "expected a single whitespace byte after maxval".into(),
            ))
        }
    }
    let raster = &bytes[pos..];
    let want = width * height;
    if raster.len() < want {
        return Err(PgmError::Parse(format!(
            "raster truncated: want {want} bytes, have {}",
            raster.len()
        )));
    }
    if raster.len() > want {
        return Err(PgmError::Parse(format!(
            "{} trailing bytes after the raster",
            raster.len() - want
        )));
    }
    Ok(Pgm {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

/// Cuts the first `count` tiles back out of a grid laid out by
/// [`grid_bytes`] with the same geometry.
pub fn untile(
    pgm: &Pgm,
    rows: usize,
    cols: usize,
    tile_h: usize,
    tile_w: usize,
    count: usize,
) -> Result<Vec<Array2<u8>>, PgmError> {
    if count > rows * cols {
        return Err(PgmError::GridTooSmall {
            rows,
            cols,
            n: count,
        });
    }
    let want_h = rows * tile_h + (rows - 1) * SEPARATOR_PX;
    let want_w = cols * tile_w + (cols - 1) * SEPARATOR_PX;
    if pgm.width != want_w || pgm.height != want_h {
        return Err(PgmError::SizeMismatch {
            got_w: pgm.width,
            got_h: pgm.height,
            want_w,
            want_h,
        });
    }
    let mut tiles = Vec::with_capacity(count);
    for i in 0..count {
        let y0 = (i / cols) * (tile_h + SEPARATOR_PX);
        let x0 = (i % cols) * (tile_w + SEPARATOR_PX);
        tiles.push(Array2::from_shape_fn((tile_h, tile_w), |(y, x)| {
            pgm.pixels[(y0 + y) * pgm.width + (x0 + x)]
        }));
    }
    Ok(tiles)
}
