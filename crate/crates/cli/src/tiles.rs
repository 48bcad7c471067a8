//! Dictionary columns rendered as a grid of 8-bit grayscale tiles.

use std::path::Path;

use pvae::{Error, Matrix, Result};

/// Pixels between neighbouring tiles.
const GAP: usize = 1;
/// Shade of constant tiles.
const FLAT: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Tile width and height for columns of length `m`.
pub fn tile_shape(m: usize, width: Option<usize>, height: Option<usize>) -> Result<(usize, usize)> {
    let (w, h) = match (width, height) {
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) if w > 0 && m.is_multiple_of(w) => (w, m / w),
        (None, Some(h)) if h > 0 && m.is_multiple_of(h) => (m / h, h),
        (None, None) => {
            let s = (m as f64).sqrt().round() as usize;
            if s * s != m {
                return Err(Error::Config(format!(
                    "atoms have {m} entries, which is not a square; pass --width and --height"
                )));
            }
            (s, s)
        }
        _ => {
            return Err(Error::Config(format!(
                "tile size does not divide the atom length {m}"
            )))
        }
    };
    if w * h != m || w == 0 {
        return Err(Error::Config(format!(
            "tile {w}×{h} does not match the atom length {m}"
        )));
    }
    Ok((w, h))
}

/// Column indices sorted by ascending `kl`, ties kept in index order.
pub fn tile_order(k: usize, kl: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    if let Some(kl) = kl {
        order.sort_by(|&a, &b| kl[a].total_cmp(&kl[b]));
    }
    order
}

/// One tile per column of `phi` (row-major within the tile), laid out in
/// `columns` tiles per row following `order`. Each tile is min-max
/// normalized on its own.
pub fn render_grid(
    phi: &Matrix,
    order: &[usize],
    tile: (usize, usize),
    columns: Option<usize>,
) -> Result<GrayImage> {
    let (tw, th) = tile;
    if tw * th != phi.rows() {
        return Err(Error::Config(format!(
            "tile {tw}×{th} does not match the atom length {}",
            phi.rows()
        )));
    }
    let k = order.len();
    let cols = columns
        .unwrap_or_else(|| (k as f64).sqrt().ceil() as usize)
        .clamp(1, k.max(1));
    let rows = k.div_ceil(cols);
    let width = cols * tw + (cols + 1) * GAP;
    let height = rows * th + (rows + 1) * GAP;
    let mut pixels = vec![0u8; width * height];
    for (slot, &j) in order.iter().enumerate() {
        let atom = phi.col(j);
        let lo = atom.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = atom.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let x0 = GAP + (slot % cols) * (tw + GAP);
        let y0 = GAP + (slot / cols) * (th + GAP);
        for (p, &v) in atom.iter().enumerate() {
            let shade = if hi > lo {
                (255.0 * (v - lo) / (hi - lo)).round() as u8
            } else {
                FLAT
            };
            pixels[(y0 + p / tw) * width + x0 + p % tw] = shade;
        }
    }
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::State(format!("PNG encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&img.pixels).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(out)
}

/// Writes PNG for a `.png` extension and binary PGM otherwise.
pub fn write_image(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        encode_png(img)?
    } else {
        encode_pgm(img)
    };
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
