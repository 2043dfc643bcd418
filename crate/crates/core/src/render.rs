//! PNG heat maps of index fields.
//!
//! Values are clamped to `[0, 1]` and mapped through a fixed five-stop
//! palette. The image is flipped so that grid row 0 is the bottom line.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::IndexField;

const STOPS: [[f64; 3]; 5] = [
    [48.0, 18.0, 59.0],
    [70.0, 134.0, 251.0],
    [27.0, 229.0, 181.0],
    [250.0, 186.0, 57.0],
    [122.0, 4.0, 3.0],
];

pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let t = v * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (STOPS[k][c] + f * (STOPS[k + 1][c] - STOPS[k][c])).round() as u8;
    }
    out
}

/// RGB pixels, top line first, each node drawn as a `scale × scale` block.
pub fn heatmap_pixels(field: &IndexField, scale: usize) -> (u32, u32, Vec<u8>) {
    let (n1, n2) = (field.grid.n1, field.grid.n2);
    let (w, h) = (n1 * scale, n2 * scale);
    let mut px = Vec::with_capacity(w * h * 3);
    for row in 0..h {
        let j = n2 - 1 - row / scale;
        for col in 0..w {
            px.extend_from_slice(&colormap(field.values[j * n1 + col / scale]));
        }
    }
    (w as u32, h as u32, px)
}

pub fn encode_heatmap<W: Write>(field: &IndexField, scale: usize, out: W) -> Result<()> {
    if scale == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let (w, h, px) = heatmap_pixels(field, scale);
    let mut enc = png::Encoder::new(out, w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&px).map_err(io)?;
    writer.finish().map_err(io)?;
    Ok(())
}

pub fn render_heatmap(field: &IndexField, scale: usize, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    encode_heatmap(field, scale, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
