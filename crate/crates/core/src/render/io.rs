//! Image and depth-grid files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{Rgb, RgbImage};

use super::RenderOutput;
use crate::error::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes row-major RGB values in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    assert_eq!(rgb.len(), width * height, "pixel count must match the image size");
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let c = rgb[y as usize * width + x as usize];
        Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Depth grid: `DPTH`, u32 width, u32 height, u32 zero, then f32 values
/// row-major (little-endian). Background pixels hold `+inf`.
pub fn save_depth(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    assert_eq!(depth.len(), width * height, "pixel count must match the image size");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for &d in depth {
        w.write_all(&(d as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != DEPTH_MAGIC {
        return Err(Error::InvalidConfig(format!("{} is not a depth grid", path.display())));
    }
    let width = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != width * height * 4 {
        return Err(Error::InvalidConfig(format!("{} is truncated", path.display())));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((width, height, values))
}

/// Grey-scale depth visualization: near is dark, far is light, background
/// is white.
pub fn depth_preview(depth: &[f64]) -> Vec<[f64; 3]> {
    let finite = depth.iter().copied().filter(|d| d.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    depth
        .iter()
        .map(|&d| {
            if d.is_finite() {
                [0.9 * (d - lo) / span; 3]
            } else {
                [1.0; 3]
            }
        })
        .collect()
}

/// Normals mapped from `[-1, 1]` to `[0, 1]`; background stays black.
pub fn normal_preview(normal: &[[f64; 3]]) -> Vec<[f64; 3]> {
    normal
        .iter()
        .map(|n| {
            if *n == [0.0; 3] {
                [0.0; 3]
            } else {
                [0.5 * (n[0] + 1.0), 0.5 * (n[1] + 1.0), 0.5 * (n[2] + 1.0)]
            }
        })
        .collect()
}

/// Writes `<stem>_rgb.png`, `<stem>_depth.bin`, `<stem>_depth.png` and
/// `<stem>_normal.png` into `dir`, returning the paths written.
pub fn save_render(out: &RenderOutput, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (out.width, out.height);
    let paths = [
        dir.join(format!("{stem}_rgb.png")),
        dir.join(format!("{stem}_depth.bin")),
        dir.join(format!("{stem}_depth.png")),
        dir.join(format!("{stem}_normal.png")),
    ];
    save_rgb_png(&paths[0], w, h, &out.rgb)?;
    save_depth(&paths[1], w, h, &out.depth)?;
    save_rgb_png(&paths[2], w, h, &depth_preview(&out.depth))?;
    save_rgb_png(&paths[3], w, h, &normal_preview(&out.normal))?;
    Ok(paths.to_vec())
}
