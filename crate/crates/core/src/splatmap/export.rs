//! Map and render exports: binary PLY point clouds, 8-bit RGB PNGs, and
//! 16-bit millimeter depth PNGs.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::{Gaussian, GaussianMap};
use crate::frame::FrameId;

/// Writes the map as a binary little-endian PLY with per-vertex
/// `x y z red green blue opacity sigma`.
pub fn export_ply(map: &GaussianMap, path: &Path) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property float opacity\nproperty float sigma\nend_header\n",
        map.len()
    )?;
    for g in map.gaussians() {
        w.write_f32::<LittleEndian>(g.mean.x as f32)?;
        w.write_f32::<LittleEndian>(g.mean.y as f32)?;
        w.write_f32::<LittleEndian>(g.mean.z as f32)?;
        for ch in 0..3 {
            w.write_all(&[(g.color[ch].clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
        w.write_f32::<LittleEndian>(g.opacity as f32)?;
        w.write_f32::<LittleEndian>(g.sigma as f32)?;
    }
    w.flush()
}

/// Reads a PLY written by [`export_ply`]. Provenance is not stored in the
/// file, so `source` comes back as agent 0 / seq 0.
pub fn read_ply(path: &Path) -> std::io::Result<GaussianMap> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut count = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "ply header truncated",
            ));
        }
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "ply missing vertex count")
    })?;
    let mut map = GaussianMap::new();
    for _ in 0..count {
        let x = r.read_f32::<LittleEndian>()? as f64;
        let y = r.read_f32::<LittleEndian>()? as f64;
        let z = r.read_f32::<LittleEndian>()? as f64;
        let mut rgb = [0u8; 3];
        r.read_exact(&mut rgb)?;
        let opacity = r.read_f32::<LittleEndian>()? as f64;
        let sigma = r.read_f32::<LittleEndian>()? as f64;
        map.extend([Gaussian::new(
            Vector3::new(x, y, z),
            sigma,
            opacity,
            [
                rgb[0] as f64 / 255.0,
                rgb[1] as f64 / 255.0,
                rgb[2] as f64 / 255.0,
            ],
            FrameId::new(0, 0),
        )]);
    }
    Ok(map)
}

/// 8-bit PNG from a row-major `[0,1]` float RGB buffer.
pub fn save_rgb_png(path: &Path, width: u32, height: u32, rgb: &[f32]) -> image::ImageResult<()> {
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(width, height, bytes)
        .expect("rgb buffer size matches dimensions");
    img.save(path)
}

/// 16-bit grayscale PNG holding depth in millimeters.
pub fn save_depth_png(path: &Path, width: u32, height: u32, depth_m: &[f32]) -> image::ImageResult<()> {
    let mm: Vec<u16> = depth_m
        .iter()
        .map(|d| (f64::from(*d) * 1000.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width, height, mm)
        .expect("depth buffer size matches dimensions");
    img.save(path)
}
