//! Map and frame export: binary little-endian PLY and PNG renders.

use std::path::Path;

use splatmap::{GaussianMap, Image};

use crate::error::{HarnessError, Result};
use crate::sequence::save_png;

/// Bytes per vertex record: xyz, rgb, opacity, scale xyz, rotation wxyz.
pub const PLY_RECORD_BYTES: usize = 3 * 4 + 3 + 4 + 3 * 4 + 4 * 4;

const PLY_PROPERTIES: &[(&str, &str)] = &[
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("float", "opacity"),
    ("float", "scale_x"),
    ("float", "scale_y"),
    ("float", "scale_z"),
    ("float", "rot_w"),
    ("float", "rot_x"),
    ("float", "rot_y"),
    ("float", "rot_z"),
];

fn ply_header(n: usize) -> String {
    let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
    for (ty, name) in PLY_PROPERTIES {
        h.push_str(&format!("property {ty} {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes the map. Opacity and scale are written in activated form and
/// the rotation normalized.
pub fn ply_bytes(map: &GaussianMap) -> Vec<u8> {
    let header = ply_header(map.len());
    let mut out = Vec::with_capacity(header.len() + map.len() * PLY_RECORD_BYTES);
    out.extend_from_slice(header.as_bytes());
    for g in map.gaussians() {
        let f32s = |vals: &[f64], out: &mut Vec<u8>| {
            for v in vals {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        f32s(g.position.as_slice(), &mut out);
        out.extend(g.color.iter().map(|&c| to_u8(c)));
        f32s(&[g.opacity()], &mut out);
        f32s(g.scale().as_slice(), &mut out);
        let q = g.unit_rotation();
        f32s(&[q.w, q.i, q.j, q.k], &mut out);
    }
    out
}

pub fn write_ply(map: &GaussianMap, path: &Path) -> Result<()> {
    std::fs::write(path, ply_bytes(map)).map_err(|e| HarnessError::write(path, e))
}

/// One decoded PLY vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
    pub opacity: f32,
    pub scale: [f32; 3],
    pub rotation: [f32; 4],
}

/// Parses files produced by [`ply_bytes`].
pub fn parse_ply(bytes: &[u8]) -> std::result::Result<Vec<PlyVertex>, String> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or("missing end_header")?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| e.to_string())?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err("unsupported format".into());
    }
    let n: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|s| s.parse().ok())
        .ok_or("bad vertex element line")?;
    for (ty, name) in PLY_PROPERTIES {
        let want = format!("property {ty} {name}");
        if lines.next() != Some(want.as_str()) {
            return Err(format!("expected `{want}`"));
        }
    }
    let body = &bytes[end..];
    if body.len() != n * PLY_RECORD_BYTES {
        return Err(format!("body has {} bytes, expected {}", body.len(), n * PLY_RECORD_BYTES));
    }
    let f = |rec: &[u8], at: usize| f32::from_le_bytes(rec[at..at + 4].try_into().unwrap());
    Ok(body
        .chunks_exact(PLY_RECORD_BYTES)
        .map(|r| PlyVertex {
            position: [f(r, 0), f(r, 4), f(r, 8)],
            color: [r[12], r[13], r[14]],
            opacity: f(r, 15),
            scale: [f(r, 19), f(r, 23), f(r, 27)],
            rotation: [f(r, 31), f(r, 35), f(r, 39), f(r, 43)],
        })
        .collect())
}

/// Writes `frame_NNNNN.png` for each `(index, image)` pair.
pub fn write_frames<'a>(dir: &Path, frames: impl IntoIterator<Item = (usize, &'a Image)>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::write(dir, e))?;
    for (index, img) in frames {
        save_png(&dir.join(format!("frame_{index:05}.png")), img)?;
    }
    Ok(())
}
