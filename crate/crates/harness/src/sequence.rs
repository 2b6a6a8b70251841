//! Sequence manifests and tracker logs.
//!
//! A manifest is plain text, one directive per line (`#` starts a comment):
//!
//! ```text
//! intrinsics <fx> <fy> <cx> <cy> <width> <height>
//! tracker_log <path>
//! depth_scale <units per meter>            # optional, default 5000
//! frame <index> <image> <timestamp> <tx> <ty> <tz> <qx> <qy> <qz> <qw>
//! depth <index> <16-bit png>                # optional, per frame
//! ```
//!
//! Frame poses use TUM trajectory syntax (camera-to-world translation and
//! quaternion). The tracker log holds one record per line,
//! `<frame index> <point count>` followed by `x y z u v d` for every point:
//! its world position, pixel and depth in that frame.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use splatmap::densify::{DepthMap, GroundTruthDepth};
use splatmap::{FrameInput, Image, Intrinsics, Pose, TrackedPoint};

use crate::error::{HarnessError, Result};

pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

/// A loaded sequence, frames in manifest order.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<FrameInput>,
    pub timestamps: Vec<f64>,
    pub depth: GroundTruthDepth,
}

struct FrameLine {
    index: usize,
    image: PathBuf,
    timestamp: f64,
    pose: Pose,
    line: usize,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn fields<T: std::str::FromStr>(path: &Path, line: usize, what: &str, tokens: &[&str]) -> Result<Vec<T>> {
    tokens
        .iter()
        .map(|t| t.parse().map_err(|_| parse_err(path, line, format!("{what}: cannot parse {t:?}"))))
        .collect()
}

fn expect_len(path: &Path, line: usize, what: &str, tokens: &[&str], n: usize) -> Result<()> {
    if tokens.len() != n {
        return Err(parse_err(
            path,
            line,
            format!("{what} takes {n} fields, got {}", tokens.len()),
        ));
    }
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(HarnessError::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| HarnessError::Invariant(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?)
}

fn load_depth(path: &Path, scale: f64) -> Result<DepthMap> {
    if !path.exists() {
        return Err(HarnessError::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| HarnessError::Invariant(format!("cannot decode {}: {e}", path.display())))?
        .to_luma16();
    Ok(DepthMap {
        width: img.width() as usize,
        height: img.height() as usize,
        values: img.as_raw().iter().map(|&v| v as f64 / scale).collect(),
    })
}

/// Parses a tracker log into per-frame point lists.
pub fn parse_tracker_log(path: &Path, text: &str) -> Result<BTreeMap<usize, Vec<TrackedPoint>>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 2 {
            return Err(parse_err(path, i + 1, "record needs a frame index and a point count"));
        }
        let head: Vec<usize> = fields(path, i + 1, "record header", &tokens[..2])?;
        let (frame, count) = (head[0], head[1]);
        expect_len(path, i + 1, "tracker record", &tokens, 2 + 6 * count)?;
        let values: Vec<f64> = fields(path, i + 1, "tracker point", &tokens[2..])?;
        let points = values
            .chunks_exact(6)
            .map(|c| TrackedPoint {
                world: Vector3::new(c[0], c[1], c[2]),
                pixel: Vector2::new(c[3], c[4]),
                depth: c[5],
            })
            .collect();
        if out.insert(frame, points).is_some() {
            return Err(parse_err(path, i + 1, format!("second record for frame {frame}")));
        }
    }
    Ok(out)
}

pub fn load_sequence(manifest: &Path) -> Result<Sequence> {
    let text = std::fs::read_to_string(manifest).map_err(|e| HarnessError::read(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut intrinsics = None;
    let mut tracker = None;
    let mut depth_scale = DEFAULT_DEPTH_SCALE;
    let mut frames: Vec<FrameLine> = Vec::new();
    let mut depth_paths: Vec<(usize, PathBuf, usize)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let rest = &tokens[1..];
        match tokens[0] {
            "intrinsics" => {
                expect_len(manifest, n, "intrinsics", rest, 6)?;
                let f: Vec<f64> = fields(manifest, n, "intrinsics", &rest[..4])?;
                let wh: Vec<usize> = fields(manifest, n, "intrinsics", &rest[4..])?;
                let k = Intrinsics::new(f[0], f[1], f[2], f[3], wh[0], wh[1])
                    .map_err(|e| parse_err(manifest, n, e.to_string()))?;
                intrinsics = Some(k);
            }
            "tracker_log" => {
                expect_len(manifest, n, "tracker_log", rest, 1)?;
                tracker = Some(base.join(rest[0]));
            }
            "depth_scale" => {
                expect_len(manifest, n, "depth_scale", rest, 1)?;
                depth_scale = fields::<f64>(manifest, n, "depth_scale", rest)?[0];
                if !(depth_scale > 0.0) {
                    return Err(parse_err(manifest, n, "depth_scale must be positive"));
                }
            }
            "frame" => {
                expect_len(manifest, n, "frame", rest, 10)?;
                let index = fields::<usize>(manifest, n, "frame index", &rest[..1])?[0];
                let v: Vec<f64> = fields(manifest, n, "frame pose", &rest[2..])?;
                let q = [v[4], v[5], v[6], v[7]];
                let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(qn > 1e-9) || v.iter().any(|x| !x.is_finite()) {
                    return Err(parse_err(manifest, n, "pose must be finite with a non-zero quaternion"));
                }
                frames.push(FrameLine {
                    index,
                    image: base.join(rest[1]),
                    timestamp: v[0],
                    pose: Pose::from_world_from_camera([v[1], v[2], v[3]], q),
                    line: n,
                });
            }
            "depth" => {
                expect_len(manifest, n, "depth", rest, 2)?;
                let index = fields::<usize>(manifest, n, "depth index", &rest[..1])?[0];
                depth_paths.push((index, base.join(rest[1]), n));
            }
            other => return Err(parse_err(manifest, n, format!("unknown directive `{other}`"))),
        }
    }

    let k = intrinsics.ok_or_else(|| parse_err(manifest, 0, "missing `intrinsics` line"))?;
    let tracker_path = tracker.ok_or_else(|| parse_err(manifest, 0, "missing `tracker_log` line"))?;
    for w in frames.windows(2) {
        if w[1].index <= w[0].index {
            return Err(HarnessError::Invariant(format!(
                "frame indices must increase (line {}: {} after {})",
                w[1].line, w[1].index, w[0].index
            )));
        }
    }
    let tracker_text = std::fs::read_to_string(&tracker_path).map_err(|e| HarnessError::read(&tracker_path, e))?;
    let mut points = parse_tracker_log(&tracker_path, &tracker_text)?;
    let known: HashMap<usize, ()> = frames.iter().map(|f| (f.index, ())).collect();
    if let Some(unknown) = points.keys().find(|i| !known.contains_key(i)) {
        return Err(HarnessError::Invariant(format!(
            "tracker record for frame {unknown}, which the manifest does not list"
        )));
    }

    let mut depth = GroundTruthDepth::new();
    for (index, path, line) in depth_paths {
        if !known.contains_key(&index) {
            return Err(HarnessError::Invariant(format!(
                "depth on line {line} refers to unknown frame {index}"
            )));
        }
        let map = load_depth(&path, depth_scale)?;
        if (map.width, map.height) != (k.width, k.height) {
            return Err(HarnessError::Invariant(format!("depth {} has the wrong size", path.display())));
        }
        depth.insert(index, map);
    }

    let mut out = Vec::with_capacity(frames.len());
    let mut timestamps = Vec::with_capacity(frames.len());
    for f in frames {
        let image = load_image(&f.image)?;
        if image.dims() != (k.width, k.height) {
            return Err(HarnessError::Invariant(format!(
                "image {} is {:?}, intrinsics say {}x{}",
                f.image.display(),
                image.dims(),
                k.width,
                k.height
            )));
        }
        let frame = FrameInput {
            index: f.index,
            pose: f.pose,
            intrinsics: k,
            image,
            tracked_points: points.remove(&f.index).unwrap_or_default(),
        };
        frame
            .validate()
            .map_err(|e| HarnessError::Invariant(format!("frame {}: {e}", f.index)))?;
        timestamps.push(f.timestamp);
        out.push(frame);
    }
    Ok(Sequence {
        frames: out,
        timestamps,
        depth,
    })
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = img.dims();
    image::save_buffer(path, &img.to_rgb8(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| HarnessError::write(path, std::io::Error::other(e)))
}

fn save_depth(path: &Path, d: &DepthMap, scale: f64) -> Result<()> {
    let raw: Vec<u16> = d
        .values
        .iter()
        .map(|&v| if v > 0.0 && v.is_finite() { (v * scale).round().min(65535.0) as u16 } else { 0 })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(d.width as u32, d.height as u32, raw)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| HarnessError::write(path, std::io::Error::other(e)))
}

/// Writes `seq` as a manifest plus PNG frames, depth maps and tracker log
/// under `dir`. Returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf> {
    let img_dir = dir.join("rgb");
    std::fs::create_dir_all(&img_dir).map_err(|e| HarnessError::write(&img_dir, e))?;
    let mut manifest = String::new();
    let mut tracker = String::new();
    if let Some(first) = seq.frames.first() {
        let k = &first.intrinsics;
        let _ = writeln!(manifest, "intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    }
    let _ = writeln!(manifest, "tracker_log tracker.txt");
    let _ = writeln!(manifest, "depth_scale {DEFAULT_DEPTH_SCALE}");
    for (f, ts) in seq.frames.iter().zip(&seq.timestamps) {
        let name = format!("rgb/{:05}.png", f.index);
        save_png(&dir.join(&name), &f.image)?;
        let (t, q) = f.pose.to_world_from_camera();
        let _ = writeln!(
            manifest,
            "frame {} {name} {ts} {} {} {} {} {} {} {}",
            f.index, t[0], t[1], t[2], q[0], q[1], q[2], q[3]
        );
        if let Some(d) = seq.depth.get(f.index) {
            let dname = format!("rgb/{:05}_depth.png", f.index);
            save_depth(&dir.join(&dname), d, DEFAULT_DEPTH_SCALE)?;
            let _ = writeln!(manifest, "depth {} {dname}", f.index);
        }
        let _ = write!(tracker, "{} {}", f.index, f.tracked_points.len());
        for tp in &f.tracked_points {
            let _ = write!(
                tracker,
                " {} {} {} {} {} {}",
                tp.world.x, tp.world.y, tp.world.z, tp.pixel.x, tp.pixel.y, tp.depth
            );
        }
        tracker.push('\n');
    }
    let tracker_path = dir.join("tracker.txt");
    std::fs::write(&tracker_path, tracker).map_err(|e| HarnessError::write(&tracker_path, e))?;
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| HarnessError::write(&path, e))?;
    Ok(path)
}
