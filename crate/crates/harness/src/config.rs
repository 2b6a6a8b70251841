//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys keep their defaults, and [`RunConfig::entries`] lists the complete
//! effective configuration in a fixed order.

use std::path::Path;

use nalgebra::Vector3;
use splatmap::MapperConfig;

use crate::error::{HarnessError, Result};

/// How error-compensation pixels get their depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    /// Per-frame depth maps listed in the manifest (or produced by `synth`).
    GroundTruth,
    /// Depth of the nearest tracked point.
    NearestTracked,
}

impl DepthSource {
    fn name(self) -> &'static str {
        match self {
            DepthSource::GroundTruth => "ground_truth",
            DepthSource::NearestTracked => "nearest_tracked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub mapper: MapperConfig,
    pub post_refine: usize,
    /// Every `heldout_every`-th frame (1-based) is withheld for evaluation;
    /// 0 disables the split.
    pub heldout_every: usize,
    pub depth: DepthSource,
    pub nearest_radius_px: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mapper: MapperConfig::default(),
            post_refine: 0,
            heldout_every: 8,
            depth: DepthSource::GroundTruth,
            nearest_radius_px: 40.0,
        }
    }
}

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "covis_threshold",
    "t_k",
    "n_local",
    "bank_size",
    "t_local",
    "n_global",
    "sigma1",
    "sigma2",
    "iters_per_keyframe",
    "err_init",
    "mohv_levels",
    "mohv_s_init",
    "mohv_n",
    "eps",
    "eps_e",
    "k",
    "opacity_init",
    "grid_cells",
    "use_mohv",
    "use_error_comp",
    "lr_position",
    "scene_extent",
    "lr_log_scale",
    "lr_rotation",
    "lr_opacity",
    "lr_color",
    "lr_pose_rot",
    "lr_pose_trans",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "refine_poses",
    "prune_opacity",
    "background",
    "post_refine",
    "heldout_every",
    "depth_source",
    "nearest_radius_px",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn vec3(v: &str) -> std::result::Result<Vector3<f64>, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got {v:?}"));
    }
    Ok(Vector3::new(num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::read(path, e))?;
        Self::parse(&text).map_err(|(line, msg)| HarnessError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })
    }

    /// Parses config text; errors carry the 1-based line number.
    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| (i + 1, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err((i + 1, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|msg| (i + 1, format!("{key}: {msg}")))?;
        }
        cfg.validate().map_err(|msg| (0, msg))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.mapper;
        match key {
            "seed" => m.seed = num(v)?,
            "covis_threshold" => m.selection.covis_threshold = num(v)?,
            "t_k" => m.selection.t_k = num(v)?,
            "n_local" => m.selection.n_local = num(v)?,
            "bank_size" => m.selection.bank_size = num(v)?,
            "t_local" => m.selection.t_local = num(v)?,
            "n_global" => m.selection.n_global = num(v)?,
            "sigma1" => m.selection.sigma1 = num(v)?,
            "sigma2" => m.selection.sigma2 = num(v)?,
            "iters_per_keyframe" => m.selection.iters_per_keyframe = num(v)?,
            "err_init" => m.selection.err_init = num(v)?,
            "mohv_levels" => m.mohv.levels = num(v)?,
            "mohv_s_init" => m.mohv.s_init = num(v)?,
            "mohv_n" => m.mohv.n = num(v)?,
            "eps" => m.densify.eps = num(v)?,
            "eps_e" => m.densify.eps_e = num(v)?,
            "k" => m.densify.k = num(v)?,
            "opacity_init" => m.densify.opacity_init = num(v)?,
            "grid_cells" => m.densify.grid_cells = num(v)?,
            "use_mohv" => m.densify.use_mohv = flag(v)?,
            "use_error_comp" => m.densify.use_error_comp = flag(v)?,
            "lr_position" => m.optim.lr_position = num(v)?,
            "scene_extent" => {
                if v == "auto" {
                    m.auto_scene_extent = true;
                } else {
                    m.auto_scene_extent = false;
                    m.optim.scene_extent = num(v)?;
                }
            }
            "lr_log_scale" => m.optim.lr_log_scale = num(v)?,
            "lr_rotation" => m.optim.lr_rotation = num(v)?,
            "lr_opacity" => m.optim.lr_opacity = num(v)?,
            "lr_color" => m.optim.lr_color = num(v)?,
            "lr_pose_rot" => m.optim.lr_pose_rot = num(v)?,
            "lr_pose_trans" => m.optim.lr_pose_trans = num(v)?,
            "adam_beta1" => m.optim.hyper.beta1 = num(v)?,
            "adam_beta2" => m.optim.hyper.beta2 = num(v)?,
            "adam_eps" => m.optim.hyper.eps = num(v)?,
            "refine_poses" => m.optim.refine_poses = flag(v)?,
            "prune_opacity" => m.optim.prune_opacity = num(v)?,
            "background" => m.optim.background = vec3(v)?,
            "post_refine" => self.post_refine = num(v)?,
            "heldout_every" => self.heldout_every = num(v)?,
            "depth_source" => {
                self.depth = match v {
                    "ground_truth" => DepthSource::GroundTruth,
                    "nearest_tracked" => DepthSource::NearestTracked,
                    _ => return Err(format!("unknown depth source {v:?}")),
                }
            }
            "nearest_radius_px" => self.nearest_radius_px = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Range checks that do not depend on a single key.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let m = &self.mapper;
        let s = &m.selection;
        let checks: [(bool, &str); 12] = [
            ((0.0..=1.0).contains(&s.covis_threshold), "covis_threshold must lie in [0, 1]"),
            (s.t_k >= 1, "t_k must be at least 1"),
            (s.t_local >= 1, "t_local must be at least 1"),
            (s.sigma1 > 0.0, "sigma1 must be positive"),
            (s.sigma2 >= 0.0, "sigma2 must be non-negative"),
            (s.err_init >= 0.0, "err_init must be non-negative"),
            (m.densify.eps >= 0.0, "eps must be non-negative"),
            (m.densify.opacity_init > 0.0 && m.densify.opacity_init < 1.0, "opacity_init must lie in (0, 1)"),
            (m.densify.grid_cells >= 1, "grid_cells must be at least 1"),
            (m.optim.scene_extent > 0.0, "scene_extent must be positive"),
            (self.nearest_radius_px > 0.0, "nearest_radius_px must be positive"),
            (m.optim.background.iter().all(|c| (0.0..=1.0).contains(c)), "background must lie in [0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(msg.to_string());
            }
        }
        m.mohv.validate().map_err(|e| e.to_string())
    }

    /// The effective value of every key in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.mapper;
        let s = &m.selection;
        let o = &m.optim;
        let d = &m.densify;
        let bg = o.background;
        let values = [
            m.seed.to_string(),
            s.covis_threshold.to_string(),
            s.t_k.to_string(),
            s.n_local.to_string(),
            s.bank_size.to_string(),
            s.t_local.to_string(),
            s.n_global.to_string(),
            s.sigma1.to_string(),
            s.sigma2.to_string(),
            s.iters_per_keyframe.to_string(),
            s.err_init.to_string(),
            m.mohv.levels.to_string(),
            m.mohv.s_init.to_string(),
            m.mohv.n.to_string(),
            d.eps.to_string(),
            d.eps_e.to_string(),
            d.k.to_string(),
            d.opacity_init.to_string(),
            d.grid_cells.to_string(),
            d.use_mohv.to_string(),
            d.use_error_comp.to_string(),
            o.lr_position.to_string(),
            if m.auto_scene_extent {
                "auto".to_string()
            } else {
                o.scene_extent.to_string()
            },
            o.lr_log_scale.to_string(),
            o.lr_rotation.to_string(),
            o.lr_opacity.to_string(),
            o.lr_color.to_string(),
            o.lr_pose_rot.to_string(),
            o.lr_pose_trans.to_string(),
            o.hyper.beta1.to_string(),
            o.hyper.beta2.to_string(),
            o.hyper.eps.to_string(),
            o.refine_poses.to_string(),
            o.prune_opacity.to_string(),
            format!("{},{},{}", bg.x, bg.y, bg.z),
            self.post_refine.to_string(),
            self.heldout_every.to_string(),
            self.depth.name().to_string(),
            self.nearest_radius_px.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Renders the configuration back to the file format.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// True when frame `position` (0-based, in manifest order) is withheld.
    pub fn is_heldout(&self, position: usize) -> bool {
        self.heldout_every > 0 && (position + 1) % self.heldout_every == 0
    }
}
