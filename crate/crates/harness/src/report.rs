//! Run reports: per-frame metrics, aggregates and the configuration echo.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use splatmap::mapper::StageTimes;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub index: usize,
    pub split: Split,
    pub keyframe: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    /// Map size right after this frame was processed (or skipped).
    pub gaussians: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl Aggregate {
    /// Means over `rows`, summed in order.
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a FrameRow>) -> Self {
        let mut a = Aggregate::default();
        for r in rows {
            a.frames += 1;
            a.psnr += r.psnr;
            a.ssim += r.ssim;
            a.mae += r.mae;
        }
        if a.frames > 0 {
            let n = a.frames as f64;
            a.psnr /= n;
            a.ssim /= n;
            a.mae /= n;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Every configuration key with its effective value.
    pub config: Vec<(String, String)>,
    pub frames: Vec<FrameRow>,
    pub train: Aggregate,
    pub heldout: Aggregate,
    pub keyframes: usize,
    pub final_gaussians: usize,
    pub post_refine_steps: usize,
    pub optimizer_steps: u64,
}

impl RunReport {
    pub fn new(config: Vec<(String, String)>, frames: Vec<FrameRow>) -> Self {
        let train = Aggregate::of(frames.iter().filter(|r| r.split == Split::Train));
        let heldout = Aggregate::of(frames.iter().filter(|r| r.split == Split::Heldout));
        Self {
            config,
            frames,
            train,
            heldout,
            keyframes: 0,
            final_gaussians: 0,
            post_refine_steps: 0,
            optimizer_steps: 0,
        }
    }

    /// Mean PSNR over the rows selected by `keep`.
    pub fn mean_psnr(&self, keep: impl Fn(&FrameRow) -> bool) -> f64 {
        Aggregate::of(self.frames.iter().filter(|r| keep(r))).psnr
    }

    /// Checks that the stored aggregates equal a recomputation from the rows.
    pub fn verify(&self) -> std::result::Result<(), String> {
        let train = Aggregate::of(self.frames.iter().filter(|r| r.split == Split::Train));
        let heldout = Aggregate::of(self.frames.iter().filter(|r| r.split == Split::Heldout));
        if train != self.train {
            return Err(format!("train aggregate {:?} != recomputed {train:?}", self.train));
        }
        if heldout != self.heldout {
            return Err(format!("heldout aggregate {:?} != recomputed {heldout:?}", self.heldout));
        }
        let kf = self.frames.iter().filter(|r| r.keyframe).count();
        if kf != self.keyframes {
            return Err(format!("{} keyframes listed, rows mark {kf}", self.keyframes));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,split,keyframe,psnr,ssim,mae,gaussians\n");
        for r in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index,
                r.split.as_str(),
                r.keyframe,
                r.psnr,
                r.ssim,
                r.mae,
                r.gaussians
            );
        }
        out
    }
}

/// Parses the per-frame rows of a CSV written by [`RunReport::to_csv`].
/// Errors carry the 1-based line number.
pub fn parse_csv_rows(text: &str) -> std::result::Result<Vec<FrameRow>, (usize, String)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "index,split,keyframe,psnr,ssim,mae,gaussians" => {}
        _ => return Err((1, "expected header `index,split,keyframe,psnr,ssim,mae,gaussians`".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| (n + 1, msg);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", i + 1)));
        rows.push(FrameRow {
            index: f[0].parse().map_err(|e| bad(format!("index: {e}")))?,
            split: match f[1] {
                "train" => Split::Train,
                "heldout" => Split::Heldout,
                other => return Err(bad(format!("unknown split `{other}`"))),
            },
            keyframe: f[2].parse().map_err(|e| bad(format!("keyframe: {e}")))?,
            psnr: num(3)?,
            ssim: num(4)?,
            mae: num(5)?,
            gaussians: f[6].parse().map_err(|e| bad(format!("gaussians: {e}")))?,
        });
    }
    Ok(rows)
}

pub fn write_report_json(report: &RunReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| HarnessError::write(path, e))
}

pub fn write_report_csv(report: &RunReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv()).map_err(|e| HarnessError::write(path, e))
}

/// Wall time per stage, in seconds. Kept out of [`RunReport`] so that
/// reports of identical runs stay byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingReport {
    pub optimization: f64,
    pub view_selection: f64,
    pub depth_lookup: f64,
    pub mohv: f64,
    pub other: f64,
    pub wall: f64,
}

impl TimingReport {
    pub fn new(stages: &StageTimes, wall: Duration) -> Self {
        Self {
            optimization: stages.optimization.as_secs_f64(),
            view_selection: stages.view_selection.as_secs_f64(),
            depth_lookup: stages.depth_lookup.as_secs_f64(),
            mohv: stages.mohv.as_secs_f64(),
            other: stages.other.as_secs_f64(),
            wall: wall.as_secs_f64(),
        }
    }

    pub fn stage_sum(&self) -> f64 {
        self.optimization + self.view_selection + self.depth_lookup + self.mohv + self.other
    }
}

pub fn write_timing(t: &TimingReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(t).expect("timing serializes");
    std::fs::write(path, text).map_err(|e| HarnessError::write(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(index: usize, split: Split, psnr: f64) -> FrameRow {
        FrameRow {
            index,
            split,
            keyframe: index == 0,
            psnr,
            ssim: 0.9,
            mae: 0.01,
            gaussians: 10 * index,
        }
    }

    #[test]
    fn aggregates_recompute_exactly() {
        let rows = vec![
            row(0, Split::Train, 30.1),
            row(1, Split::Train, 28.7),
            row(2, Split::Heldout, 25.0),
        ];
        let mut r = RunReport::new(vec![("seed".into(), "0".into())], rows);
        r.keyframes = 1;
        assert_eq!(r.train.frames, 2);
        assert_eq!(r.train.psnr, (30.1 + 28.7) / 2.0);
        assert_eq!(r.heldout.psnr, 25.0);
        r.verify().unwrap();
        let back = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        back.verify().unwrap();
        r.train.psnr += 1e-9;
        assert!(r.verify().is_err());
    }

    #[test]
    fn csv_has_a_header_and_one_row_per_frame() {
        let r = RunReport::new(Vec::new(), vec![row(0, Split::Train, 31.5), row(7, Split::Heldout, 24.25)]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "index,split,keyframe,psnr,ssim,mae,gaussians");
        assert_eq!(lines[2], "7,heldout,false,24.25,0.9,0.01,70");
        assert_eq!(parse_csv_rows(&csv).unwrap(), r.frames);
        let broken = csv.replace("heldout", "test");
        assert_eq!(parse_csv_rows(&broken).unwrap_err().0, 3);
    }
}
