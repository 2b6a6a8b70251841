//! End-to-end driver: online mapping over a sequence, optional
//! post-refinement and evaluation of every frame.

use std::time::{Duration, Instant};

use splatmap::densify::{DepthProvider, NearestTrackedDepth};
use splatmap::mapper::StageTimes;
use splatmap::metrics::{mae, mean_ssim, psnr};
use splatmap::render::render;
use splatmap::{Image, Mapper};

use crate::config::{DepthSource, RunConfig};
use crate::error::{HarnessError, Result};
use crate::report::{FrameRow, RunReport, Split, TimingReport};
use crate::sequence::Sequence;

/// A mapper after the online pass, with the bookkeeping the report needs.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub mapper: Mapper,
    /// Map size after each manifest position.
    pub map_sizes: Vec<usize>,
    pub keyframe_flags: Vec<bool>,
    pub times: StageTimes,
    pub wall: Duration,
    pub post_refine_steps: usize,
}

/// The result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run: Run,
    pub report: RunReport,
    /// Final renders, one per manifest position.
    pub renders: Vec<Image>,
    pub timing: TimingReport,
}

/// Processes every non-held-out frame in manifest order.
pub fn run_online(seq: &Sequence, cfg: &RunConfig) -> Result<Run> {
    cfg.validate().map_err(HarnessError::Config)?;
    let started = Instant::now();
    let mut mapper = Mapper::new(cfg.mapper)?;
    let nearest = NearestTrackedDepth {
        radius_px: cfg.nearest_radius_px,
    };
    let depth: &dyn DepthProvider = match cfg.depth {
        DepthSource::GroundTruth => &seq.depth,
        DepthSource::NearestTracked => &nearest,
    };
    let mut times = StageTimes::default();
    let mut map_sizes = Vec::with_capacity(seq.frames.len());
    let mut keyframe_flags = Vec::with_capacity(seq.frames.len());
    for (pos, frame) in seq.frames.iter().enumerate() {
        if cfg.is_heldout(pos) {
            keyframe_flags.push(false);
        } else {
            let out = mapper
                .process_frame(frame, depth)
                .map_err(|source| HarnessError::Frame {
                    frame: frame.index,
                    source,
                })?;
            times += out.times;
            keyframe_flags.push(out.keyframe);
        }
        map_sizes.push(mapper.map().len());
    }
    Ok(Run {
        config: *cfg,
        mapper,
        map_sizes,
        keyframe_flags,
        times,
        wall: started.elapsed(),
        post_refine_steps: 0,
    })
}

impl Run {
    pub fn post_refine(&mut self, steps: usize) -> Result<()> {
        let t = Instant::now();
        self.mapper.post_refine(steps)?;
        let spent = t.elapsed();
        self.times.optimization += spent;
        self.wall += spent;
        self.post_refine_steps += steps;
        Ok(())
    }

    /// Renders every frame with the current map: keyframes at their refined
    /// pose, everything else at the tracker pose.
    pub fn render_all(&self, seq: &Sequence) -> Vec<Image> {
        let bg = self.config.mapper.optim.background;
        let store = self.mapper.keyframes();
        seq.frames
            .iter()
            .map(|f| {
                let pose = store.ordinal_of(f.index).map_or(f.pose, |o| store.get(o).pose);
                render(self.mapper.map(), &pose, &f.intrinsics, &bg).image
            })
            .collect()
    }

    pub fn evaluate(&self, seq: &Sequence) -> Result<(RunReport, Vec<Image>)> {
        let renders = self.render_all(seq);
        let mut rows = Vec::with_capacity(seq.frames.len());
        for (pos, (f, img)) in seq.frames.iter().zip(&renders).enumerate() {
            rows.push(FrameRow {
                index: f.index,
                split: if self.config.is_heldout(pos) {
                    Split::Heldout
                } else {
                    Split::Train
                },
                keyframe: self.keyframe_flags[pos],
                psnr: psnr(img, &f.image)?,
                ssim: mean_ssim(img, &f.image)?,
                mae: mae(img, &f.image)?,
                gaussians: self.map_sizes[pos],
            });
        }
        let config = self
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut report = RunReport::new(config, rows);
        report.keyframes = self.mapper.keyframes().len();
        report.final_gaussians = self.mapper.map().len();
        report.post_refine_steps = self.post_refine_steps;
        report.optimizer_steps = self.mapper.optimizer_steps();
        Ok((report, renders))
    }
}

/// Online pass, `cfg.post_refine` refinement steps and evaluation.
pub fn run_pipeline(seq: &Sequence, cfg: &RunConfig) -> Result<RunOutput> {
    let mut run = run_online(seq, cfg)?;
    run.post_refine(cfg.post_refine)?;
    let t = Instant::now();
    let (report, renders) = run.evaluate(seq)?;
    let spent = t.elapsed();
    run.times.other += spent;
    run.wall += spent;
    let timing = TimingReport::new(&run.times, run.wall);
    Ok(RunOutput {
        run,
        report,
        renders,
        timing,
    })
}
