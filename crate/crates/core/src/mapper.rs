//! Per-frame mapping driver.
//!
//! For each incoming frame the mapper decides whether it becomes a keyframe.
//! Keyframes are rendered, seeded from tracked points and badly
//! reconstructed pixels, densified through the occupancy structure and then
//! optimized together with local and global views. Every frame is offered to
//! the local bank afterwards.

use std::cell::Cell;
use std::ops::AddAssign;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{
    self, map_update_step, maybe_add_keyframe, post_refine, KeyframeStore, LocalBank, OptimConfig, Optimizer,
    SelectionConfig, StepReport,
};
use crate::densify::{densify, error_compensation, seed_from_features, DensifyConfig, DepthProvider};
use crate::error::Result;
use crate::frame::FrameInput;
use crate::gaussian::GaussianMap;
use crate::image::Image;
use crate::mohv::{Mohv, MohvConfig};
use crate::render::render;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperConfig {
    pub selection: SelectionConfig,
    pub optim: OptimConfig,
    pub densify: DensifyConfig,
    pub mohv: MohvConfig,
    /// Derive the position learning-rate scale from the first frame's median
    /// tracked depth instead of `optim.scene_extent`.
    pub auto_scene_extent: bool,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            optim: OptimConfig::default(),
            densify: DensifyConfig::default(),
            mohv: MohvConfig::default(),
            auto_scene_extent: true,
            seed: 0,
        }
    }
}

/// Wall time per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub optimization: Duration,
    pub view_selection: Duration,
    pub depth_lookup: Duration,
    pub mohv: Duration,
    pub other: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.optimization + self.view_selection + self.depth_lookup + self.mohv + self.other
    }
}

impl AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.optimization += o.optimization;
        self.view_selection += o.view_selection;
        self.depth_lookup += o.depth_lookup;
        self.mohv += o.mohv;
        self.other += o.other;
    }
}

/// What happened to one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameOutcome {
    pub index: usize,
    pub keyframe: bool,
    pub candidates: usize,
    pub inserted: usize,
    pub step: StepReport,
    pub map_size: usize,
    pub times: StageTimes,
}

/// Wraps a depth provider and accumulates the time spent in it.
struct TimedDepth<'a> {
    inner: &'a dyn DepthProvider,
    spent: Cell<Duration>,
}

impl DepthProvider for TimedDepth<'_> {
    fn depth_at(&self, frame: &FrameInput, x: usize, y: usize) -> Option<f64> {
        let t = Instant::now();
        let d = self.inner.depth_at(frame, x, y);
        self.spent.set(self.spent.get() + t.elapsed());
        d
    }
}

#[derive(Debug, Clone)]
pub struct Mapper {
    config: MapperConfig,
    map: GaussianMap,
    mohv: Option<Mohv>,
    store: KeyframeStore,
    bank: LocalBank,
    opt: Optimizer,
    rng: ChaCha8Rng,
    extent_set: bool,
}

impl Mapper {
    pub fn new(config: MapperConfig) -> Result<Self> {
        let mohv = if config.densify.use_mohv {
            Some(Mohv::new(config.mohv)?)
        } else {
            config.mohv.validate()?;
            None
        };
        Ok(Self {
            map: GaussianMap::new(),
            mohv,
            store: KeyframeStore::new(),
            bank: LocalBank::from_config(&config.selection),
            opt: Optimizer::new(config.optim),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extent_set: !config.auto_scene_extent,
            config,
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn keyframes(&self) -> &KeyframeStore {
        &self.store
    }

    pub fn mohv(&self) -> Option<&Mohv> {
        self.mohv.as_ref()
    }

    /// Position learning-rate scale currently in use.
    pub fn scene_extent(&self) -> f64 {
        self.opt.config.scene_extent
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps
    }

    pub fn process_frame(&mut self, frame: &FrameInput, depth: &dyn DepthProvider) -> Result<FrameOutcome> {
        let started = Instant::now();
        frame.validate()?;
        let mut out = FrameOutcome {
            index: frame.index,
            ..FrameOutcome::default()
        };
        if !self.extent_set && !frame.tracked_points.is_empty() {
            let mut depths: Vec<f64> = frame.tracked_points.iter().map(|tp| tp.depth).collect();
            depths.sort_by(f64::total_cmp);
            self.opt.config.scene_extent = depths[(depths.len() - 1) / 2];
            self.extent_set = true;
        }

        let select = Instant::now();
        out.keyframe = maybe_add_keyframe(&mut self.store, frame, &self.config.selection);
        out.times.view_selection += select.elapsed();

        if out.keyframe {
            let current = self.store.len() - 1;
            let dc = self.config.densify;
            let mut candidates = seed_from_features(frame);
            if dc.use_error_comp {
                let rendered = render(&self.map, &frame.pose, &frame.intrinsics, &self.opt.config.background).image;
                let timed = TimedDepth {
                    inner: depth,
                    spent: Cell::new(Duration::ZERO),
                };
                candidates.extend(error_compensation(frame, &rendered, dc.k, dc.eps_e, dc.grid_cells, &timed)?);
                out.times.depth_lookup += timed.spent.get();
            }
            out.candidates = candidates.len();

            let t = Instant::now();
            out.inserted = densify(&mut self.map, self.mohv.as_mut(), frame, &candidates, &dc)?;
            out.times.mohv += t.elapsed();

            let t = Instant::now();
            out.step = map_update_step(
                &mut self.map,
                &mut self.store,
                &self.bank,
                current,
                &self.config.selection,
                &mut self.opt,
                &mut self.rng,
            )?;
            let spent = t.elapsed();
            out.times.view_selection += out.step.selection_time;
            out.times.optimization += spent.saturating_sub(out.step.selection_time);
        }

        self.bank.offer(frame);
        out.map_size = self.map.len();
        out.times.other = started.elapsed().saturating_sub(out.times.total());
        Ok(out)
    }

    /// Runs `steps` post-refinement iterations over all keyframes.
    pub fn post_refine(&mut self, steps: usize) -> Result<StepReport> {
        post_refine(
            &mut self.map,
            &mut self.store,
            steps,
            &self.config.selection,
            &mut self.opt,
            &mut self.rng,
        )
    }

    /// Renders keyframe `ordinal` at its refined pose.
    pub fn render_keyframe(&self, ordinal: usize) -> Image {
        consistency::render_keyframe(&self.map, &self.store, ordinal, &self.opt.config.background)
    }
}
