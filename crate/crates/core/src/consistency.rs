//! Global consistency optimization: keyframe admission, view selection and
//! the joint refinement of Gaussians and keyframe poses.
//!
//! Every optimization iteration renders the current keyframe plus
//!
//! * **local views**: the `n_local` frames of a small FIFO bank of recent
//!   frames that overlap the current view the most, and
//! * **global views**: `n_global` historical keyframes drawn without
//!   replacement with probability
//!   `∝ exp(σ1·(j - i)) · exp(σ2·err(j))`, where `j - i ≤ 0` is the keyframe
//!   distance to the current keyframe and `err(j)` the mean absolute error of
//!   keyframe `j`'s latest render. Recent and badly reconstructed keyframes
//!   are favored.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{Vector3, Vector6};
use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::FrameInput;
use crate::gaussian::{layout, GaussianMap, PARAMS_PER_GAUSSIAN};
use crate::geometry::{project_point, se3_exp, Pose};
use crate::image::Image;
use crate::metrics::{mae, photometric_loss};
use crate::optim::{AdamHyper, AdamSlot};
use crate::render::{render, render_backward, MapGradients};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// Below this covisibility with the last keyframe a frame becomes a keyframe.
    pub covis_threshold: f64,
    /// A keyframe is forced after this many frames.
    pub t_k: usize,
    /// Local views used per iteration besides the current one.
    pub n_local: usize,
    /// Capacity of the local bank.
    pub bank_size: usize,
    /// Every `t_local`-th frame enters the local bank.
    pub t_local: usize,
    /// Global views sampled per iteration.
    pub n_global: usize,
    /// Recency weight per keyframe index.
    pub sigma1: f64,
    /// Error weight per unit of mean absolute error.
    pub sigma2: f64,
    pub iters_per_keyframe: usize,
    /// Error assigned to a keyframe before its first optimization.
    pub err_init: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            covis_threshold: 0.85,
            t_k: 15,
            n_local: 1,
            bank_size: 5,
            t_local: 3,
            n_global: 2,
            sigma1: 0.05,
            sigma2: 10.0,
            iters_per_keyframe: 60,
            err_init: 1.0,
        }
    }
}

/// Learning rates and switches of the joint optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    /// Position learning rate per meter of scene extent.
    pub lr_position: f64,
    pub scene_extent: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_pose_rot: f64,
    pub lr_pose_trans: f64,
    pub hyper: AdamHyper,
    /// Whether keyframe poses are refined.
    pub refine_poses: bool,
    /// Gaussians whose opacity falls below this after a keyframe step are removed.
    pub prune_opacity: f64,
    pub background: Vector3<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_position: 1.6e-4,
            scene_extent: 1.0,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_pose_rot: 1e-4,
            lr_pose_trans: 1e-3,
            hyper: AdamHyper::default(),
            refine_poses: true,
            prune_opacity: 0.005,
            background: Vector3::zeros(),
        }
    }
}

impl OptimConfig {
    fn gaussian_lrs(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut lr = [0.0; PARAMS_PER_GAUSSIAN];
        lr[layout::POSITION].fill(self.lr_position * self.scene_extent);
        lr[layout::LOG_SCALE].fill(self.lr_log_scale);
        lr[layout::ROTATION].fill(self.lr_rotation);
        lr[layout::OPACITY] = self.lr_opacity;
        lr[layout::COLOR].fill(self.lr_color);
        lr
    }

    fn pose_lrs(&self) -> [f64; 6] {
        let (r, t) = (self.lr_pose_rot, self.lr_pose_trans);
        [r, r, r, t, t, t]
    }
}

/// A frame admitted for persistent optimization.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame: FrameInput,
    /// Refined camera-from-world pose; starts at the tracker pose.
    pub pose: Pose,
    /// Mean absolute error of this keyframe's latest render.
    pub err: f64,
    /// Optimizer step counter at the last iteration this keyframe took part in.
    pub last_optimized: u64,
    pub pose_moments: AdamSlot<6>,
}

impl Keyframe {
    pub fn new(frame: FrameInput, err_init: f64) -> Self {
        Self {
            pose: frame.pose,
            frame,
            err: err_init,
            last_optimized: 0,
            pose_moments: AdamSlot::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
}

impl KeyframeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn get(&self, ordinal: usize) -> &Keyframe {
        &self.keyframes[ordinal]
    }

    pub fn get_mut(&mut self, ordinal: usize) -> &mut Keyframe {
        &mut self.keyframes[ordinal]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    /// Ordinal of the keyframe built from frame `frame_index`.
    pub fn ordinal_of(&self, frame_index: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.frame.index == frame_index)
    }

    pub fn push(&mut self, kf: Keyframe) {
        self.keyframes.push(kf);
    }
}

/// FIFO of recent frames from which local views are chosen.
#[derive(Debug, Clone)]
pub struct LocalBank {
    capacity: usize,
    every: usize,
    offered: usize,
    frames: VecDeque<FrameInput>,
}

impl LocalBank {
    pub fn new(capacity: usize, every: usize) -> Self {
        Self {
            capacity,
            every: every.max(1),
            offered: 0,
            frames: VecDeque::new(),
        }
    }

    pub fn from_config(cfg: &SelectionConfig) -> Self {
        Self::new(cfg.bank_size, cfg.t_local)
    }

    /// Counts `frame` and admits it if it is the `t_local`-th since the last
    /// admission; the oldest entry is evicted when over capacity.
    pub fn offer(&mut self, frame: &FrameInput) -> bool {
        let admit = self.offered % self.every == 0;
        self.offered += 1;
        if admit && self.capacity > 0 {
            self.frames.push_back(frame.clone());
            while self.frames.len() > self.capacity {
                self.frames.pop_front();
            }
        }
        admit && self.capacity > 0
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Oldest first.
    pub fn frames(&self) -> impl DoubleEndedIterator<Item = &FrameInput> + ExactSizeIterator {
        self.frames.iter()
    }
}

/// Fraction of `a`'s tracked points that land inside `b`'s image in front of
/// its camera.
pub fn covisibility(a: &FrameInput, b: &FrameInput) -> Result<f64> {
    if a.tracked_points.is_empty() {
        return Err(Error::NoTrackedPoints);
    }
    let inside = a
        .tracked_points
        .iter()
        .filter(|tp| match project_point(&b.pose, &b.intrinsics, &tp.world) {
            Ok((px, _)) => b.intrinsics.contains(&px),
            Err(_) => false,
        })
        .count();
    Ok(inside as f64 / a.tracked_points.len() as f64)
}

/// Decides whether `frame` becomes a keyframe and, if so, appends it.
pub fn maybe_add_keyframe(store: &mut KeyframeStore, frame: &FrameInput, cfg: &SelectionConfig) -> bool {
    let admit = match store.last() {
        None => true,
        Some(last) => {
            let elapsed = frame.index.saturating_sub(last.frame.index);
            // Frames without tracked points cannot be compared; treat them as
            // having lost overlap.
            let covis = covisibility(frame, &last.frame).unwrap_or(0.0);
            covis < cfg.covis_threshold || elapsed >= cfg.t_k
        }
    };
    if admit {
        store.push(Keyframe::new(frame.clone(), cfg.err_init));
    }
    admit
}

/// The `n_local` bank frames overlapping `current` the most (newer first on
/// ties), skipping `current` itself.
pub fn select_local_views<'a>(bank: &'a LocalBank, current: &FrameInput, n_local: usize) -> Vec<&'a FrameInput> {
    let mut scored: Vec<(f64, usize, &FrameInput)> = bank
        .frames()
        .enumerate()
        .filter(|(_, f)| f.index != current.index)
        .map(|(age, f)| (covisibility(current, f).unwrap_or(0.0), age, f))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    scored.into_iter().take(n_local).map(|(_, _, f)| f).collect()
}

/// Normalized sampling probabilities for entries `(j, err_j)` relative to
/// the current keyframe index `i`.
pub fn sampling_probs(entries: &[(f64, f64)], i: f64, sigma1: f64, sigma2: f64) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Err(Error::EmptyKeyframeSet);
    }
    let logw: Vec<f64> = entries.iter().map(|&(j, err)| sigma1 * (j - i) + sigma2 * err).collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Probabilities over every keyframe of `store` for current keyframe `i`.
pub fn global_sampling_probs(store: &KeyframeStore, i: usize, sigma1: f64, sigma2: f64) -> Result<Vec<f64>> {
    let entries: Vec<(f64, f64)> = store.iter().enumerate().map(|(j, k)| (j as f64, k.err)).collect();
    sampling_probs(&entries, i as f64, sigma1, sigma2)
}

/// Draws up to `n_global` keyframe ordinals without replacement, never
/// returning `current` or anything in `exclude`.
pub fn sample_global_views<R: Rng + ?Sized>(
    store: &KeyframeStore,
    current: usize,
    exclude: &[usize],
    n_global: usize,
    sigma1: f64,
    sigma2: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..store.len())
        .filter(|&j| j != current && !exclude.contains(&j))
        .collect();
    let mut picked = Vec::new();
    while picked.len() < n_global && !pool.is_empty() {
        let entries: Vec<(f64, f64)> = pool.iter().map(|&j| (j as f64, store.get(j).err)).collect();
        let probs = sampling_probs(&entries, current as f64, sigma1, sigma2).expect("pool is non-empty");
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = pool.len() - 1;
        for (slot, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                choice = slot;
                break;
            }
        }
        picked.push(pool.remove(choice));
    }
    picked
}

/// Outcome of one call to [`map_update_step`] or [`post_refine`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Frame indices rendered at each iteration, current view first.
    pub views: Vec<Vec<usize>>,
    /// Mean photometric loss over the views of each iteration.
    pub losses: Vec<f64>,
    /// `(frame index, err)` for every keyframe whose error was refreshed,
    /// in order of the last refresh.
    pub err_updates: Vec<(usize, f64)>,
    pub pruned: usize,
    /// Wall time spent choosing local and global views.
    pub selection_time: Duration,
}

/// Where a rendered view comes from.
#[derive(Clone, Copy)]
enum ViewSource<'a> {
    /// A keyframe, rendered at its refined pose.
    Keyframe { ordinal: usize, refine: bool },
    /// A bank frame that never became a keyframe, rendered at its tracker pose.
    Frame(&'a FrameInput),
}

/// Gradients and errors gathered from one iteration's renders.
struct Evaluation {
    grads: MapGradients,
    loss: f64,
    pose_grads: Vec<(usize, Vector6<f64>)>,
    errs: Vec<(usize, f64)>,
    frames: Vec<usize>,
}

/// Global optimizer step counter plus the shared configuration.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, steps: 0 }
    }
}

fn evaluate(map: &GaussianMap, store: &KeyframeStore, views: &[ViewSource<'_>], bg: &Vector3<f64>) -> Result<Evaluation> {
    let weight = 1.0 / views.len() as f64;
    let mut eval = Evaluation {
        grads: MapGradients::zeros(map.len()),
        loss: 0.0,
        pose_grads: Vec::new(),
        errs: Vec::new(),
        frames: Vec::with_capacity(views.len()),
    };
    for v in views {
        let (frame, pose, ordinal, refine) = match *v {
            ViewSource::Keyframe { ordinal, refine } => {
                let kf = store.get(ordinal);
                (&kf.frame, kf.pose, Some(ordinal), refine)
            }
            ViewSource::Frame(f) => (f, f.pose, None, false),
        };
        let k = &frame.intrinsics;
        let fwd = render(map, &pose, k, bg);
        let (loss, grad_img) = photometric_loss(&fwd.image, &frame.image)?;
        eval.loss += loss * weight;
        let grads = render_backward(map, &pose, k, bg, &fwd, &grad_img);
        eval.grads.accumulate(&grads, weight);
        if let Some(ord) = ordinal {
            if refine {
                eval.pose_grads.push((ord, grads.pose * weight));
            }
            eval.errs.push((ord, mae(&fwd.image, &frame.image)?));
        }
        eval.frames.push(frame.index);
    }
    Ok(eval)
}

/// Renders every view, averages loss gradients over views and applies one
/// optimizer update to the map and to the refinable poses.
fn optimize_iteration(
    map: &mut GaussianMap,
    store: &mut KeyframeStore,
    views: &[ViewSource<'_>],
    opt: &mut Optimizer,
    report: &mut StepReport,
) -> Result<()> {
    let eval = evaluate(map, store, views, &opt.config.background)?;
    if !eval.grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    opt.steps += 1;
    apply_gaussian_update(map, &eval.grads, &opt.config);
    if opt.config.refine_poses {
        for (ord, g) in eval.pose_grads {
            refine_pose(store.get_mut(ord), &g, &opt.config);
        }
    }
    for (ord, err) in eval.errs {
        let kf = store.get_mut(ord);
        kf.err = err;
        kf.last_optimized = opt.steps;
        report.err_updates.push((kf.frame.index, err));
    }
    report.losses.push(eval.loss);
    report.views.push(eval.frames);
    Ok(())
}

/// One Adam step on every Gaussian visible in at least one view.
pub fn apply_gaussian_update(map: &mut GaussianMap, grads: &MapGradients, cfg: &OptimConfig) {
    let lr = cfg.gaussian_lrs();
    let (gaussians, moments) = map.parts_mut();
    for ((g, slot), (grad, &visible)) in gaussians
        .iter_mut()
        .zip(moments.iter_mut())
        .zip(grads.gaussians.iter().zip(&grads.visible))
    {
        if !visible {
            continue;
        }
        let delta = slot.step(&grad.as_array(), &lr, &cfg.hyper);
        let mut p = g.params();
        for (v, d) in p.iter_mut().zip(delta) {
            *v -= d;
        }
        g.set_params(&p);
        let n = g.rotation.norm();
        if n > 0.0 {
            g.rotation /= n;
        }
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    }
}

/// Adam step on a keyframe's pose twist, applied as a left update
/// `exp(-Δ) ∘ pose`.
pub fn refine_pose(kf: &mut Keyframe, twist_grad: &Vector6<f64>, cfg: &OptimConfig) {
    let g: [f64; 6] = (*twist_grad).into();
    let delta = kf.pose_moments.step(&g, &cfg.pose_lrs(), &cfg.hyper);
    if delta.iter().all(|&d| d == 0.0) {
        return;
    }
    let step = se3_exp(&-Vector6::from(delta));
    kf.pose = step.compose(&kf.pose);
    kf.pose.renormalize();
}

/// Optimizes the map for keyframe `current` (an ordinal in `store`) over
/// `iters_per_keyframe` iterations of current + local + global views.
///
/// The current keyframe's own pose is held fixed; older keyframes reached
/// through local or global views are refined when enabled.
pub fn map_update_step<R: Rng + ?Sized>(
    map: &mut GaussianMap,
    store: &mut KeyframeStore,
    bank: &LocalBank,
    current: usize,
    cfg: &SelectionConfig,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    if store.is_empty() {
        return Err(Error::NoKeyframes);
    }
    let mut report = StepReport::default();
    let started = Instant::now();
    let locals: Vec<ViewSource<'_>> = select_local_views(bank, &store.get(current).frame, cfg.n_local)
        .into_iter()
        .map(|f| match store.ordinal_of(f.index) {
            Some(ordinal) => ViewSource::Keyframe { ordinal, refine: true },
            None => ViewSource::Frame(f),
        })
        .collect();
    let local_ordinals: Vec<usize> = locals
        .iter()
        .filter_map(|v| match v {
            ViewSource::Keyframe { ordinal, .. } => Some(*ordinal),
            ViewSource::Frame(_) => None,
        })
        .collect();
    report.selection_time += started.elapsed();

    for _ in 0..cfg.iters_per_keyframe {
        let started = Instant::now();
        let globals = sample_global_views(store, current, &local_ordinals, cfg.n_global, cfg.sigma1, cfg.sigma2, rng);
        report.selection_time += started.elapsed();
        let mut views = Vec::with_capacity(1 + locals.len() + globals.len());
        views.push(ViewSource::Keyframe {
            ordinal: current,
            refine: false,
        });
        views.extend_from_slice(&locals);
        views.extend(globals.into_iter().map(|ordinal| ViewSource::Keyframe { ordinal, refine: true }));
        optimize_iteration(map, store, &views, opt, &mut report)?;
    }
    report.pruned = prune_transparent(map, &opt.config);
    Ok(report)
}

/// Removes Gaussians whose opacity fell below the pruning threshold.
pub fn prune_transparent(map: &mut GaussianMap, cfg: &OptimConfig) -> usize {
    let t = cfg.prune_opacity;
    map.prune(|g| g.opacity() < t)
}

/// Additional optimization after the sequence: each step renders
/// `1 + n_local + n_global` keyframes drawn uniformly without replacement;
/// every sampled pose is refinable.
pub fn post_refine<R: Rng + ?Sized>(
    map: &mut GaussianMap,
    store: &mut KeyframeStore,
    steps: usize,
    cfg: &SelectionConfig,
    opt: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    let mut report = StepReport::default();
    if steps == 0 {
        return Ok(report);
    }
    if store.is_empty() {
        return Err(Error::NoKeyframes);
    }
    let per_step = (1 + cfg.n_local + cfg.n_global).min(store.len());
    for _ in 0..steps {
        let chosen = rand::seq::index::sample(rng, store.len(), per_step);
        let views: Vec<ViewSource<'_>> = chosen
            .iter()
            .map(|ordinal| ViewSource::Keyframe { ordinal, refine: true })
            .collect();
        optimize_iteration(map, store, &views, opt, &mut report)?;
    }
    report.pruned = prune_transparent(map, &opt.config);
    Ok(report)
}

/// Renders keyframe `ordinal` at its refined pose.
pub fn render_keyframe(map: &GaussianMap, store: &KeyframeStore, ordinal: usize, background: &Vector3<f64>) -> Image {
    let kf = store.get(ordinal);
    render(map, &kf.pose, &kf.frame.intrinsics, background).image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::TrackedPoint;
    use crate::gaussian::Gaussian;
    use crate::geometry::{backproject, Intrinsics};
    use nalgebra::{UnitQuaternion, Vector2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const W: usize = 32;

    fn k() -> Intrinsics {
        Intrinsics::new(30.0, 30.0, 16.0, 16.0, W, W).unwrap()
    }

    /// Frame at `pose` whose tracked points are a grid of pixels lifted to
    /// depth 2.
    fn frame(index: usize, pose: Pose) -> FrameInput {
        let k = k();
        let tracked_points = (0..16)
            .map(|i| {
                let pixel = Vector2::new(4.0 + 8.0 * (i % 4) as f64, 4.0 + 8.0 * (i / 4) as f64);
                TrackedPoint {
                    world: backproject(&pose, &k, &pixel, 2.0),
                    pixel,
                    depth: 2.0,
                }
            })
            .collect();
        FrameInput {
            index,
            pose,
            intrinsics: k,
            image: Image::filled(W, W, [0.5, 0.4, 0.3]),
            tracked_points,
        }
    }

    fn turned(deg: f64) -> Pose {
        Pose::new(UnitQuaternion::from_euler_angles(0.0, deg.to_radians(), 0.0), Vector3::zeros())
    }

    #[test]
    fn covisibility_examples() {
        let a = frame(0, Pose::identity());
        assert_eq!(covisibility(&a, &a).unwrap(), 1.0);
        let away = frame(1, turned(180.0));
        assert_eq!(covisibility(&a, &away).unwrap(), 0.0);
        // Shift the camera so exactly the two right-hand columns stay in view.
        let shift = frame(2, Pose::new(UnitQuaternion::identity(), Vector3::new(-1.0667, 0.0, 0.0)));
        let inside = a
            .tracked_points
            .iter()
            .filter(|tp| {
                let p = shift.pose.transform_point(&tp.world);
                let u = 30.0 * p.x / p.z + 16.0;
                p.z > 0.0 && (0.0..W as f64).contains(&u)
            })
            .count();
        assert_eq!(inside, 8);
        assert_eq!(covisibility(&a, &shift).unwrap(), 0.5);
        let mut bare = a.clone();
        bare.tracked_points.clear();
        assert_eq!(covisibility(&bare, &a), Err(Error::NoTrackedPoints));
    }

    #[test]
    fn keyframe_admission() {
        let cfg = SelectionConfig::default();
        let mut store = KeyframeStore::new();
        assert!(maybe_add_keyframe(&mut store, &frame(0, Pose::identity()), &cfg));
        assert_eq!(store.get(0).err, cfg.err_init);
        assert!(!maybe_add_keyframe(&mut store, &frame(3, Pose::identity()), &cfg));
        assert!(maybe_add_keyframe(&mut store, &frame(cfg.t_k, Pose::identity()), &cfg));
        assert!(maybe_add_keyframe(&mut store, &frame(cfg.t_k + 1, turned(90.0)), &cfg));
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn bank_is_a_bounded_fifo() {
        let mut bank = LocalBank::new(2, 3);
        let admitted: Vec<bool> = (0..10).map(|i| bank.offer(&frame(i, Pose::identity()))).collect();
        assert_eq!(admitted.iter().filter(|&&a| a).count(), 4);
        assert!(admitted[0] && admitted[3] && admitted[6] && admitted[9]);
        let held: Vec<usize> = bank.frames().map(|f| f.index).collect();
        assert_eq!(held, vec![6, 9]);
    }

    #[test]
    fn local_views_prefer_overlap_then_recency() {
        let current = frame(10, Pose::identity());
        let bank = LocalBank::new(5, 1);
        assert!(select_local_views(&bank, &current, 1).is_empty());
        let mut bank = LocalBank::new(5, 1);
        bank.offer(&frame(1, turned(180.0)));
        bank.offer(&frame(2, Pose::identity()));
        bank.offer(&frame(3, turned(170.0)));
        let got = select_local_views(&bank, &current, 1);
        assert_eq!(got.iter().map(|f| f.index).collect::<Vec<_>>(), vec![2]);
        let mut bank = LocalBank::new(5, 1);
        bank.offer(&frame(4, Pose::identity()));
        bank.offer(&frame(5, Pose::identity()));
        let got = select_local_views(&bank, &current, 1);
        assert_eq!(got[0].index, 5);
        assert_eq!(select_local_views(&bank, &current, 7).len(), 2);
    }

    #[test]
    fn sampling_probability_examples() {
        assert_eq!(sampling_probs(&[(0.0, 0.3)], 0.0, 0.05, 10.0).unwrap(), vec![1.0]);
        let p = sampling_probs(&[(1.0, 0.0), (3.0, 0.0)], 5.0, 0.1, 0.0).unwrap();
        let (a, b) = ((-0.4f64).exp(), (-0.2f64).exp());
        assert!((p[0] - a / (a + b)).abs() < 1e-15);
        assert!((p[0] - 0.4502).abs() < 5e-5 && (p[1] - 0.5498).abs() < 5e-5);
        let u = sampling_probs(&[(0.0, 0.1), (1.0, 0.9), (2.0, 0.4)], 2.0, 0.0, 0.0).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(sampling_probs(&[], 0.0, 1.0, 1.0), Err(Error::EmptyKeyframeSet));
        let big = sampling_probs(&[(0.0, 1e4), (1.0, 0.0)], 1.0, 0.05, 10.0).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    fn store_with_errs(errs: &[f64]) -> KeyframeStore {
        let mut store = KeyframeStore::new();
        for (i, &e) in errs.iter().enumerate() {
            let mut kf = Keyframe::new(frame(i, Pose::identity()), 1.0);
            kf.err = e;
            store.push(kf);
        }
        store
    }

    #[test]
    fn global_sampling_excludes_and_exhausts() {
        let store = store_with_errs(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut all = sample_global_views(&store, 4, &[1], 10, 0.05, 10.0, &mut rng);
        all.sort();
        assert_eq!(all, vec![0, 2, 3]);
        for _ in 0..50 {
            let got = sample_global_views(&store, 4, &[3], 2, 0.05, 10.0, &mut rng);
            assert_eq!(got.len(), 2);
            assert_ne!(got[0], got[1]);
            assert!(!got.contains(&4) && !got.contains(&3));
        }
        let a = sample_global_views(&store, 4, &[], 2, 0.05, 10.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_global_views(&store, 4, &[], 2, 0.05, 10.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(sample_global_views(&store_with_errs(&[0.1]), 0, &[], 2, 0.05, 10.0, &mut rng).is_empty());
    }

    #[test]
    fn zero_gradient_leaves_pose_unchanged() {
        let mut kf = Keyframe::new(frame(0, turned(12.0)), 1.0);
        let before = kf.pose;
        refine_pose(&mut kf, &Vector6::zeros(), &OptimConfig::default());
        assert_eq!(kf.pose, before);
        refine_pose(&mut kf, &Vector6::new(1.0, -2.0, 0.5, 3.0, 0.1, -0.2), &OptimConfig::default());
        assert!((kf.pose.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
        assert_ne!(kf.pose, before);
    }

    /// A map of small splats near the surface every frame sees, at distinct
    /// depths so their sort order is stable under small updates.
    fn scene_map() -> GaussianMap {
        let f = frame(0, Pose::identity());
        let k = f.intrinsics;
        let gs = (0..64)
            .map(|i| {
                let px = Vector2::new(2.0 + 4.0 * (i % 8) as f64, 2.0 + 4.0 * (i / 8) as f64);
                let c = (i % 5) as f64 / 5.0;
                Gaussian::isotropic(backproject(&f.pose, &k, &px, 2.0 + 0.004 * i as f64), 0.12, 0.6, Vector3::new(c, 1.0 - c, 0.5))
            })
            .collect();
        GaussianMap::from_gaussians(gs)
    }

    #[test]
    fn exact_render_is_a_fixed_point() {
        let map = scene_map();
        let mut f = frame(0, Pose::identity());
        f.image = render(&map, &f.pose, &f.intrinsics, &Vector3::zeros()).image;
        let mut store = KeyframeStore::new();
        store.push(Keyframe::new(f.clone(), 1.0));
        let cfg = SelectionConfig {
            iters_per_keyframe: 1,
            ..SelectionConfig::default()
        };
        let mut opt = Optimizer::new(OptimConfig::default());
        let mut moved = map.clone();
        let report = map_update_step(
            &mut moved,
            &mut store,
            &LocalBank::new(5, 3),
            0,
            &cfg,
            &mut opt,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(report.losses, vec![0.0]);
        for (a, b) in map.gaussians().iter().zip(moved.gaussians()) {
            for (x, y) in a.params().iter().zip(b.params()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert!(store.get(0).err < 1e-12);
    }

    #[test]
    fn keyframe_error_decreases_on_a_static_scene() {
        let target = scene_map();
        let mut f = frame(0, Pose::identity());
        f.image = render(&target, &f.pose, &f.intrinsics, &Vector3::zeros()).image;
        let mut map = target.clone();
        for g in map.gaussians_mut() {
            g.color = Vector3::new(0.5, 0.5, 0.5);
        }
        let mut store = KeyframeStore::new();
        store.push(Keyframe::new(f, 1.0));
        let cfg = SelectionConfig {
            iters_per_keyframe: 50,
            ..SelectionConfig::default()
        };
        let mut opt = Optimizer::new(OptimConfig {
            lr_color: 1e-2,
            ..OptimConfig::default()
        });
        let report = map_update_step(
            &mut map,
            &mut store,
            &LocalBank::new(5, 3),
            0,
            &cfg,
            &mut opt,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let errs: Vec<f64> = report.err_updates.iter().map(|e| e.1).collect();
        assert_eq!(errs.len(), 50);
        assert!(errs.last().unwrap() < &(0.5 * errs[0]), "{:?}", errs);
        assert_eq!(store.get(0).last_optimized, 50);
    }

    #[test]
    fn current_pose_is_frozen_and_post_refine_zero_is_a_noop() {
        let target = scene_map();
        let mut store = KeyframeStore::new();
        for (i, deg) in [0.0, 4.0].into_iter().enumerate() {
            let mut f = frame(i * 20, turned(deg));
            f.image = render(&target, &f.pose, &f.intrinsics, &Vector3::zeros()).image;
            store.push(Keyframe::new(f, 1.0));
        }
        // Start the older keyframe from a perturbed pose.
        store.get_mut(0).pose = se3_exp(&Vector6::new(0.0, 0.01, 0.0, 0.02, 0.0, 0.0)).compose(&store.get(0).pose);
        let p0 = store.get(0).pose;
        let p1 = store.get(1).pose;
        let cfg = SelectionConfig {
            iters_per_keyframe: 3,
            ..SelectionConfig::default()
        };
        let mut opt = Optimizer::new(OptimConfig::default());
        let mut map = target.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = map_update_step(&mut map, &mut store, &LocalBank::new(5, 3), 1, &cfg, &mut opt, &mut rng).unwrap();
        assert!(report.views.iter().all(|v| v == &vec![20, 0]));
        assert_eq!(store.get(1).pose, p1);
        assert_ne!(store.get(0).pose, p0);

        let before = (map.clone(), store.get(0).pose, opt.steps);
        let r = post_refine(&mut map, &mut store, 0, &cfg, &mut opt, &mut rng).unwrap();
        assert!(r.views.is_empty());
        assert_eq!(map.gaussians(), before.0.gaussians());
        assert_eq!((store.get(0).pose, opt.steps), (before.1, before.2));
        let r = post_refine(&mut map, &mut store, 4, &cfg, &mut opt, &mut rng).unwrap();
        assert_eq!(r.views.len(), 4);
        assert!(r.views.iter().all(|v| v.len() == 2));
    }

    #[test]
    fn transparent_gaussians_are_pruned() {
        let mut map = scene_map();
        map.gaussians_mut()[3].opacity_logit = crate::gaussian::logit(0.001);
        assert_eq!(prune_transparent(&mut map, &OptimConfig::default()), 1);
        assert_eq!(map.len(), 63);
    }

    proptest! {
        #[test]
        fn probabilities_are_normalized_and_monotone(
            errs in proptest::collection::vec(0.0f64..1.0, 1..12),
            sigma1 in 0.01f64..1.0,
            sigma2 in 0.0f64..20.0,
            bump in 0.01f64..0.5,
            pick in 0usize..12,
        ) {
            let n = errs.len();
            let entries: Vec<(f64, f64)> = errs.iter().enumerate().map(|(j, &e)| (j as f64, e)).collect();
            let i = (n - 1) as f64;
            let p = sampling_probs(&entries, i, sigma1, sigma2).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            let flat: Vec<(f64, f64)> = (0..n).map(|j| (j as f64, 0.3)).collect();
            let q = sampling_probs(&flat, i, sigma1, sigma2).unwrap();
            prop_assert!(q.windows(2).all(|w| w[0] < w[1]));

            if sigma2 > 0.0 {
                let j = pick % n;
                let mut raised = entries.clone();
                raised[j].1 += bump;
                let r = sampling_probs(&raised, i, sigma1, sigma2).unwrap();
                prop_assert!(n == 1 || r[j] > p[j]);
                for m in (0..n).filter(|&m| m != j) {
                    prop_assert!(r[m] <= p[m]);
                }
            }
        }

        #[test]
        fn bank_never_exceeds_capacity(cap in 0usize..6, every in 1usize..5, offers in 0usize..40) {
            let mut bank = LocalBank::new(cap, every);
            let mut admitted = Vec::new();
            for i in 0..offers {
                if bank.offer(&frame(i, Pose::identity())) {
                    admitted.push(i);
                }
                prop_assert!(bank.len() <= cap);
            }
            let held: Vec<usize> = bank.frames().map(|f| f.index).collect();
            let start = admitted.len().saturating_sub(cap);
            prop_assert_eq!(held, admitted[start..].to_vec());
        }
    }
}
