//! Paired runs on synthetic scenes: the full method against one component
//! switched off.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{run_online, run_pipeline};
use crate::report::{RunReport, Split};
use crate::synth::{synth_scene, SynthConfig};

/// Post-refinement checkpoints evaluated by the sweep.
pub const SWEEP_STEPS: [usize; 3] = [0, 1000, 5000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoErrorComp,
    NoMohv,
    NoGlobalViews,
    NoCamRefinement,
    PostRefineSweep,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoErrorComp,
        Ablation::NoMohv,
        Ablation::NoGlobalViews,
        Ablation::NoCamRefinement,
        Ablation::PostRefineSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoErrorComp => "no_error_comp",
            Ablation::NoMohv => "no_mohv",
            Ablation::NoGlobalViews => "no_global_views",
            Ablation::NoCamRefinement => "no_cam_refinement",
            Ablation::PostRefineSweep => "post_refine_sweep",
        }
    }

    /// The synthetic preset the comparison runs on.
    pub fn preset(self) -> &'static str {
        match self {
            Ablation::NoErrorComp => "plane_patch",
            Ablation::NoMohv => "plane_clustered",
            Ablation::NoGlobalViews => "corridor",
            Ablation::NoCamRefinement => "plane_noisy",
            Ablation::PostRefineSweep => "plane",
        }
    }

    fn expectation(self) -> &'static str {
        match self {
            Ablation::NoErrorComp => "held-out PSNR: full > no_error_comp",
            Ablation::NoMohv => "Gaussian count: no_mohv > full",
            Ablation::NoGlobalViews => "segment-A PSNR: full > no_global_views",
            Ablation::NoCamRefinement => "training PSNR under pose noise: full > no_cam_refinement",
            Ablation::PostRefineSweep => "training PSNR non-decreasing over 0, 1000, 5000 steps",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                format!("unknown ablation `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Variant {
    pub label: String,
    pub preset: String,
    pub train_psnr: f64,
    pub heldout_psnr: f64,
    pub gaussians: usize,
    /// The quantity the verdict compares.
    pub metric: f64,
    #[serde(skip)]
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub name: String,
    pub seed: u64,
    pub expectation: String,
    pub variants: Vec<Variant>,
    /// Whether the expected ordering holds.
    pub verdict: bool,
}

impl AblationReport {
    pub fn variant(&self, label: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,preset,train_psnr,heldout_psnr,gaussians,metric\n");
        for v in &self.variants {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                v.label, v.preset, v.train_psnr, v.heldout_psnr, v.gaussians, v.metric
            );
        }
        out
    }
}

/// Mean training PSNR over the manifest positions in `range`.
pub fn range_psnr(report: &RunReport, range: std::ops::Range<usize>) -> f64 {
    let rows: Vec<_> = report
        .frames
        .iter()
        .enumerate()
        .filter(|(pos, r)| range.contains(pos) && r.split == Split::Train)
        .map(|(_, r)| r.psnr)
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

fn variant(label: &str, preset: &str, report: RunReport, metric: f64) -> Variant {
    Variant {
        label: label.to_string(),
        preset: preset.to_string(),
        train_psnr: report.train.psnr,
        heldout_psnr: report.heldout.psnr,
        gaussians: report.final_gaussians,
        metric,
        report,
    }
}

fn scene(preset: &str, seed: u64) -> Result<crate::sequence::Sequence> {
    let cfg = SynthConfig::preset(preset, seed)
        .ok_or_else(|| HarnessError::Config(format!("unknown preset `{preset}`")))?;
    Ok(synth_scene(&cfg).sequence)
}

/// Runs `ablation` with `base` as the full method. The synthetic scene and
/// the mapper both use `base.mapper.seed`.
pub fn run_ablation(ablation: Ablation, base: &RunConfig) -> Result<AblationReport> {
    let seed = base.mapper.seed;
    let preset = ablation.preset();
    let seq = scene(preset, seed)?;
    let full_report = |seq: &crate::sequence::Sequence, cfg: &RunConfig| -> Result<RunReport> {
        Ok(run_pipeline(seq, cfg)?.report)
    };
    let (variants, verdict) = match ablation {
        Ablation::NoErrorComp => {
            let mut off = *base;
            off.mapper.densify.use_error_comp = false;
            let a = full_report(&seq, base)?;
            let b = full_report(&seq, &off)?;
            let (ma, mb) = (a.heldout.psnr, b.heldout.psnr);
            (vec![variant("full", preset, a, ma), variant("no_error_comp", preset, b, mb)], mb < ma)
        }
        Ablation::NoMohv => {
            let mut off = *base;
            off.mapper.densify.use_mohv = false;
            let a = full_report(&seq, base)?;
            let b = full_report(&seq, &off)?;
            let (ma, mb) = (a.final_gaussians as f64, b.final_gaussians as f64);
            (vec![variant("full", preset, a, ma), variant("no_mohv", preset, b, mb)], mb > ma)
        }
        Ablation::NoGlobalViews => {
            let mut off = *base;
            off.mapper.selection.n_global = 0;
            let range = SynthConfig::preset(preset, seed).expect("known preset").segment_a();
            let a = full_report(&seq, base)?;
            let b = full_report(&seq, &off)?;
            let (ma, mb) = (range_psnr(&a, range.clone()), range_psnr(&b, range));
            (vec![variant("full", preset, a, ma), variant("no_global_views", preset, b, mb)], mb < ma)
        }
        Ablation::NoCamRefinement => {
            let mut off = *base;
            off.mapper.optim.refine_poses = false;
            let a = full_report(&seq, base)?;
            let b = full_report(&seq, &off)?;
            let exact = scene("plane", seed)?;
            let c = full_report(&exact, base)?;
            let d = full_report(&exact, &off)?;
            let (ma, mb) = (a.train.psnr, b.train.psnr);
            let (mc, md) = (c.train.psnr, d.train.psnr);
            (
                vec![
                    variant("full", preset, a, ma),
                    variant("no_cam_refinement", preset, b, mb),
                    variant("full_zero_noise", "plane", c, mc),
                    variant("no_cam_refinement_zero_noise", "plane", d, md),
                ],
                mb < ma,
            )
        }
        Ablation::PostRefineSweep => {
            let mut run = run_online(&seq, base)?;
            let mut done = 0;
            let mut out = Vec::new();
            for steps in SWEEP_STEPS {
                run.post_refine(steps - done)?;
                done = steps;
                let (report, _) = run.evaluate(&seq)?;
                let m = report.train.psnr;
                out.push(variant(&format!("post_refine_{steps}"), preset, report, m));
            }
            let monotone = out.windows(2).all(|w| w[1].metric >= w[0].metric);
            (out, monotone)
        }
    };
    Ok(AblationReport {
        name: ablation.name().to_string(),
        seed,
        expectation: ablation.expectation().to_string(),
        variants,
        verdict,
    })
}
