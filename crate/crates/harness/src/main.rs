use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splatmap_harness::ablation::{run_ablation, Ablation};
use splatmap_harness::export::{write_frames, write_ply};
use splatmap_harness::report::{parse_csv_rows, write_report_csv, write_report_json, write_timing, Aggregate, Split};
use splatmap_harness::sequence::write_sequence;
use splatmap_harness::synth::{synth_scene, SynthConfig, PRESETS};
use splatmap_harness::{load_sequence, run_pipeline, HarnessError, Result, RunConfig, RunReport};

#[derive(Parser)]
#[command(name = "splatmap", version, about = "Online Gaussian-splat dense mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map a sequence and evaluate every frame.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Post-refinement steps; overrides the config file.
        #[arg(long)]
        post_refine: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic sequence with ground-truth depth.
    Synth {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the full method against one disabled component.
    Ablate {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a report (JSON or CSV) and check its aggregates.
    Metrics {
        #[arg(long)]
        report: PathBuf,
    },
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::write(dir, e))
}

fn put(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::write(path, e))
}

fn print_aggregate(label: &str, a: &Aggregate) {
    println!(
        "{label:<8} frames {:>4}  psnr {:>8.3}  ssim {:.4}  mae {:.5}",
        a.frames, a.psnr, a.ssim, a.mae
    );
}

fn cmd_run(manifest: &Path, config: &Path, post_refine: Option<usize>, out: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(n) = post_refine {
        cfg.post_refine = n;
    }
    cfg.validate().map_err(HarnessError::Config)?;
    let seq = load_sequence(manifest)?;
    let output = run_pipeline(&seq, &cfg)?;
    output.report.verify().map_err(HarnessError::Invariant)?;
    print_aggregate("train", &output.report.train);
    print_aggregate("heldout", &output.report.heldout);
    println!(
        "keyframes {}  gaussians {}  wall {:.2}s",
        output.report.keyframes, output.report.final_gaussians, output.timing.wall
    );
    if let Some(dir) = out {
        mkdir(dir)?;
        write_report_json(&output.report, &dir.join("report.json"))?;
        write_report_csv(&output.report, &dir.join("report.csv"))?;
        write_timing(&output.timing, &dir.join("timing.json"))?;
        put(&dir.join("config.txt"), &cfg.to_text())?;
        write_ply(output.run.mapper.map(), &dir.join("map.ply"))?;
        let indices = seq.frames.iter().map(|f| f.index);
        write_frames(&dir.join("frames"), indices.zip(&output.renders))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_synth(preset: &str, seed: u64, out: &Path) -> Result<()> {
    let cfg = SynthConfig::preset(preset, seed).ok_or_else(|| {
        HarnessError::Config(format!("unknown preset `{preset}` (expected one of {})", PRESETS.join(", ")))
    })?;
    let synth = synth_scene(&cfg);
    mkdir(out)?;
    let manifest = write_sequence(out, &synth.sequence)?;
    write_ply(&synth.ground_truth, &out.join("ground_truth.ply"))?;
    let mut run = RunConfig::default();
    run.mapper.seed = seed;
    put(&out.join("config.txt"), &run.to_text())?;
    println!(
        "{} frames, {} ground-truth Gaussians -> {}",
        synth.sequence.frames.len(),
        synth.ground_truth.len(),
        manifest.display()
    );
    Ok(())
}

fn cmd_ablate(name: &str, seed: u64, out: &Path) -> Result<()> {
    let ablation: Ablation = name.parse().map_err(HarnessError::Config)?;
    let mut base = RunConfig::default();
    base.mapper.seed = seed;
    let report = run_ablation(ablation, &base)?;
    mkdir(out)?;
    put(&out.join("ablation.json"), &report.to_json())?;
    put(&out.join("ablation.csv"), &report.to_csv())?;
    for v in &report.variants {
        write_report_csv(&v.report, &out.join(format!("{}.csv", v.label)))?;
    }
    for v in &report.variants {
        println!(
            "{:<30} train {:>8.3}  heldout {:>8.3}  gaussians {:>6}  metric {:.4}",
            v.label, v.train_psnr, v.heldout_psnr, v.gaussians, v.metric
        );
    }
    println!("expected: {}  -> {}", report.expectation, if report.verdict { "holds" } else { "does not hold" });
    Ok(())
}

fn cmd_metrics(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::read(path, e))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let rows = if is_csv {
        parse_csv_rows(&text).map_err(|(line, msg)| HarnessError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })?
    } else {
        let report = RunReport::from_json(&text).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        report.verify().map_err(HarnessError::Invariant)?;
        report.frames
    };
    print_aggregate("train", &Aggregate::of(rows.iter().filter(|r| r.split == Split::Train)));
    print_aggregate("heldout", &Aggregate::of(rows.iter().filter(|r| r.split == Split::Heldout)));
    print_aggregate("all", &Aggregate::of(&rows));
    if let Some(last) = rows.last() {
        println!("gaussians after last frame {}", last.gaussians);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            manifest,
            config,
            post_refine,
            out,
        } => cmd_run(manifest, config, *post_refine, out.as_deref()),
        Command::Synth { preset, seed, out } => cmd_synth(preset, *seed, out),
        Command::Ablate { name, seed, out } => cmd_ablate(name, *seed, out),
        Command::Metrics { report } => cmd_metrics(report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
