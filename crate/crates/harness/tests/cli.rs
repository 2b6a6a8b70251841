use std::path::Path;
use std::process::Command;

fn splatmap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splatmap"))
        .args(args)
        .env("MAPPER_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path) -> (String, String) {
    let d = dir.to_str().unwrap();
    let out = splatmap(&["synth", "--preset", "plane", "--seed", "3", "--out", d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // Keep the CLI test quick: few optimization iterations, short sequence.
    let manifest = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut kept = 0;
    let short: Vec<&str> = text
        .lines()
        .filter(|l| {
            let frame_line = l.starts_with("frame ") || l.starts_with("depth ");
            let idx: usize = l.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            if l.starts_with("frame ") && idx < 10 {
                kept += 1;
            }
            !frame_line || idx < 10
        })
        .collect();
    assert_eq!(kept, 10);
    std::fs::write(&manifest, short.join("\n")).unwrap();
    let tracker = dir.join("tracker.txt");
    let t = std::fs::read_to_string(&tracker).unwrap();
    let t: Vec<&str> = t
        .lines()
        .filter(|l| l.split_whitespace().next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|i| i < 10))
        .collect();
    std::fs::write(&tracker, t.join("\n")).unwrap();
    let config = dir.join("config.txt");
    let c = std::fs::read_to_string(&config).unwrap();
    std::fs::write(&config, c.replace("iters_per_keyframe = 60", "iters_per_keyframe = 4")).unwrap();
    (manifest.to_str().unwrap().to_string(), config.to_str().unwrap().to_string())
}

#[test]
fn synth_run_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = synth(dir.path());
    assert!(dir.path().join("ground_truth.ply").exists());
    let out_dir = dir.path().join("out");
    let out = splatmap(&[
        "run", "--manifest", &manifest, "--config", &config, "--post-refine", "3", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "report.csv", "timing.json", "config.txt", "map.ply", "frames/frame_00000.png", "frames/frame_00009.png"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let echoed = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echoed.contains("post_refine = 3"));
    assert!(echoed.contains("iters_per_keyframe = 4"));
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("\"covis_threshold\""));

    for name in ["report.json", "report.csv"] {
        let m = splatmap(&["metrics", "--report", out_dir.join(name).to_str().unwrap()]);
        assert_eq!(code(&m), 0, "{}", String::from_utf8_lossy(&m.stderr));
        assert!(String::from_utf8_lossy(&m.stdout).contains("heldout"));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = synth(dir.path());

    let bad_cfg = dir.path().join("bad.txt");
    std::fs::write(&bad_cfg, "sigma1 = 0.1\nno_such_key = 1\n").unwrap();
    let out = splatmap(&["run", "--manifest", &manifest, "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    let out = splatmap(&["run", "--manifest", "/nonexistent/manifest.txt", "--config", &config]);
    assert_eq!(code(&out), 2);

    let out = splatmap(&["synth", "--preset", "nope", "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let out = splatmap(&["ablate", "--name", "nope", "--seed", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let out = splatmap(&["run", "--manifest", &manifest]);
    assert_eq!(code(&out), 2, "missing flag is a usage error");

    let tracker = dir.path().join("tracker.txt");
    let t = std::fs::read_to_string(&tracker).unwrap();
    std::fs::write(&tracker, format!("{t}\n500 1 0 0 2 16 16 2\n")).unwrap();
    let out = splatmap(&["run", "--manifest", &manifest, "--config", &config]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
