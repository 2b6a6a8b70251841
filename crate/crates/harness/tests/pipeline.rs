use splatmap_harness::export::{parse_ply, ply_bytes, write_ply, PLY_RECORD_BYTES};
use splatmap_harness::report::Split;
use splatmap_harness::synth::{synth_scene, SynthConfig};
use splatmap_harness::{run_pipeline, RunConfig, Sequence};

fn scene(frames: usize, seed: u64) -> Sequence {
    let mut c = SynthConfig::preset("plane", seed).unwrap();
    c.frames = frames;
    c.width = 40;
    c.height = 40;
    c.tracker_points = 40;
    synth_scene(&c).sequence
}

fn quick() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.mapper.selection.iters_per_keyframe = 8;
    cfg.mapper.selection.t_k = 4;
    cfg
}

#[test]
fn single_frame_sequence() {
    let seq = scene(1, 2);
    let out = run_pipeline(&seq, &quick()).unwrap();
    assert_eq!(out.report.keyframes, 1);
    assert!(out.report.final_gaussians > 0);
    assert_eq!(out.report.frames.len(), 1);
    assert!(out.report.frames[0].keyframe);
    out.report.verify().unwrap();
}

#[test]
fn held_out_frames_never_reach_the_mapper() {
    let seq = scene(17, 5);
    let cfg = RunConfig {
        heldout_every: 4,
        ..quick()
    };
    let out = run_pipeline(&seq, &cfg).unwrap();
    let store = out.run.mapper.keyframes();
    for (pos, row) in out.report.frames.iter().enumerate() {
        let held = (pos + 1) % 4 == 0;
        assert_eq!(row.split == Split::Heldout, held);
        if held {
            assert!(!row.keyframe);
            assert!(store.ordinal_of(row.index).is_none());
            assert_eq!(row.gaussians, out.report.frames[pos - 1].gaussians);
        }
    }
    assert_eq!(out.report.heldout.frames, 4);
    out.report.verify().unwrap();
}

#[test]
fn identical_runs_are_byte_identical() {
    let seq = scene(12, 9);
    let mut cfg = quick();
    cfg.post_refine = 5;
    let a = run_pipeline(&seq, &cfg).unwrap();
    let b = run_pipeline(&seq, &cfg).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    assert_eq!(ply_bytes(a.run.mapper.map()), ply_bytes(b.run.mapper.map()));
}

#[test]
fn stage_times_cover_the_run_and_optimization_dominates() {
    let seq = scene(12, 3);
    let out = run_pipeline(&seq, &quick()).unwrap();
    let t = out.timing;
    assert!(t.stage_sum() >= 0.95 * t.wall, "{t:?}");
    assert!(t.stage_sum() <= t.wall * 1.0001 + 1e-6, "{t:?}");
    for other in [t.view_selection, t.depth_lookup, t.mohv, t.other] {
        assert!(t.optimization > other, "{t:?}");
    }
}

#[test]
fn ply_size_is_header_plus_records() {
    let seq = scene(1, 1);
    let out = run_pipeline(&seq, &quick()).unwrap();
    let mut map = out.run.mapper.map().clone();
    map.prune({
        let mut seen = 0;
        move |_| {
            seen += 1;
            seen > 3
        }
    });
    assert_eq!(map.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.ply");
    write_ply(&map, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header_len = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
    assert_eq!(bytes.len(), header_len + 3 * PLY_RECORD_BYTES);
    let verts = parse_ply(&bytes).unwrap();
    for (v, g) in verts.iter().zip(map.gaussians()) {
        for a in 0..3 {
            assert_eq!(v.position[a], g.position[a] as f32);
        }
    }
}
