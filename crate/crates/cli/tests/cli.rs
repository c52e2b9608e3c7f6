use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_pklbench");

fn pklbench(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = pklbench(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json_file(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {text}"))
}

/// Two scenes and a coarse planner trained for a handful of steps.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "gen",
            "--seed",
            "5",
            "--n-scenes",
            "2",
            "--out",
            f.s("scenes"),
        ]);
        let config = json!({
            "grid": { "cell": 1.2, "n_rows": 64, "n_cols": 64, "x_min": -16.8, "y_min": -38.4 },
            "horizon_steps": 15, "step": 0.25, "history_frames": 5, "history_period": 0.5,
            "in_channels": 8, "dropout_rate": 0.1, "loss_clip": 100.0, "objective": "softmax_ce",
            "pos_weight": 1.0, "train_on_all_agents": true, "min_displacement": 0.5,
            "lr": 0.002, "weight_decay": 1e-5, "batch_size": 4, "steps": 3, "seed": 0,
            "input_pool": 2, "widths": [4, 6, 8]
        });
        fs::write(f.p("tiny.json"), config.to_string()).unwrap();
        ok(&[
            "train",
            "--scenes",
            f.s("scenes"),
            "--seed",
            "1",
            "--config",
            f.s("tiny.json"),
            "--out",
            f.s("model"),
        ]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> &'static str {
        Box::leak(self.p(rel).to_string_lossy().into_owned().into_boxed_str())
    }

    fn model(&self) -> &'static str {
        self.s("model/model.pkl-ckpt")
    }
}

#[test]
fn gen_writes_scenes_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&[
        "gen",
        "--seed",
        "3",
        "--n-scenes",
        "3",
        "--layout",
        "parking-lot",
        "--out",
        out.to_str().unwrap(),
    ]);
    for i in 0..3 {
        assert!(out.join(format!("scene_{i:04}.json")).is_file());
    }
    let m = json_file(out.join("manifest.json"));
    assert_eq!(m["scenes"].as_array().unwrap().len(), 3);
    assert_eq!(m["scenes"][1]["layout"], "parking_lot");
    let run = json_file(out.join("gen.run.json"));
    assert_eq!(run["command"], "gen");
    assert_eq!(run["seed"], 3);
    assert!(run["config_hashes"]["scenes"].as_str().unwrap().len() == 64);
}

#[test]
fn train_eval_and_rerun_are_reproducible() {
    let f = Fixture::new();
    let report = json_file(f.p("model/train_report.json"));
    assert_eq!(report["steps"], 3);
    assert!(
        (report["initial_batch_loss"].as_f64().unwrap()
            - report["initial_batch_expected"].as_f64().unwrap())
        .abs()
            < 1e-3
    );
    let log = fs::read_to_string(f.p("model/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,loss,lr\n"));

    for out in ["pkl_a", "pkl_b"] {
        ok(&[
            "eval-pkl",
            "--scenes",
            f.s("scenes"),
            "--dets",
            "perfect",
            "--model",
            f.model(),
            "--out",
            f.s(out),
        ]);
    }
    let summary = json_file(f.p("pkl_a/pkl_summary.json"));
    assert_eq!(summary["mean"], 0.0);
    assert_eq!(summary["median"], 0.0);
    assert_eq!(summary["count"], 58);
    for name in ["pkl_samples.csv", "pkl_summary.json"] {
        assert_eq!(
            fs::read(f.p("pkl_a").join(name)).unwrap(),
            fs::read(f.p("pkl_b").join(name)).unwrap(),
            "{name}"
        );
    }
    let run = json_file(f.p("pkl_a/eval-pkl.run.json"));
    assert_eq!(run["checkpoint_hash"], report["checkpoint_hash"]);
    assert!(run["outputs"]
        .as_array()
        .unwrap()
        .contains(&json!("pkl_samples.csv")));

    ok(&[
        "eval-nds",
        "--scenes",
        f.s("scenes"),
        "--dets",
        "perfect",
        "--out",
        f.s("nds"),
    ]);
    assert_eq!(json_file(f.p("nds/nds.json"))["nds"], 1.0);

    // one-scene range
    ok(&[
        "eval-pkl",
        "--scenes",
        f.s("scenes"),
        "--range",
        "1..",
        "--dets",
        "perfect",
        "--model",
        f.model(),
        "--out",
        f.s("pkl_c"),
    ]);
    assert_eq!(json_file(f.p("pkl_c/pkl_summary.json"))["count"], 29);
}

#[test]
fn analysis_commands_write_their_outputs() {
    let f = Fixture::new();
    let (scenes, model) = (f.s("scenes"), f.model());
    ok(&[
        "noise-sweep",
        "--scenes",
        scenes,
        "--model",
        model,
        "--kind",
        "drop",
        "--levels",
        "0,0.5",
        "--trials",
        "2",
        "--seed",
        "9",
        "--out",
        f.s("sweep"),
        "--jobs",
        "1",
    ]);
    let csv = fs::read_to_string(f.p("sweep/sweep_drop.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(json_file(f.p("sweep/sweep_drop.json"))["pkl_mean"][0], 0.0);

    ok(&[
        "percentile-curve",
        "--scenes",
        scenes,
        "--model",
        model,
        "--by",
        "distance",
        "--percentiles",
        "0,100",
        "--n-remove",
        "2",
        "--out",
        f.s("pc"),
    ]);
    assert_eq!(
        fs::read_to_string(f.p("pc/percentile_distance.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    ok(&[
        "rank-chunks",
        "--scenes",
        scenes,
        "--dets",
        "perfect",
        "--model",
        model,
        "--out",
        f.s("rank"),
    ]);
    assert_eq!(
        fs::read_to_string(f.p("rank/rank_chunks.csv"))
            .unwrap()
            .lines()
            .count(),
        59
    );
    assert_eq!(
        fs::read_to_string(f.p("rank/local_global_nds.csv"))
            .unwrap()
            .lines()
            .count(),
        59
    );

    ok(&[
        "fn-importance",
        "--scenes",
        scenes,
        "--model",
        model,
        "--scene-id",
        "scene_0000",
        "--t0",
        "5",
        "--out",
        f.s("imp"),
    ]);
    assert!(
        fs::read_to_string(f.p("imp/importance.csv"))
            .unwrap()
            .lines()
            .count()
            > 1
    );

    ok(&[
        "fp-heatmap",
        "--scenes",
        scenes,
        "--model",
        model,
        "--scene-id",
        "scene_0000",
        "--t0",
        "5",
        "--stride",
        "9.6",
        "--out",
        f.s("hm"),
    ]);
    let side = json_file(f.p("hm/fp_heatmap.json"));
    assert_eq!(
        (side["n_rows"].as_u64(), side["n_cols"].as_u64()),
        (Some(8), Some(8))
    );
    assert!(f.p("hm/fp_heatmap.pgm").is_file());
    assert!(f.p("hm/fp-heatmap.run.json").is_file());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(pklbench(&[]).status.code(), Some(2));
    assert_eq!(pklbench(&["gen"]).status.code(), Some(2));
    assert_eq!(
        pklbench(&["eval-pkl", "--scenes", "x", "--range", "5..2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(pklbench(&["--help"]).status.code(), Some(0));
    assert_eq!(pklbench(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one_with_a_field() {
    let f = Fixture::new();
    let (scenes, model) = (f.s("scenes"), f.model());

    let out = pklbench(&[
        "eval-nds",
        "--scenes",
        f.s("missing"),
        "--dets",
        "perfect",
        "--out",
        f.s("o"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "io");

    let out = pklbench(&[
        "noise-sweep",
        "--scenes",
        scenes,
        "--model",
        model,
        "--kind",
        "jitter",
        "--levels",
        "0",
        "--seed",
        "1",
        "--out",
        f.s("o"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["field"], "kind");

    let out = pklbench(&[
        "noise-sweep",
        "--scenes",
        scenes,
        "--model",
        model,
        "--kind",
        "remove_by_speed",
        "--levels",
        "0",
        "--seed",
        "1",
        "--out",
        f.s("o"),
    ]);
    assert_eq!(stderr_json(&out)["field"], "kind");

    let out = pklbench(&[
        "fn-importance",
        "--scenes",
        scenes,
        "--model",
        model,
        "--scene-id",
        "scene_0000",
        "--t0",
        "0.5",
        "--out",
        f.s("o"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["field"], "t0");

    let out = pklbench(&[
        "eval-pkl",
        "--scenes",
        scenes,
        "--range",
        "7..9",
        "--dets",
        "perfect",
        "--model",
        model,
        "--out",
        f.s("o"),
    ]);
    assert_eq!(stderr_json(&out)["field"], "range");

    let mut bad: Value =
        serde_json::from_str(&fs::read_to_string(f.p("tiny.json")).unwrap()).unwrap();
    bad["grid"]["cell"] = json!("wide");
    fs::write(f.p("bad.json"), bad.to_string()).unwrap();
    let out = pklbench(&[
        "train",
        "--scenes",
        scenes,
        "--seed",
        "1",
        "--config",
        f.s("bad.json"),
        "--out",
        f.s("o"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["field"], "grid.cell");

    fs::write(f.p("garbage.pkl-ckpt"), b"not a checkpoint").unwrap();
    let out = pklbench(&[
        "eval-pkl",
        "--scenes",
        scenes,
        "--dets",
        "perfect",
        "--model",
        f.s("garbage.pkl-ckpt"),
        "--out",
        f.s("o"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
