//! End-to-end runs of the `lanetopo` binary.

use std::path::Path;
use std::process::{Command, Output};

use lanetopo::metrics::EvalReport;
use lanetopo::scene_io::{serialize_scene, Checkpoint};
use lanetopo::synth::{generate_pair, SynthSpec};

fn lanetopo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanetopo")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn evaluate_echo_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let s = lanetopo(&["synth", "--seed", "3", "--frames", "12", "--out", "data"], dir.path());
    assert_eq!(s.status.code(), Some(0), "{}", stderr(&s));
    let o = lanetopo(&["evaluate", "--gt", "data/gt", "--pred", "data/gt", "--out", "report.json", "--per-frame"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.ols, 1.0);
    assert_eq!(report.per_frame.as_ref().unwrap().len(), 12);
    assert!(stdout(&o).contains("ols=1"));
}

#[test]
fn missing_gt_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lanetopo(&["evaluate", "--pred", "p", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = lanetopo(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    lanetopo(&["synth", "--seed", "0", "--frames", "2", "--out", "d"], dir.path());
    std::fs::write(dir.path().join("c.toml"), "[eval]\nunknown_key = 1\n").unwrap();
    let o = lanetopo(&["evaluate", "--gt", "d/gt", "--pred", "d/pred", "--config", "c.toml", "--out", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("level=error kind=usage"), "{}", stderr(&o));
}

#[test]
fn invalid_scene_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for sub in ["gt", "pred"] {
        std::fs::create_dir_all(d.join(sub)).unwrap();
    }
    let (gt, _) = generate_pair(&SynthSpec::default(), 1).unwrap();
    std::fs::write(d.join("gt/000000.json"), serialize_scene(&gt[0]).unwrap()).unwrap();
    // Confidence outside [0, 1] parses but fails validation.
    let mut bad = gt[0].clone();
    bad.lanes[0].confidence = 1.5;
    std::fs::write(d.join("pred/000000.json"), serialize_scene(&bad).unwrap()).unwrap();
    let o = lanetopo(&["evaluate", "--gt", "gt", "--pred", "pred", "--out", "r.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=validation role=pred"), "{}", stderr(&o));
    assert!(!d.join("r.json").exists());

    // Mismatched frame ids.
    std::fs::write(d.join("pred/000000.json"), serialize_scene(&gt[0]).unwrap()).unwrap();
    let mut other = gt[0].clone();
    other.frame_id = "999".into();
    std::fs::write(d.join("pred/999.json"), serialize_scene(&other).unwrap()).unwrap();
    let o = lanetopo(&["evaluate", "--gt", "gt", "--pred", "pred", "--out", "r.json"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=invalid_input"), "{}", stderr(&o));
}

#[test]
fn parse_errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir_all(d.join("gt")).unwrap();
    std::fs::write(
        d.join("gt/a.json"),
        r#"{"frame_id": "a", "lanes": [[[0,0,0],[1,0,0]]], "traffic_elements": [], "adj_ll": [[0]], "adj_lt": [[0]]}"#,
    )
    .unwrap();
    let o = lanetopo(&["evaluate", "--gt", "gt", "--pred", "gt", "--out", "r.json"], d);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("kind=parse") && err.contains("adj_lt") && err.contains("offset="), "{err}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("noise.toml"), "point_sigma = 0.3\nlane_drop_rate = 0.2\nedge_flip_rate = 0.1\ntp_confidence = [0.6, 0.9]\n").unwrap();
    for out in ["a", "b"] {
        let o = lanetopo(&["synth", "--seed", "5", "--frames", "6", "--out", out, "--perturb", "noise.toml"], d);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for sub in ["gt", "pred"] {
        for k in 0..6 {
            let name = format!("{sub}/{k:06}.json");
            assert_eq!(std::fs::read(d.join("a").join(&name)).unwrap(), std::fs::read(d.join("b").join(&name)).unwrap());
        }
    }
    assert_ne!(std::fs::read(d.join("a/gt/000001.json")).unwrap(), std::fs::read(d.join("a/pred/000001.json")).unwrap());
    std::fs::write(d.join("bad.toml"), "edge_flip_rate = 2.0\n").unwrap();
    let o = lanetopo(&["synth", "--seed", "5", "--frames", "1", "--out", "c", "--perturb", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_seed_seven_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lanetopo(&["gradcheck", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for line in out.lines().filter(|l| l.contains("max relative error:")) {
        let value: f64 = line.split("max relative error: ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        assert!(value < 1e-4, "{line}");
    }
    assert_eq!(out.lines().filter(|l| l.contains("(pass)")).count(), 2);
}

#[test]
fn init_params_then_sgnn() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), "[sgnn]\nlane_dim = 8\nte_dim = 6\nembed_hidden = 12\nlayers = 3\n[heads]\ntopo_dim = 4\n").unwrap();
    let o = lanetopo(&["init-params", "--seed", "1", "--config", "small.toml", "--out", "p.json"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck = Checkpoint::load(&d.join("p.json")).unwrap();
    assert_eq!(ck.config.sgnn.layers, 3);
    lanetopo(&["synth", "--seed", "0", "--frames", "1", "--out", "s"], d);

    let o = lanetopo(&["sgnn", "--params", "p.json", "--scene", "s/gt/000000.json", "--variant", "skg", "--layers", "2", "--out", "q.json"], d);
    assert_eq!(o.status.code(), Some(2), "queries are required without --seed");

    let run = |out: &str, variant: &str| {
        let o = lanetopo(
            &["sgnn", "--params", "p.json", "--scene", "s/gt/000000.json", "--variant", variant, "--layers", "2", "--out", out, "--seed", "4"],
            d,
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(out)).unwrap()).unwrap();
        v
    };
    let a = run("a.json", "skg");
    let b = run("b.json", "skg");
    assert_eq!(a, b);
    assert_eq!(a["layers"].as_array().unwrap().len(), 2);
    assert_eq!(a["layers"][0]["lane_queries"][0].as_array().unwrap().len(), 8);
    let c = run("c.json", "sg");
    assert_ne!(a["layers"][1]["lane_queries"], c["layers"][1]["lane_queries"]);
    // The prediction is itself a valid scene file.
    let pred = serde_json::to_vec(&a["prediction"]).unwrap();
    lanetopo::scene_io::parse_scene(&pred, Default::default()).unwrap();

    let o = lanetopo(&["sgnn", "--params", "p.json", "--scene", "s/gt/000000.json", "--variant", "sg", "--layers", "9", "--out", "x.json", "--seed", "1"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_env_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    lanetopo(&["synth", "--seed", "0", "--frames", "3", "--out", "d"], dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_lanetopo"))
        .args(["evaluate", "--gt", "d/gt", "--pred", "d/pred", "--out", "r.json"])
        .env("LANETOPO_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_lanetopo"))
        .args(["evaluate", "--gt", "d/gt", "--pred", "d/pred", "--out", "r.json"])
        .env("LANETOPO_THREADS", "3")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
