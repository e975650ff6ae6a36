//! Drives the binary through the whole pipeline on a small synthetic world.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use latent_router::estimators::write_measurements;
use latent_router::sim::{generate_world, SyntheticWorld, WorldConfig};

const BIN: &str = env!("CARGO_BIN_EXE_latent-router");

struct Workdir {
    dir: tempfile::TempDir,
    world: SyntheticWorld,
}

impl Workdir {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&WorldConfig::new(5, 10, 60, 2, 0.0)).unwrap();
        let mut csv = Vec::new();
        world.responses.write_csv(&mut csv).unwrap();
        fs::write(dir.path().join("responses.csv"), csv).unwrap();
        fs::write(
            dir.path().join("settings.toml"),
            "[calibration]\nepochs = 800\n[predictor]\nepochs = 3\ntrunk_widths = [16, 16]\nhead_width = 8\n",
        )
        .unwrap();
        Self { dir, world }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(self.path("settings.toml"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("LATROUTE_CONFIG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

/// Calibrate, select anchors, onboard one model and build a registry.
fn build_registry(w: &Workdir) {
    w.ok(&["calibrate", "--responses", "responses.csv", "--dim", "2", "--out", "space.json"]);
    let out = w.ok(&["select-anchors", "--space", "space.json", "--n", "8", "--out", "anchors.json"]);
    let curve = String::from_utf8(out.stdout).unwrap();
    assert!(curve.starts_with("step,item_id,gain,cumulative_log_det\n"));
    assert_eq!(curve.lines().count(), 9);

    let anchors: serde_json::Value = serde_json::from_str(&read(&w.path("anchors.json"))).unwrap();
    let ids: Vec<String> = anchors["anchors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["item_id"].as_str().unwrap().to_string())
        .collect();
    let newcomer = w.world.sample_model("newcomer", 3);
    let meas = w.world.measure(&newcomer, &ids, 0).unwrap();
    let mut buf = Vec::new();
    write_measurements(&mut buf, &meas).unwrap();
    fs::write(w.path("measurements.csv"), buf).unwrap();

    w.ok(&[
        "profile-model",
        "--space",
        "space.json",
        "--observations",
        "measurements.csv",
        "--model-id",
        "newcomer",
        "--price-in",
        "1e-6",
        "--price-out",
        "3e-6",
        "--anchor-set-id",
        "default",
        "--out",
        "profile.json",
    ]);
    let p: serde_json::Value = serde_json::from_str(&read(&w.path("profile.json"))).unwrap();
    assert!(p["verbosity"].is_null() && p["latency"].is_null());
    w.ok(&[
        "calibrate-estimators",
        "--space",
        "space.json",
        "--profile",
        "profile.json",
        "--measurements",
        "measurements.csv",
        "--bins",
        "4",
    ]);
    let p: serde_json::Value = serde_json::from_str(&read(&w.path("profile.json"))).unwrap();
    assert_eq!(p["verbosity"]["mean_lengths"].as_array().unwrap().len(), 4);
    assert!(p["latency"]["tpot"].as_f64().unwrap() > 0.0);

    let examples: String = w
        .world
        .items
        .iter()
        .zip(&w.world.texts)
        .map(|(it, text)| serde_json::json!({"id": it.item_id, "text": text}).to_string() + "\n")
        .collect();
    fs::write(w.path("examples.jsonl"), examples).unwrap();
    w.ok(&["train-predictor", "--space", "space.json", "--examples", "examples.jsonl", "--out", "predictor.json"]);

    w.ok(&[
        "init-registry",
        "--space",
        "space.json",
        "--dir",
        "registry",
        "--anchors",
        "anchors.json",
        "--predictor",
        "predictor.json",
    ]);
    w.ok(&["register", "--registry", "registry", "--profile", "profile.json"]);
}

fn write_queries(w: &Workdir) {
    let lines: String = (0..6)
        .map(|k| serde_json::json!({"id": format!("q{k}"), "text": w.world.texts[k]}).to_string() + "\n")
        .collect();
    fs::write(w.path("queries.jsonl"), lines).unwrap();
}

#[test]
fn full_pipeline_routes_and_is_idempotent() {
    let w = Workdir::new();
    build_registry(&w);

    // identical inputs and seeds give identical artifacts
    let space = read(&w.path("space.json"));
    w.ok(&["calibrate", "--responses", "responses.csv", "--dim", "2", "--out", "space2.json"]);
    assert_eq!(space, read(&w.path("space2.json")));
    let predictor = read(&w.path("predictor.json"));
    w.ok(&["train-predictor", "--space", "space.json", "--examples", "examples.jsonl", "--out", "predictor2.json"]);
    assert_eq!(predictor, read(&w.path("predictor2.json")));

    // duplicate registration is refused unless overwriting
    let dup = w.run(&["register", "--registry", "registry", "--profile", "profile.json"]);
    assert!(!dup.status.success());
    assert!(String::from_utf8_lossy(&dup.stderr).contains("duplicate"));
    w.ok(&["register", "--registry", "registry", "--profile", "profile.json", "--overwrite"]);

    write_queries(&w);
    w.ok(&["route", "--registry", "registry", "--queries", "queries.jsonl", "--policy", "max-acc", "--out", "a.csv"]);
    let csv = read(&w.path("a.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("query_id,model_id,p,cost,latency,utility"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("newcomer")));
    w.ok(&["route", "--registry", "registry", "--queries", "queries.jsonl", "--policy", "max-acc", "--out", "b.csv"]);
    assert_eq!(csv, read(&w.path("b.csv")));

    // an impossible accuracy floor is reported as infeasible
    let bad = w.run(&[
        "route",
        "--registry",
        "registry",
        "--queries",
        "queries.jsonl",
        "--weights",
        "0.5,0.3,0.2",
        "--min-accuracy",
        "1.0",
        "--out",
        "c.csv",
    ]);
    assert!(!bad.status.success());
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("infeasible"), "{msg}");
}

#[test]
fn serve_answers_ndjson() {
    let w = Workdir::new();
    build_registry(&w);
    let mut child = Command::new(BIN)
        .args(["serve", "--registry"])
        .arg(w.path("registry"))
        .args(["--port", "0"])
        .env_remove("LATROUTE_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut banner = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut banner).unwrap();
    let addr = banner.trim().strip_prefix("listening on ").expect("banner").to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut ask = |line: String| {
        stream.write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut out = String::new();
        reader.read_line(&mut out).unwrap();
        serde_json::from_str::<serde_json::Value>(&out).unwrap()
    };
    let status = ask(r#"{"op":"status","id":1}"#.into());
    assert_eq!(status["models"], 1);
    assert_eq!(status["has_predictor"], true);
    let resp = ask(
        serde_json::json!({"id": "r1", "queries": [{"id": "a", "text": w.world.texts[0]}], "policy": "balanced"})
            .to_string(),
    );
    assert_eq!(resp["id"], "r1");
    assert_eq!(resp["choices"][0]["model_id"], "newcomer");
    assert_eq!(resp["solver"], "exact");
    let err = ask("{not json".into());
    assert_eq!(err["error"]["code"], 400);
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn simulate_writes_metrics_deterministically() {
    let w = Workdir::new();
    fs::write(
        w.path("scenario.toml"),
        "[simulation]\nexperiment = \"pool\"\n\
         [simulation.world]\nseed = 2\nmodels = 8\nitems = 60\nD = 2\n\
         [simulation.pool]\npool_size = 3\nsteps = 3\nanchors = 10\neval_items = 20\npolicy = \"max-acc\"\n",
    )
    .unwrap();
    w.ok(&["simulate", "--scenario", "scenario.toml", "--out", "m1.csv"]);
    w.ok(&["simulate", "--scenario", "scenario.toml", "--out", "m2.csv"]);
    let m1 = read(&w.path("m1.csv"));
    assert_eq!(m1, read(&w.path("m2.csv")));
    let mut lines = m1.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("step,policy,reward,total_cost,total_latency,pool_hash"));
    assert_eq!(lines.count(), 4);

    fs::write(
        w.path("ablation.toml"),
        "[simulation]\nexperiment = \"ablation\"\n\
         [simulation.world]\nseed = 2\nmodels = 8\nitems = 60\nD = 2\n\
         [simulation.ablation]\nanchors = 5\ntrials = 2\n",
    )
    .unwrap();
    w.ok(&["simulate", "--scenario", "ablation.toml", "--out", "abl.csv"]);
    let abl = read(&w.path("abl.csv"));
    assert_eq!(abl.lines().count(), 1 + 5 * 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let w = Workdir::new();
    let out = w.run(&["calibrate", "--responses", "missing.csv", "--out", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    fs::write(w.path("broken.toml"), "[anchors]\ncuont = 1\n").unwrap();
    let out = Command::new(BIN)
        .args(["--config"])
        .arg(w.path("broken.toml"))
        .args(["select-anchors", "--space", "s.json", "--out", "a.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
