use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sgr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sgr"));
    cmd.args(args).env("RUST_LOG", "error");
    for var in ["SG_CONFIG", "SG_SEED", "SG_MODEL", "SG_STORE", "SG_MANIFEST", "SG_VECTORS", "SG_TAU", "SG_MODE", "SG_K"] {
        cmd.env_remove(var);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = sgr(&["--help"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("Usage"));
    for sub in ["synth", "ingest", "extract", "train", "embed", "query", "eval", "bench"] {
        let o = sgr(&[sub, "--help"], &[]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = sgr(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = sgr(&["query", "--text", "a lamp on a desk"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--store"), "{}", stderr(&o));
    let o = sgr(&["query", "--store", "/nonexistent/store.bin", "--text", "a lamp on a desk"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--store"), "{}", stderr(&o));
    let o = sgr(&["eval", "--k", "0"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = sgr(&["synth"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    fs::write(&manifest, "not json").unwrap();
    let model = dir.path().join("m.bin");
    let o = sgr(&["train", "--manifest", p(&manifest), "--model", p(&model), "--dim", "8"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn extract_rules_prints_text_graph() {
    let o = sgr(&["extract", "--text", "There is a wooden chair next to a table."], &[]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["objects"][0]["label"], "chair");
    assert_eq!(v["relations"][0][1], "next to");
    let o = sgr(&["extract", "--text", "Hello world."], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 1\n").unwrap();
    let run = |name: &str, args: &[&str], envs: &[(&str, &str)]| {
        let out = dir.path().join(name);
        let mut all = vec!["synth", "--out", p(&out), "--scenes", "10", "--descriptions", "1"];
        all.extend_from_slice(args);
        assert_eq!(sgr(&all, envs).status.code(), Some(0));
        fs::read_to_string(out.join("scenes/scene-0000.json")).unwrap()
    };
    let seed1 = run("s1", &["--seed", "1"], &[]);
    let seed2 = run("s2", &["--seed", "2"], &[]);
    let seed3 = run("s3", &["--seed", "3"], &[]);
    assert_ne!(seed1, seed2);
    let c = p(&cfg);
    assert_eq!(run("a", &["--config", c], &[]), seed1);
    assert_eq!(run("b", &["--config", c], &[("SG_SEED", "2")]), seed2);
    assert_eq!(run("d", &["--config", c, "--seed", "3"], &[("SG_SEED", "2")]), seed3);
}

#[test]
fn ingest_filters_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/3dssg_scene.json");
    let out = dir.path().join("filtered");
    let o = sgr(&["ingest", "--out", p(&out), "--tau", "1.5", p(&fixture)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    // expected counts from scripts/check_scene_fixture.py
    assert_eq!(v[0]["nodes"], 12);
    assert_eq!(v[0]["edges"], 29);
    assert_eq!(v[0]["edges_kept"], 27);
    assert!(out.join(format!("{}.json", v[0]["id"].as_str().unwrap())).exists());
}

/// synth → train (2 epochs) → embed → query → eval → bench.
#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let model = dir.path().join("model.bin");
    let store = dir.path().join("store.bin");
    let curve = dir.path().join("loss.csv");

    let o = sgr(&["synth", "--out", p(&data), "--scenes", "16", "--descriptions", "2", "--seed", "4"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = sgr(
        &[
            "train", "--manifest", p(&manifest), "--model", p(&model), "--dim", "32", "--hidden", "16", "--epochs", "2",
            "--batch-size", "4", "--seed", "4", "--loss-csv", p(&curve),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines = fs::read_to_string(&curve).unwrap().lines().count();
    assert_eq!(lines, 1 + 2 * (32 / 4));

    let o = sgr(&["embed", "--model", p(&model), "--manifest", p(&manifest), "--store", p(&store), "--seed", "4"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scenes"], 16);
    assert_eq!(fs::metadata(&store).unwrap().len(), v["bytes"].as_u64().unwrap());

    let descriptions: Value = serde_json::from_str(&fs::read_to_string(data.join("descriptions.json")).unwrap()).unwrap();
    let first = &descriptions[0];
    for mode in ["ret-based", "cos-sim", "match-prob"] {
        let o = sgr(
            &[
                "query", "--model", p(&model), "--manifest", p(&manifest), "--store", p(&store), "--mode", mode,
                "--text", first["description"].as_str().unwrap(),
            ],
            &[],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let ranked = v["ranked"].as_array().unwrap();
        assert_eq!(ranked.len(), 16);
        assert!(ranked.iter().any(|r| r["scene_id"] == first["scene_id"]));
        let scores: Vec<f64> = ranked.iter().map(|r| r["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    let eval = |out: &Path| {
        let o = sgr(
            &["eval", "--model", p(&model), "--manifest", p(&manifest), "--trials", "50", "--seed", "9", "--out", p(out)],
            &[],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let a = eval(&dir.path().join("a.csv"));
    let b = eval(&dir.path().join("b.csv"));
    assert_eq!(a, b);
    let csv = String::from_utf8(a).unwrap();
    assert!(csv.starts_with("mode,top-1,top-2,top-3,top-5\nmatch-prob,"));
    assert_eq!(csv.lines().count(), 4);

    let o = sgr(
        &["bench", "--model", p(&model), "--manifest", p(&manifest), "--store", p(&store), "--queries", "5", "--repetitions", "2"],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["store_bytes"], v["store_file_bytes"]);
    assert!(v["median_query_seconds"].as_f64().unwrap() > 0.0);
}
