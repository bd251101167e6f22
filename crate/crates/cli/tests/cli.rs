use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fairrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairrec")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

fn synth_dataset(dir: &Path) -> String {
    let data = dir.join("data");
    let out = fairrec(&["synth", "--users", "60", "--items", "200", "--seed", "2", "--dir", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    format!(
        "[dataset]\nformat = \"movielens\"\nratings = {:?}\ntitles = {:?}\n",
        data.join("ratings.csv"),
        data.join("movies.csv")
    )
}

#[test]
fn simulated_run_produces_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("seed = 9\nsimulate = true\n{}", synth_dataset(dir.path())));
    let out_dir = dir.path().join("out");
    let out = fairrec(&["run", "-c", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FairLRM (82)"));
    for name in ["table.csv", "table.json", "table.md", "manifest.json", "exposure_vanilla.csv"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    assert!(!out_dir.join("INCOMPLETE").exists());
}

#[test]
fn missing_dataset_names_ingest_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "simulate = true\n[dataset]\nformat = \"movielens\"\nratings = \"/nonexistent/ratings.csv\"\n",
    );
    let out = fairrec(&["run", "-c", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ingest stage failed"), "{stderr}");
    assert!(stderr.contains("/nonexistent/ratings.csv"), "{stderr}");
}

#[test]
fn stage_subcommands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("simulate = true\n{}", synth_dataset(dir.path())));
    let out_dir = dir.path().join("stages");
    let o = out_dir.to_str().unwrap();
    for cmd in ["partition", "segment", "prompts", "query", "score"] {
        let out = fairrec(&[cmd, "-c", &cfg, "--out", o]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["partition.csv", "segments_55.csv", "segments_82.csv", "prompts.jsonl", "responses.jsonl", "table.csv"]
    {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    let stats = fairrec(&["ingest-stats", "-c", &cfg, "--json"]);
    assert!(stats.status.success());
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["raw"]["users"], 60);
}

#[test]
fn warm_cache_rerun_needs_no_provider() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = synth_dataset(dir.path());
    let cache = dir.path().join("cache.jsonl");
    // seed the cache by recording canned responses for every prompt
    let sim_cfg = write_config(dir.path(), &format!("simulate = true\n{dataset}"));
    let prompts_dir = dir.path().join("p");
    assert!(fairrec(&["query", "-c", &sim_cfg, "--out", prompts_dir.to_str().unwrap()]).status.success());
    let prompts = fs::read_to_string(prompts_dir.join("prompts.jsonl")).unwrap();
    let responses = fs::read_to_string(prompts_dir.join("responses.jsonl")).unwrap();
    let mut lines = String::new();
    for (p, r) in prompts.lines().zip(responses.lines()) {
        let p: serde_json::Value = serde_json::from_str(p).unwrap();
        let r: serde_json::Value = serde_json::from_str(r).unwrap();
        let prompt = p["prompt"].as_str().unwrap();
        let record = serde_json::json!({
            "prompt_hash": fairrec_core::recclient::prompt_hash("offline-model", prompt),
            "model": "offline-model",
            "raw_response": r["raw_response"],
            "returned_model": "offline-model-0001",
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    fs::write(&cache, lines).unwrap();

    let live = format!(
        "cache = {cache:?}\n[provider]\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel = \"offline-model\"\napi_key_env = \"FAIRREC_TEST_UNSET_KEY\"\n{dataset}"
    );
    let cfg = write_config(dir.path(), &live);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = fairrec(&["run", "-c", &cfg, "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["table.csv", "manifest.json", "metrics.json", "exposure_fairlrm_55.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("offline-model-0001"));
}
