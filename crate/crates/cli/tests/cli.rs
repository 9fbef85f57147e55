use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kltrace_core::model::Checkpoint;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kltrace"))
}

fn tiny_config() -> Value {
    let counts = |n: usize| {
        json!({"translate": n, "rotate_inplace": n, "occluder_pass": n, "textureless_region": n,
               "twin_swap": n, "camera_pan": n})
    };
    json!({
        "seed": 1,
        "workers": 1,
        "data": {
            "world": {"width": 32, "height": 32, "sprite_size": [6, 9], "max_displacement": 6, "min_displacement": 2},
            "train": {"scenarios": counts(2), "queries": {"per_clip": 4}},
            "eval": {"scenarios": counts(1), "queries": {"per_clip": 4}},
            "calibration": {"queries": {"per_clip": 4, "visible_fraction": 0.5}}
        },
        "tokenizer": {"codes": 16, "iters": 3},
        "model": {"layers": 1, "model_dim": 16, "heads": 2},
        "train": {"steps": 6, "batch_size": 2, "heldout_every": 3},
        "ablation": {"variants": ["distributional_random_access", "deterministic_l2"],
                     "reveal_modes": ["random_subset", "full"], "num_masks": [1, 2], "num_scales": [1]}
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "status {:?}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_json(o: &Output) -> Value {
    let line = String::from_utf8_lossy(&o.stderr);
    let last = line.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_seeded_and_honours_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    ok(&run(&["gen-data", "--split", "eval"], &cfg, &a));
    ok(&run(&["gen-data", "--split", "eval"], &cfg, &b));
    ok(&run(&["gen-data", "--split", "eval", "--seed", "2"], &cfg, &c));
    let man = |d: &Path| read(&d.join("data/eval/manifest.json"));
    assert_eq!(man(&a), man(&b));
    let ma: Value = serde_json::from_slice(&man(&a)).unwrap();
    let mc: Value = serde_json::from_slice(&man(&c)).unwrap();
    assert_ne!(ma["clips"][0]["digest"], mc["clips"][0]["digest"]);
    for (k, v) in ma["scenarios"].as_object().unwrap() {
        assert_eq!(v, 1, "{k}");
    }
    assert_eq!(ma["scenarios"].as_object().unwrap().len(), 6);
    let queries = std::fs::read_to_string(a.join("data/eval/queries.jsonl")).unwrap();
    assert_eq!(queries.lines().count(), 24);
    assert!(a.join("config.json").exists());
}

#[test]
fn errors_are_json_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");

    let o = run(&["gen-data", "--set", "trace.no_such_key=1"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("trace.no_such_key"));

    let o = run(&["gen-data", "--set", "data.world.width=30"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));

    let o = bin().args(["gen-data", "--bogus-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "config");

    let o = run(&["fit-tokenizer"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "io");

    std::fs::create_dir_all(out.join("data/train")).unwrap();
    std::fs::write(out.join("data/train/manifest.json"), "{\"version\": 1,").unwrap();
    let o = run(&["fit-tokenizer"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "malformed");

    let bad = write_config(tmp.path(), &json!({"version": 99}));
    let o = run(&["gen-data"], &bad, &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_numerical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    ok(&run(&["gen-data", "--split", "train"], &cfg, &out));
    ok(&run(&["fit-tokenizer"], &cfg, &out));
    let o = run(
        &["train", "--set", "train.lr=1e300", "--set", "train.grad_clip=1e300"],
        &cfg,
        &out,
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"]["kind"], "numerical");
}

#[test]
fn full_pipeline_in_one_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let g = ok(&run(&["gen-data"], &cfg, &out));
    assert_eq!(g["eval"]["queries"], 24);
    let t = ok(&run(&["fit-tokenizer"], &cfg, &out));
    assert_eq!(t["codes"], 16);
    assert!(t["heldout_mse"].is_number());

    let tr = ok(&run(&["train"], &cfg, &out));
    assert_eq!(tr["steps"], 6);
    let loss = std::fs::read_to_string(out.join("loss.jsonl")).unwrap();
    assert_eq!(loss.lines().count(), 6);
    let initial = tr["initial_heldout"].as_f64().unwrap();
    assert!((initial - 16f64.ln()).abs() < 1e-3, "{initial}");

    let e = ok(&run(&["extract", "--workers", "1"], &cfg, &out));
    assert_eq!(e["count"], 24);
    let first = read(&out.join("records.jsonl"));
    ok(&run(&["extract", "--workers", "3"], &cfg, &out));
    assert_eq!(read(&out.join("records.jsonl")), first, "worker count changed the records");
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 24);

    let r = ok(&run(&["eval"], &cfg, &out));
    assert!(r["ad"].as_f64().unwrap() >= 0.0);
    let report: Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    assert_eq!(report["overall"]["queries"], 24);
    assert_eq!(report["per_scenario"].as_object().unwrap().len(), 6);
    assert_eq!(report["resample"], json!([[1.0, 1.0]]));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 6);

    let c = ok(&run(&["calibrate-occlusion"], &cfg, &out));
    assert!(c["threshold"].is_number());
    assert!(out.join("calibration.json").exists());
    ok(&run(&["extract"], &cfg, &out));
    let recs = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    let threshold = c["threshold"].as_f64().unwrap();
    for line in recs.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["occluded"].as_bool().unwrap(), r["confidence"].as_f64().unwrap() < threshold);
    }

    let p = ok(&run(&["plot", "--limit", "2"], &cfg, &out));
    assert_eq!(p["overlays"], 24);
    let plots = out.join("plots");
    assert_eq!(std::fs::read_dir(&plots).unwrap().count(), 24 + 2 + 2);
    let heat = kltrace_core::io::read_frame(&plots.join("heatmap_0000.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (128, 128));
    let before = read(&plots.join("panel_0001.png"));
    ok(&run(&["plot", "--limit", "2"], &cfg, &out));
    assert_eq!(read(&plots.join("panel_0001.png")), before);

    ok(&run(
        &["train", "--checkpoint", out.join("checkpoint-det").to_str().unwrap(), "--set", "model.variant=deterministic_l2"],
        &cfg,
        &out,
    ));
    let a = ok(&run(&["ablate"], &cfg, &out));
    // 2 variants x 2 modes x 2 reveal modes x 2 mask counts x 1 scale count
    assert_eq!(a["rows"], 16);
    let rows: Vec<Value> = serde_json::from_slice(&read(&out.join("ablation.json"))).unwrap();
    assert_eq!(rows.len(), 16);
    let unsupported = rows.iter().filter(|r| r["status"] == "unsupported").count();
    assert_eq!(unsupported, 4, "kl rows of the deterministic model");
    let ads: Vec<f64> = rows.iter().filter_map(|r| r["metrics"]["ad"].as_f64()).collect();
    assert_eq!(ads.len(), 12);
    assert!(ads.windows(2).all(|w| w[0] <= w[1]));
    assert!(rows.iter().any(|r| r["mode"] == "kl" && r["status"] == "ok"));
    assert!(rows.iter().any(|r| r["mode"] == "rgb" && r["variant"] == "distributional_random_access"));
    let ce_rows = rows
        .iter()
        .filter(|r| r["variant"] == "distributional_random_access" && r["reveal_mode"] == "random_subset");
    assert!(ce_rows.into_iter().all(|r| r["heldout_ce"].is_number()));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    ok(&run(&["gen-data", "--split", "train"], &cfg, &out));
    ok(&run(&["fit-tokenizer"], &cfg, &out));
    let whole = out.join("checkpoint-whole");
    let part = out.join("checkpoint-part");
    ok(&run(&["train", "--checkpoint", whole.to_str().unwrap()], &cfg, &out));
    ok(&run(
        &["train", "--checkpoint", part.to_str().unwrap(), "--set", "train.steps=3"],
        &cfg,
        &out,
    ));
    ok(&run(&["train", "--checkpoint", part.to_str().unwrap(), "--resume"], &cfg, &out));
    let a = Checkpoint::load(&whole).unwrap();
    let b = Checkpoint::load(&part).unwrap();
    assert_eq!(b.step, 6);
    assert_eq!(a.model, b.model);
    assert_eq!(a.adam, b.adam);
}

#[test]
fn stored_config_is_reused_and_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    ok(&run(&["gen-data", "--split", "eval", "--set", "trace.num_masks=3"], &cfg, &out));
    let o = bin()
        .args(["gen-data", "--split", "eval", "--quiet", "--set", "trace.sigma=1.5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    ok(&o);
    let stored: Value = serde_json::from_slice(&read(&out.join("config.json"))).unwrap();
    assert_eq!(stored["trace"]["num_masks"], 3);
    assert_eq!(stored["trace"]["sigma"], 1.5);
    assert_eq!(stored["data"]["world"]["width"], 32);
    assert_eq!(stored["version"], 1);
}

#[test]
fn default_run_directory_is_timestamp_and_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let root = tmp.path().join("runs");
    let o = bin()
        .args(["gen-data", "--split", "eval", "--quiet", "--config"])
        .arg(&cfg)
        .arg("--runs-root")
        .arg(&root)
        .output()
        .unwrap();
    ok(&o);
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].to_string_lossy().to_string();
    let (ts, digest) = name.split_once('-').unwrap();
    assert_eq!(ts.len(), 16);
    assert!(ts.ends_with('Z'));
    assert_eq!(digest.len(), 8);
    assert!(root.join(&name).join("config.json").exists());
}
