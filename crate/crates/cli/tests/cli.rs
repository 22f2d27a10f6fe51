use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use otter_core::fixture::fixture_corpus;
use otter_core::mimicit::{build_context_same_image, GroupingConfig, Heuristic};
use otter_core::verify::oracle;

const SMALL: &[&str] = &[
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.n_latents=4",
    "--set",
    "model.image_size=16",
];

fn otter(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otter"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("OTTER_OUT_DIR")
        .output()
        .expect("run otter")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn fixture_root(image_size: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(otter(dir.path(), &["fixture", "--image-size", image_size]));
    dir
}

#[test]
fn build_data_is_deterministic_and_matches_oracle_counts() {
    let a = fixture_root("32");
    let b = fixture_root("32");
    let out_a = stdout(&ok(otter(a.path(), &["build-data"])));
    ok(otter(b.path(), &["build-data"]));
    let manifest = |d: &Path| fs::read_to_string(d.join("out/shards/manifest.json")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    assert_eq!(
        fs::read(a.path().join("out/shards/shard-00000.bin")).unwrap(),
        fs::read(b.path().join("out/shards/shard-00000.bin")).unwrap()
    );

    let (triplets, _) = fixture_corpus(32).unwrap();
    let expected = oracle::assemble(&triplets, &GroupingConfig::default(), &Heuristic::ALL);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &expected {
        *counts.entry(s.1.as_str()).or_default() += 1;
    }
    for (h, n) in &counts {
        assert!(out_a.contains(&format!("  {h} {n}\n")), "{h} {n} missing from:\n{out_a}");
    }
    assert!(out_a.contains(&format!("samples {} ", expected.len())), "{out_a}");
}

#[test]
fn empty_corpus_writes_no_shards_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("data/images")).unwrap();
    fs::write(dir.path().join("data/triplets.jsonl"), "").unwrap();
    let o = ok(otter(dir.path(), &["build-data"]));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let m = fs::read_to_string(dir.path().join("out/shards/manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert_eq!(m["total_samples"], 0);
    assert_eq!(m["shards"].as_array().unwrap().len(), 0);
}

#[test]
fn malformed_corpus_and_missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = otter(dir.path(), &["build-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("triplets.jsonl"), "{}", stderr(&o));

    fs::create_dir_all(dir.path().join("data/images")).unwrap();
    fs::write(dir.path().join("data/triplets.jsonl"), "{\"id\": \"a\"}\n").unwrap();
    let o = otter(dir.path(), &["build-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn train_echoes_defaults_and_reports_missing_shards() {
    let dir = tempfile::tempdir().unwrap();
    let o = otter(dir.path(), &["train"]);
    assert!(stdout(&o).contains("lr=1e-5 batch=4 epochs=6 clip=1.0"), "{}", stdout(&o));
    assert_eq!(o.status.code(), Some(1));
    let shards = dir.path().join("out/shards");
    assert!(stderr(&o).contains(&shards.display().to_string()), "{}", stderr(&o));
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = otter(dir.path(), &["--config", "run.toml", "config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    fs::write(dir.path().join("run.toml"), "seed = 3\n[train]\nlr = 0.5\n").unwrap();
    let o = ok(otter(dir.path(), &["--config", "run.toml", "--set", "train.epochs=2", "config"]));
    let text = stdout(&o);
    assert!(text.contains("lr = 0.5") && text.contains("epochs = 2") && text.contains("seed = 3"), "{text}");
}

#[test]
fn out_dir_override_moves_outputs() {
    let dir = fixture_root("16");
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_otter"))
        .arg("--root")
        .arg(dir.path())
        .arg("build-data")
        .env("OTTER_OUT_DIR", out.path())
        .output()
        .unwrap();
    ok(o);
    assert!(out.path().join("shards/manifest.json").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn resume_continues_bit_identically() {
    let train_args = |extra: &[&'static str]| {
        let mut v = with_small(&["train", "--set", "train.epochs=3", "--set", "train.lr=0.001"]);
        v.extend_from_slice(extra);
        v
    };
    let full = fixture_root("16");
    ok(otter(full.path(), &with_small(&["build-data"])));
    ok(otter(full.path(), &train_args(&[])));

    let parts = fixture_root("16");
    ok(otter(parts.path(), &with_small(&["build-data"])));
    let o = ok(otter(parts.path(), &train_args(&["--stop-after", "6"])));
    assert!(stdout(&o).contains("stopped at step 6"), "{}", stdout(&o));
    assert!(!parts.path().join("out/checkpoints/final").exists());
    let o = ok(otter(parts.path(), &train_args(&["--resume"])));
    assert!(stdout(&o).contains("resuming at step 6"), "{}", stdout(&o));

    for f in ["final/params.bin", "final/optimizer.bin", "final/manifest.json", "train_log.csv"] {
        let a = fs::read(full.path().join("out/checkpoints").join(f)).unwrap();
        let b = fs::read(parts.path().join("out/checkpoints").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn non_finite_loss_exits_two() {
    let dir = fixture_root("16");
    ok(otter(dir.path(), &with_small(&["build-data"])));
    let o = otter(
        dir.path(),
        &with_small(&["train", "--set", "train.lr=1e30", "--set", "train.weight_decay=0.0"]),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
}

#[test]
fn overfit_checkpoint_generates_training_answers() {
    let dir = fixture_root("16");
    let small = ["--set", "model.image_size=16", "--set", "train.lr=0.003", "--set", "train.epochs=100"];
    let mut args = vec!["build-data"];
    args.extend_from_slice(&small);
    ok(otter(dir.path(), &args));
    let mut args = vec!["train"];
    args.extend_from_slice(&small);
    ok(otter(dir.path(), &args));

    let mut args = vec!["eval"];
    args.extend_from_slice(&small);
    let o = ok(otter(dir.path(), &args));
    assert!(stdout(&o).contains("exact_match 13/13"), "{}", stdout(&o));

    // the same-image training sample for inst-1, rebuilt as a prompt
    let (triplets, _) = fixture_corpus(16).unwrap();
    let sample = build_context_same_image(&triplets, &GroupingConfig::default())
        .into_iter()
        .find(|s| s.query.id == "inst-1")
        .unwrap();
    let shots: Vec<String> = sample
        .context
        .iter()
        .map(|c| format!("{}::{}::{}", c.image_refs.join(","), c.instruction, c.answer))
        .collect();
    let mut args = vec!["generate", "--image", "img-shared", "--instruction", "What color is it?"];
    for s in &shots {
        args.extend_from_slice(&["--shot", s]);
    }
    args.extend_from_slice(&small);
    let o = ok(otter(dir.path(), &args));
    assert_eq!(stdout(&o).trim_end(), " purple");
}

#[test]
fn generate_rejects_zero_tokens_and_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let o = otter(dir.path(), &["generate", "--instruction", "hi", "--max-new-tokens", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max-new-tokens"), "{}", stderr(&o));

    let o = otter(dir.path(), &["generate", "--instruction", "hi"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));

    let dir = fixture_root("16");
    ok(otter(dir.path(), &with_small(&["build-data"])));
    ok(otter(dir.path(), &with_small(&["train", "--set", "train.epochs=1"])));
    let manifest = dir.path().join("out/checkpoints/final/manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
    let o = otter(dir.path(), &with_small(&["generate", "--instruction", "hi", "--image", "img-0"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}

#[test]
fn inspect_shows_tokens_mask_and_routing() {
    let dir = fixture_root("16");
    ok(otter(dir.path(), &with_small(&["build-data"])));
    let o = ok(otter(dir.path(), &with_small(&["inspect", "--id", "vid-4/sequential"])));
    let text = stdout(&o);
    assert!(text.starts_with("vid-4/sequential: "), "{text}");
    assert!(text.contains("[image]") && text.contains("[answer]") && text.contains("[endofchunk]"));
    // query_only: " dot" plus the closing [endofchunk]
    assert!(text.contains(", 5 supervised, 3 media"), "{text}");
    let o = otter(dir.path(), &with_small(&["inspect", "--id", "nope"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_and_catches_an_unfrozen_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(otter(dir.path(), &["verify"]));
    let text = stdout(&o);
    assert!(text.contains("all 9 properties passed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");

    let o = otter(dir.path(), &["verify", "--fault", "unfreeze-vision"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL freeze-invariance"), "{}", stdout(&o));
    assert!(stderr(&o).contains("freeze-invariance"), "{}", stderr(&o));
}
