use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multisum::corpus::synth::SynthConfig;
use multisum::corpus::CorpusLimits;
use multisum::decoding::Preset;
use multisum::image::ImageConfig;
use multisum::pipeline::{StageConfig, TrainConfig};
use multisum::seq_model::ModelConfig;
use multisum_cli::config::{DecodeSection, SEED_ENV};
use multisum_cli::{content_hash, RunConfig};

fn multisum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multisum")).args(args).env_remove(SEED_ENV).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A configuration small enough to train all four stages in seconds.
fn tiny_config(corpus: &Path) -> RunConfig {
    let stage = |epochs| StageConfig { epochs, batch_size: 4, lr: 2e-3, ..StageConfig::full_scale(1) };
    let mut cfg = RunConfig {
        synth: SynthConfig { entities: 8, reviews_per_entity: 3, image_size: 8, ..SynthConfig::default() },
        limits: CorpusLimits { image_height: 8, image_width: 8, ..CorpusLimits::default() },
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            layers_enc: 1,
            layers_dec: 1,
            ffn: 32,
            max_len: 48,
            image: ImageConfig { height: 8, width: 8, block_channels: [4, 4, 8, 4], ..ImageConfig::default() },
            ..ModelConfig::default()
        },
        train: TrainConfig { stage0: stage(1), stage1: stage(1), stage2: stage(1), stage3: stage(1), ..TrainConfig::default() },
        decode: DecodeSection { max_len: Some(12), ..DecodeSection::default() },
        ..RunConfig::default()
    };
    cfg.corpus.path = Some(corpus.to_path_buf());
    cfg.corpus.val_fraction = 0.25;
    cfg
}

/// Writes a tiny corpus and config into `dir`.
fn setup(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus.jsonl");
    let cfg = tiny_config(&corpus);
    let cfg_path = dir.join("run.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    ok(multisum(&["synth", "--config", s(&cfg_path), "--out", s(&corpus)]));
    cfg_path
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let [a, b, c] = ["a", "b", "c"].map(|n| dir.path().join(format!("{n}.jsonl")));
    let ha = ok(multisum(&["synth", "--out", s(&a), "--seed", "3", "--entities", "5"]));
    let hb = ok(multisum(&["synth", "--out", s(&b), "--seed", "3", "--entities", "5"]));
    let hc = ok(multisum(&["synth", "--out", s(&c), "--seed", "4", "--entities", "5"]));
    let hash = |out: &str| out.split_whitespace().next().unwrap().to_string();
    assert_eq!(hash(&ha), hash(&hb));
    assert_ne!(hash(&ha), hash(&hc));
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(hash(&ha), content_hash(&bytes));
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 5);
}

#[test]
fn seed_resolution_prefers_flag_over_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join("x.jsonl");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_multisum"));
        cmd.args(["synth", "--out", s(&out), "--entities", "3"]).env_remove(SEED_ENV);
        if let Some(e) = env {
            cmd.env(SEED_ENV, e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        ok(cmd.output().unwrap()).split_whitespace().next().unwrap().to_string()
    };
    assert_eq!(run(Some("9"), None), run(None, Some("9")));
    assert_eq!(run(Some("9"), Some("2")), run(None, Some("2")));
    assert_ne!(run(Some("9"), None), run(None, None));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = multisum(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(multisum(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(multisum(&["train", "--run-dir", "x", "--stages", "zero"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = multisum(&["train", "--run-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));

    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let out = multisum(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--stages", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1 checkpoint"));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("c.jsonl"));
    cfg.limits.rating_step = None;
    cfg.decode = DecodeSection { preset: Preset::Amazon, beam_size: Some(3), length_penalty: None, max_len: Some(20) };
    cfg.set_seed(99);
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    let default = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&default.to_toml()).unwrap(), default);
    assert!(RunConfig::from_toml("no_such_key = 1").is_err());
    let minimal = "seed = 17\n[corpus]\npath = \"corpus.jsonl\"\nval_fraction = 0.1\nvocab_size = 1000\n[decode]\npreset = \"yelp\"\n";
    let m = RunConfig::from_toml(minimal).unwrap();
    assert_eq!((m.seed, m.decode.preset, m.train.clone()), (17, Preset::Yelp, TrainConfig::default()));
}

#[test]
fn train_generate_evaluate_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let out = ok(multisum(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--seed", "5"]));
    assert_eq!(out.matches("stage ").count(), 5, "{out}");
    for f in ["config.toml", "vocab.json", "corpus.sha256", "metrics.jsonl", "stage0.ckpt", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let snapshot = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snapshot.seed, 5);
    assert!(snapshot.model.vocab_size > 0);
    let corpus_hash = fs::read_to_string(run.join("corpus.sha256")).unwrap();
    assert_eq!(corpus_hash.trim(), content_hash(&fs::read(dir.path().join("corpus.jsonl")).unwrap()));

    // Re-running from the snapshot reproduces the metrics log.
    let again = dir.path().join("again");
    ok(multisum(&["train", "--config", s(&run.join("config.toml")), "--run-dir", s(&again)]));
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(again.join("metrics.jsonl")).unwrap());

    ok(multisum(&["generate", "--run-dir", s(&run)]));
    let generated = fs::read_to_string(run.join("generated.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = generated.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert!(l["entity_id"].is_string() && l["summary"].is_string() && l["pruned_fallback"].is_boolean());
    }

    let refs: String = lines
        .iter()
        .map(|l| format!("{}\n", serde_json::json!({"entity_id": l["entity_id"], "references": ["the food was good .", "service was slow ."]})))
        .collect();
    let refs_path = dir.path().join("refs.jsonl");
    fs::write(&refs_path, refs).unwrap();
    let base = dir.path().join("base.jsonl");
    let base_lines: String = lines
        .iter()
        .map(|l| format!("{}\n", serde_json::json!({"entity_id": l["entity_id"], "summary": "service was slow .", "pruned_fallback": false})))
        .collect();
    fs::write(&base, base_lines).unwrap();
    ok(multisum(&[
        "evaluate", "--run-dir", s(&run), "--references", s(&refs_path), "--preset", "amazon", "--baseline", s(&base), "--resamples", "200",
    ]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for key in ["rouge1", "rouge2", "rougeL", "per_entity", "significance"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["references"], "max");
    assert_eq!(report["per_entity"].as_array().unwrap().len(), 2);

    ok(multisum(&["inspect-gates", "--run-dir", s(&run), "--limit", "1"]));
    let csv = fs::read_to_string(run.join("gates.csv")).unwrap();
    assert!(csv.starts_with("entity_id,position,token,alpha,beta\n"));
    assert!(fs::read_to_string(run.join("gates.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn text_only_model_has_all_zero_gates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    ok(multisum(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--stages", "1,3", "--no-image", "--no-table"]));
    assert!(!run.join("stage0.ckpt").exists() && !run.join("stage2.ckpt").exists());
    let out = multisum(&["inspect-gates", "--run-dir", s(&run)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("text-only"));
    ok(out);
    let csv = fs::read_to_string(run.join("gates.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for r in rows {
        let cols: Vec<&str> = r.rsplitn(3, ',').collect();
        assert_eq!((cols[0], cols[1]), ("0", "0"), "{r}");
    }
}
