use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use lgcav_cli::{execute, Cli, CliError};
use lgcav_core::cavtrain::Cav;
use lgcav_core::embedstore::{load_matrix, save_matrix};
use lgcav_core::metrics::{evaluate, EvalContext};
use lgcav_core::{ConceptSpec, EmbeddingMatrix, LinearHead, PairSet, PairSource};
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(args: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut argv = vec!["lgcav"];
    argv.extend_from_slice(args);
    execute(&Cli::parse_from(argv))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic world in `dir`; returns its generated config path.
fn small_world(dir: &Path) -> PathBuf {
    let cfg = json!({
        "synth": {
            "world": {"d_target": 16, "d_vl": 24, "n_images": 400, "n_concepts": 4, "head_epochs": 100},
            "examples": 10
        },
        "train": {"probes": 100}
    });
    let synth_cfg = dir.join("synth.json");
    fs::write(&synth_cfg, cfg.to_string()).unwrap();
    let world = dir.join("world");
    run(&["synth", "--config", s(&synth_cfg), "--out", s(&world)]).unwrap();
    world.join("config.json")
}

fn edit(path: &Path, f: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    let out = path.with_file_name(format!("edited-{}.json", rand_name(&v)));
    fs::write(&out, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    out
}

fn rand_name(v: &Value) -> String {
    format!("{:016x}", v.to_string().bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3)))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_writes_a_loadable_world() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let world = cfg.parent().unwrap();
    for f in ["target_features.bin", "vl_image_features.bin", "manifest.json", "pairs.json", "head.bin", "head.json", "similarity.bin", "synth.json", "synth.txt"] {
        assert!(world.join(f).is_file(), "{f} missing");
    }
    let specs: Vec<_> = fs::read_dir(world.join("concepts")).unwrap().collect();
    // spec json + prompts bin + prompts id sidecar per concept
    assert_eq!(specs.len(), 4 * 3);
    let v = read_json(&cfg);
    assert_eq!(v["seeds"], json!([0]));
    assert_eq!(v["train"]["probes"], json!(100));
}

#[test]
fn train_eval_correct_pipeline_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| v["seeds"] = json!([0, 1]));
    let run_dir = cfg.parent().unwrap().join("run");
    let pipeline = || {
        for cmd in ["train", "eval", "correct"] {
            run(&[cmd, "--config", s(&cfg)]).unwrap();
        }
        ["train.json", "eval.json", "correct.json", "eval.csv", "cavs/seed-1/concept_02.json", "heads/seed-0/head.json"]
            .map(|f| fs::read(run_dir.join(f)).unwrap())
    };
    let first = pipeline();
    let second = pipeline();
    assert_eq!(first, second);

    let train = read_json(&run_dir.join("train.json"));
    assert_eq!(train["command"], "train");
    assert_eq!(train["config"]["seeds"], json!([0, 1]));
    assert_eq!(train["concepts"].as_array().unwrap().len(), 4);
    assert!(train["concepts"][0]["final_loss"]["std"].is_number());

    let eval = read_json(&run_dir.join("eval.json"));
    for m in ["concept_accuracy", "concept_to_class", "tcav_score", "recall_at_k"] {
        assert!(eval["summary"][m]["mean"].is_number(), "{m}");
    }
    let txt = fs::read_to_string(run_dir.join("eval.txt")).unwrap();
    assert!(txt.contains("concept accuracy"));
}

#[test]
fn jobs_flag_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let run_dir = cfg.parent().unwrap().join("run");
    run(&["train", "--config", s(&cfg), "--jobs", "1"]).unwrap();
    let one = fs::read(run_dir.join("train.json")).unwrap();
    run(&["train", "--config", s(&cfg), "--jobs", "3"]).unwrap();
    assert_eq!(one, fs::read(run_dir.join("train.json")).unwrap());
}

#[test]
fn lg_mode_single_concept_writes_one_cav() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| {
        v["data"]["concepts"] = json!(["concepts/concept_01.json"]);
        v["train"]["mode"] = json!("lg");
    });
    let files = run(&["train", "--config", s(&cfg)]).unwrap();
    let cav_files: Vec<_> = files.iter().filter(|f| f.to_string_lossy().contains("cavs")).collect();
    assert_eq!(cav_files.len(), 1);
    let cav = Cav::load(cav_files[0]).unwrap();
    assert_eq!(cav.concept, "concept_01");
    assert_eq!(cav.bias, None);
    let report = read_json(&cfg.parent().unwrap().join("run/train.json"));
    assert_eq!(report["mode"], "lg");
}

#[test]
fn eval_matches_direct_library_calls() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    run(&["train", "--config", s(&cfg)]).unwrap();
    run(&["eval", "--config", s(&cfg)]).unwrap();
    let world = cfg.parent().unwrap();
    let report = read_json(&world.join("run/eval.json"));

    let target = load_matrix(&world.join("target_features.bin")).unwrap();
    let head = LinearHead::load(&world.join("head")).unwrap();
    let pairs = PairSet::load(&world.join("pairs.json")).unwrap();
    let names = ["concept_00", "concept_01", "concept_02", "concept_03"];
    let specs: Vec<ConceptSpec> = names
        .iter()
        .map(|n| ConceptSpec::load(&world.join(format!("concepts/{n}.json"))).unwrap())
        .collect();
    let cavs: Vec<Cav> = names
        .iter()
        .map(|n| Cav::load(&world.join(format!("run/cavs/seed-0/{n}.json"))).unwrap())
        .collect();
    let direct = evaluate(
        &cavs,
        &specs,
        &EvalContext {
            target: &target,
            head: Some(&head),
            pairs: Some(&pairs),
            recall_k: 100,
        },
    )
    .unwrap();
    let seed0 = &report["seeds"][0];
    assert_eq!(seed0["concept_accuracy"].as_f64(), direct.concept_accuracy);
    assert_eq!(seed0["concept_to_class"].as_f64(), direct.concept_to_class);
    assert_eq!(seed0["tcav_score"].as_f64(), direct.tcav_score);
    assert_eq!(seed0["recall_at_k"].as_f64(), direct.recall_at_k);
}

#[test]
fn empty_pair_set_omits_head_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let world = cfg.parent().unwrap();
    PairSet {
        source: PairSource::Explicit,
        pairs: vec![],
    }
    .save(&world.join("empty_pairs.json"))
    .unwrap();
    let cfg = edit(&cfg, |v| v["data"]["pairs"] = json!("empty_pairs.json"));
    run(&["train", "--config", s(&cfg)]).unwrap();
    run(&["eval", "--config", s(&cfg)]).unwrap();
    let report = read_json(&world.join("run/eval.json"));
    assert!(report["summary"]["concept_to_class"].is_null());
    assert!(report["summary"]["tcav_score"].is_null());
    assert!(report["summary"]["concept_accuracy"]["mean"].is_number());
}

#[test]
fn requested_concept_to_class_without_similarity_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| {
        v["data"]["pairs"] = Value::Null;
        v["data"]["similarity"] = Value::Null;
        v["eval"]["concept_to_class"] = json!(true);
    });
    let err = run(&["eval", "--config", s(&cfg)]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("similarity"), "{err}");
}

#[test]
fn validation_lists_every_problem() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(
        &cfg,
        json!({"seeds": [], "train": {"probes": 7, "epochs": 0, "examples": 0}, "eval": {"epsilon": 1.5, "recall_k": 0}}).to_string(),
    )
    .unwrap();
    let CliError::Config(issues) = run(&["train", "--config", s(&cfg)]).unwrap_err() else {
        panic!("expected a config error");
    };
    for key in ["seeds", "data.target_features", "data.vl_image_features", "data.concepts", "train.probes", "train.epochs", "train.examples", "eval.epsilon", "eval.recall_k"] {
        assert!(issues.iter().any(|i| i.starts_with(key)), "{key} not reported in {issues:?}");
    }
}

#[test]
fn correct_with_zero_epochs_changes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| v["correct"]["epochs"] = json!(0));
    run(&["train", "--config", s(&cfg)]).unwrap();
    run(&["correct", "--config", s(&cfg)]).unwrap();
    let world = cfg.parent().unwrap();
    let report = read_json(&world.join("run/correct.json"));
    let r = &report["runs"][0];
    assert_eq!(r["test_before"], r["test_after"]);
    assert_eq!(r["test_before"], r["test_uniform"]);
    let before = LinearHead::load(&world.join("head")).unwrap();
    let after = LinearHead::load(&world.join("run/heads/seed-0/head")).unwrap();
    assert_eq!(before, after);
    assert!(!report["confused_prompts"].as_array().unwrap().is_empty());
    let prompt = report["confused_prompts"][0]["prompt"].as_str().unwrap();
    assert!(prompt.starts_with("a photo of class_00, not class_"), "{prompt}");
}

#[test]
fn sweep_grid_is_deduplicated() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| {
        v["sweep"] = json!({"strategies": ["activation", "random", "activation"], "probes": [20, 40, 40, 60], "lambdas": []});
        v["train"]["epochs"] = json!(20);
    });
    run(&["sweep", "--config", s(&cfg)]).unwrap();
    let csv = fs::read_to_string(cfg.parent().unwrap().join("run/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6, "{csv}");
    assert!(lines[0].starts_with("strategy,probes,lambda,seeds,accuracy_mean"));
    assert!(lines[1].starts_with("activation,20,"));
    assert!(lines[4].starts_with("random,20,"));
}

#[test]
fn sweep_rejects_original_mode() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let cfg = edit(&cfg, |v| v["train"]["mode"] = json!("original"));
    let err = run(&["sweep", "--config", s(&cfg)]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn probes_report_lists_each_probe() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    run(&["probes", "--config", s(&cfg)]).unwrap();
    let report = read_json(&cfg.parent().unwrap().join("run/probes.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4 * 100);
    let w: f64 = rows[..100].iter().map(|r| r["weight"].as_f64().unwrap()).sum();
    assert!((w / 100.0 - 1.0).abs() < 1e-9);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_lgcav");
    let tmp = TempDir::new().unwrap();
    let cfg = small_world(tmp.path());
    let world = cfg.parent().unwrap();

    let code = |args: &[&str]| Process::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["train", "--config", s(&cfg)]), Some(0));
    assert_eq!(code(&["train"]), Some(2));

    // A corrupt feature file is a data error.
    let broken = world.join("broken.bin");
    fs::write(&broken, b"LGCVgarbage").unwrap();
    let bad_data = edit(&cfg, |v| v["data"]["target_features"] = json!("broken.bin"));
    assert_eq!(code(&["train", "--config", s(&bad_data)]), Some(3));

    // All-zero prompt embeddings have no direction: a numeric failure.
    let spec = ConceptSpec::load(&world.join("concepts/concept_00.json")).unwrap();
    let zeros = EmbeddingMatrix::new(spec.prompts.ids().to_vec(), spec.prompts.cols(), vec![0.0; spec.prompts.data().len()]).unwrap();
    save_matrix(&zeros, &world.join("concepts/zero.prompts.bin")).unwrap();
    let mut v = read_json(&world.join("concepts/concept_00.json"));
    v["prompt_embeddings"] = json!("zero.prompts.bin");
    fs::create_dir_all(world.join("zero")).unwrap();
    fs::write(world.join("zero/concept_00.json"), v.to_string()).unwrap();
    fs::copy(world.join("concepts/zero.prompts.bin"), world.join("zero/zero.prompts.bin")).unwrap();
    fs::copy(world.join("concepts/zero.prompts.ids.json"), world.join("zero/zero.prompts.ids.json")).unwrap();
    let numeric = edit(&cfg, |v| v["data"]["concepts"] = json!(["zero/concept_00.json"]));
    assert_eq!(code(&["train", "--config", s(&numeric)]), Some(4));
}
