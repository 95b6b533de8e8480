use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use sar2eo::config::RunConfig;
use sar2eo::dataio::{load_tile, save_tile};
use sar2eo::discriminator::Discriminator;
use sar2eo::generator::Generator;
use sar2eo::interpretability::{SiameseConfig, SiameseEmbedder, REPORT_FILES};
use sar2eo::preprocess::assemble_triplet;
use sar2eo::synth::{synthetic_pair, write_synthetic_dataset};
use sar2eo::{Error, ValueRange};
use sar2eo_cli::{exit_code, main_with, sidecar, EXIT_INVALID, EXIT_MISSING_ASSET, EXIT_NON_FINITE, EXIT_OK};

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("sar2eo").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_overrides() -> Vec<String> {
    vec!["train.toy_mode=true".into()]
}

fn save_generator(dir: &Path, overrides: &[String]) -> PathBuf {
    let cfg = RunConfig::resolve(None, overrides).unwrap();
    let p = dir.join("g.safetensors");
    Generator::new(cfg.generator, DType::F32, 5).unwrap().save(&p).unwrap();
    p
}

fn save_sar(dir: &Path, size: usize, name: &str) -> PathBuf {
    let (sar, _) = synthetic_pair(size, 3).unwrap();
    let p = dir.join(name);
    save_tile(&sar, &p).unwrap();
    p
}

fn index_rows(out: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(out.join("index.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_empty_manifest_writes_empty_index() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.jsonl");
    fs::write(&m, "").unwrap();
    let out = dir.path().join("prep");
    assert_eq!(run(&["prepare", "--manifest", s(&m), "--out", s(&out)]), EXIT_OK);
    assert!(index_rows(&out).is_empty());
    assert!(out.join("provenance.json").exists());
}

#[test]
fn prepare_writes_four_assets_per_entry_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_synthetic_dataset(&dir.path().join("data"), 3, 2, 48, 1).unwrap();
    let out = dir.path().join("prep");
    assert_eq!(run(&["prepare", "--manifest", s(&m), "--out", s(&out)]), EXIT_OK);
    let rows = index_rows(&out);
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let assets = row["assets"].as_object().unwrap();
        let mut names: Vec<_> = assets.keys().cloned().collect();
        names.sort();
        assert_eq!(names, ["edge", "gray", "rgb", "target"]);
        for file in assets.values() {
            assert!(out.join(file.as_str().unwrap()).exists());
        }
    }
    let first = fs::read(out.join("index.jsonl")).unwrap();
    assert_eq!(run(&["prepare", "--manifest", s(&m), "--out", s(&out)]), EXIT_OK);
    assert_eq!(fs::read(out.join("index.jsonl")).unwrap(), first);
}

#[test]
fn prepare_reports_rejected_entries_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_synthetic_dataset(dir.path(), 2, 2, 32, 2).unwrap();
    let mut text = fs::read_to_string(&m).unwrap();
    text.push_str(
        r#"{"sar_path":"missing_sar.png","eo_path":"missing_eo.png","split":"test","acquisition_gap_days":0.0}"#,
    );
    text.push('\n');
    fs::write(&m, text).unwrap();
    let out = dir.path().join("prep");
    assert_eq!(run(&["prepare", "--manifest", s(&m), "--out", s(&out)]), EXIT_INVALID);
    assert_eq!(index_rows(&out).len(), 2);
}

#[test]
fn missing_manifest_is_a_missing_asset() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("nope.jsonl");
    let out = dir.path().join("out");
    assert_eq!(run(&["prepare", "--manifest", s(&m), "--out", s(&out)]), EXIT_MISSING_ASSET);
    assert_eq!(run(&["train", "--manifest", s(&m), "--out", s(&out)]), EXIT_MISSING_ASSET);
    assert!(!out.exists());
}

#[test]
fn unknown_override_and_bad_flags_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.jsonl");
    fs::write(&m, "").unwrap();
    let out = dir.path().join("prep");
    let args = ["--overrides", "train.no_such_key=1", "prepare", "--manifest", s(&m), "--out", s(&out)];
    assert_eq!(run(&args), EXIT_INVALID);
    assert_eq!(run(&["translate", "--input"]), EXIT_INVALID);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = twelve\n").unwrap();
    let args = ["--config", s(&cfg), "prepare", "--manifest", s(&m), "--out", s(&out)];
    assert_eq!(run(&args), EXIT_INVALID);
}

#[test]
fn exit_codes_follow_error_kinds() {
    assert_eq!(exit_code(&Error::MissingAsset("x".into())), EXIT_MISSING_ASSET);
    let nf = Error::NonFinite {
        term: "pix".into(),
        step: 3,
        batch: vec![1],
    };
    assert_eq!(exit_code(&nf), EXIT_NON_FINITE);
    assert_eq!(exit_code(&Error::InvalidArgument("bad".into())), EXIT_INVALID);
}

#[test]
fn translate_single_tile_matches_one_generator_call() {
    let dir = tempfile::tempdir().unwrap();
    let ov = toy_overrides();
    let g = save_generator(dir.path(), &ov);
    let input = save_sar(dir.path(), 64, "sar.png");
    let out = dir.path().join("eo.png");
    let args = ["--overrides", &ov[0], "translate", "--generator", s(&g), "--input", s(&input), "--output", s(&out)];
    assert_eq!(run(&args), EXIT_OK);

    let cfg = RunConfig::resolve(None, &ov).unwrap();
    let sar = load_tile(&input, ValueRange::SIGNED_UNIT).unwrap();
    let direct = Generator::load(&g)
        .unwrap()
        .generate(&assemble_triplet(&sar, None, &cfg.preprocess).unwrap())
        .unwrap();
    let expect = dir.path().join("direct.png");
    save_tile(&direct, &expect).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expect).unwrap());

    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar(&out)).unwrap()).unwrap();
    assert_eq!(prov["config_hash"], cfg.hash().unwrap());
    assert_eq!(prov["seed"], 0);
    assert_eq!(prov["checkpoints"]["generator"].as_str().unwrap().len(), 64);
}

#[test]
fn translate_tiles_and_stitches_large_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ov = vec!["generator.width_divisor=16".to_string()];
    let g = save_generator(dir.path(), &ov);
    let (sar, _) = synthetic_pair(1024, 4).unwrap();
    let sar = sar.crop(0, 0, 768, 1024).unwrap();
    let input = dir.path().join("wide.png");
    save_tile(&sar, &input).unwrap();
    let out = dir.path().join("wide_eo.png");
    let args = [
        "--overrides", &ov[0], "translate", "--generator", s(&g), "--input", s(&input), "--output", s(&out),
        "--tile", "256", "--overlap", "0",
    ];
    assert_eq!(run(&args), EXIT_OK);
    let t = load_tile(&out, ValueRange::SIGNED_UNIT).unwrap();
    assert_eq!(t.dims(), (3, 768, 1024));
}

#[test]
fn translate_rejects_mismatched_tile_and_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let ov = toy_overrides();
    let g = save_generator(dir.path(), &ov);
    let input = save_sar(dir.path(), 64, "sar.png");
    let out = dir.path().join("eo.png");
    let args = ["--overrides", &ov[0], "translate", "--generator", s(&g), "--input", s(&input), "--output", s(&out), "--tile", "128"];
    assert_eq!(run(&args), EXIT_INVALID);
    // Reference configuration against a toy checkpoint.
    let args = ["translate", "--generator", s(&g), "--input", s(&input), "--output", s(&out)];
    assert_eq!(run(&args), EXIT_INVALID);
    assert!(!out.exists());
    let missing = dir.path().join("none.png");
    let args = ["translate", "--generator", s(&g), "--input", s(&missing), "--output", s(&out)];
    assert_eq!(run(&args), EXIT_MISSING_ASSET);
}

struct AssessFixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    overrides: Vec<String>,
}

impl AssessFixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let overrides = vec!["train.toy_mode=true".to_string(), "siamese.input_size=32".to_string()];
        let cfg = RunConfig::resolve(None, &overrides).unwrap();
        Generator::new(cfg.generator.clone(), DType::F32, 1).unwrap().save(&root.join("g.safetensors")).unwrap();
        Discriminator::new(cfg.discriminator.clone(), DType::F32, 2)
            .unwrap()
            .save(&root.join("d.safetensors"))
            .unwrap();
        SiameseEmbedder::new(SiameseConfig { input_size: 32 }, DType::F32, 3)
            .unwrap()
            .save(&root.join("s.safetensors"))
            .unwrap();
        save_sar(&root, 128, "sar.png");
        Self {
            _dir: dir,
            root,
            overrides,
        }
    }

    fn run(&self, extra: &[&str], siamese: &str, out: &str) -> i32 {
        let p = |n: &str| self.root.join(n).to_str().unwrap().to_string();
        let mut args: Vec<String> = Vec::new();
        for o in self.overrides.iter().map(String::as_str).chain(extra.iter().copied()) {
            args.push("--overrides".into());
            args.push(o.into());
        }
        args.extend(
            [
                "assess".into(),
                "--generator".into(),
                p("g.safetensors"),
                "--discriminator".into(),
                p("d.safetensors"),
                "--siamese".into(),
                p(siamese),
                "--input".into(),
                p("sar.png"),
                "--out".into(),
                p(out),
            ]
            .into_iter(),
        );
        main_with(std::iter::once("sar2eo".to_string()).chain(args))
    }
}

#[test]
fn assess_without_siamese_checkpoint_exits_2() {
    let f = AssessFixture::new();
    assert_eq!(f.run(&[], "absent.safetensors", "report"), EXIT_MISSING_ASSET);
    assert!(!f.root.join("report").exists());
}

#[test]
fn assess_writes_exactly_the_report_files() {
    let f = AssessFixture::new();
    assert_eq!(f.run(&[], "s.safetensors", "report"), EXIT_OK);
    let mut names: Vec<String> = fs::read_dir(f.root.join("report"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut want: Vec<String> = REPORT_FILES.iter().map(|s| s.to_string()).collect();
    want.sort();
    assert_eq!(names, want);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("report/report.json")).unwrap()).unwrap();
    let pct = report["confidence_percent"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&pct));
    let hashes = report["provenance"]["checkpoints"].as_object().unwrap();
    assert_eq!(hashes.len(), 3);
    assert!(report["consistency_summary"]["mean"].is_number());
}

#[test]
fn zero_alpha_heatmap_equals_translation() {
    let f = AssessFixture::new();
    assert_eq!(f.run(&["heatmap.alpha=0"], "s.safetensors", "report"), EXIT_OK);
    let a = load_tile(&f.root.join("report/translation.png"), ValueRange::UNIT).unwrap();
    let b = load_tile(&f.root.join("report/heatmap.png"), ValueRange::UNIT).unwrap();
    assert_eq!(a.dims(), b.dims());
    assert_eq!(a.data(), b.data());
}

#[test]
fn assess_rejects_embedder_of_other_size() {
    let f = AssessFixture::new();
    assert_eq!(f.run(&["siamese.input_size=64"], "s.safetensors", "report"), EXIT_INVALID);
}

#[test]
fn train_and_train_siamese_write_checkpoints_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_synthetic_dataset(&dir.path().join("data"), 3, 3, 64, 9).unwrap();
    let out = dir.path().join("run");
    let ov = [
        "train.toy_mode=true",
        "train.batch_size=2",
        "train.steps=2",
        "train.checkpoint_every=1",
        "train.augment=false",
        "siamese.steps=3",
        "siamese.batch_size=2",
        "siamese.input_size=32",
    ];
    let mut args: Vec<&str> = Vec::new();
    for o in &ov {
        args.extend(["--overrides", o]);
    }
    let mut train = args.clone();
    train.extend(["--seed", "4", "train", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(run(&train), EXIT_OK);
    for step in ["step_000001", "step_000002"] {
        assert!(out.join("checkpoints").join(step).join("state.json").exists());
    }
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 4);
    assert!(prov["final_checkpoint"].as_str().unwrap().ends_with("step_000002"));
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let emb = dir.path().join("siamese.safetensors");
    let mut sia = args.clone();
    sia.extend(["train-siamese", "--manifest", s(&m), "--out", s(&emb)]);
    assert_eq!(run(&sia), EXIT_OK);
    assert_eq!(SiameseEmbedder::load(&emb).unwrap().config().input_size, 32);
    assert!(sidecar(&emb).exists());
}
