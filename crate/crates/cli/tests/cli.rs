use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glyphforge::generate::{generate_batch, BatchRequest};
use glyphforge::glyph::build_glyph_mask;
use glyphforge::annotation::parse_annotations;
use glyphforge::raster::{BinaryMask, Image};
use glyphforge::reliability::EntropyForm;
use glyphforge::toy::{toy_corpus, write_toy_corpus, ToyDomain};
use serde_json::Value;
use tempfile::TempDir;

fn glyphforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphforge"))
        .args(args)
        .env("GLYPHFORGE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = glyphforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Sources {
    dir: TempDir,
}

impl Sources {
    fn new(count: usize, size: usize) -> Sources {
        let dir = TempDir::new().unwrap();
        write_toy_corpus(&toy_corpus(ToyDomain::Synthetic, count, size, size, 1), dir.path().join("syn")).unwrap();
        write_toy_corpus(&toy_corpus(ToyDomain::Real, count, size, size, 1), dir.path().join("real")).unwrap();
        Sources { dir }
    }

    fn synthetic(&self) -> PathBuf {
        self.dir.path().join("syn/annotations.jsonl")
    }

    fn real(&self) -> PathBuf {
        self.dir.path().join("real/images")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn mix(src: &Sources, out: &Path, extra: &[&str]) {
    let (synthetic, real) = (src.synthetic(), src.real());
    let mut args = vec!["mix", "--synthetic", s(&synthetic), "--real", s(&real), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

fn manifest(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_and_version_succeed() {
    let help = ok(&["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["extract-glyphs", "mix", "pretrain", "eval-dca", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    ok(&["--version"]);
    ok(&["mix", "--help"]);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(glyphforge(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(glyphforge(&[]).status.code(), Some(1));
    assert_eq!(glyphforge(&["mix", "--real", "x"]).status.code(), Some(1));
    assert_eq!(glyphforge(&["mix", "--synthetic", "a", "--real", "b", "--mode", "blend"]).status.code(), Some(1));
}

#[test]
fn missing_annotation_file_is_a_runtime_error_naming_it() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = glyphforge(&["mix", "--synthetic", s(&missing), "--real", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn invalid_config_is_a_runtime_error() {
    let src = Sources::new(2, 32);
    let cfg = src.path("cfg.toml");
    fs::write(&cfg, "seed = 1\nglyph.kmeans_iters = 3\n").unwrap();
    let out = glyphforge(&["bench", "--count", "1", "--size", "32", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kmeans_iters"));
}

#[test]
fn mix_is_reproducible_and_worker_invariant() {
    let src = Sources::new(6, 48);
    let (a, b) = (src.path("a"), src.path("b"));
    mix(&src, &a, &["--count", "7", "--seed", "5", "--workers", "1"]);
    mix(&src, &b, &["--count", "7", "--seed", "5", "--workers", "3"]);
    assert_eq!(tree(&a), tree(&b));
    let c = src.path("c");
    mix(&src, &c, &["--count", "7", "--seed", "6"]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn mix_outputs_and_manifest() {
    let src = Sources::new(4, 40);
    let out = src.path("out");
    mix(&src, &out, &["--count", "3"]);
    let records = manifest(&out);
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["index"], i);
        for key in ["image", "label", "reliability", "provenance"] {
            assert!(out.join(r[key].as_str().unwrap()).exists(), "{key}");
        }
        assert_eq!(r["run"]["params"]["mode"], "glyphmix");
        assert!(Path::new(r["synthetic_source"].as_str().unwrap()).exists());
        assert!(Path::new(r["real_source"].as_str().unwrap()).exists());
    }

    let base = src.path("cutmix");
    mix(&src, &base, &["--count", "2", "--mode", "cutmix"]);
    assert!(!base.join("reliability").exists());
    assert!(manifest(&base).iter().all(|r| r["reliability"].is_null()));
}

#[test]
fn interrupted_mix_resumes_to_the_same_result() {
    let src = Sources::new(5, 40);
    let (full, resumed) = (src.path("full"), src.path("resumed"));
    mix(&src, &full, &["--count", "6", "--seed", "2"]);
    mix(&src, &resumed, &["--count", "3", "--seed", "2"]);
    // A record cut off mid-write is dropped and regenerated.
    let path = resumed.join("manifest.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"index\": 3, \"ima");
    fs::write(&path, text).unwrap();
    mix(&src, &resumed, &["--count", "6", "--seed", "2"]);
    assert_eq!(tree(&full), tree(&resumed));

    let out = glyphforge(&[
        "mix", "--synthetic", s(&src.synthetic()), "--real", s(&src.real()), "--out", s(&resumed), "--count", "8",
        "--seed", "9",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(manifest(&resumed).len(), 6);
}

#[test]
fn flags_win_over_config_and_set() {
    let src = Sources::new(3, 32);
    let cfg = src.path("cfg.toml");
    fs::write(&cfg, "seed = 11\nmix.mode = \"mixup\"\n").unwrap();
    let out = src.path("o");
    mix(&src, &out, &["--config", s(&cfg), "--set", "seed=12", "--seed", "13", "--count", "1"]);
    let run = &manifest(&out)[0]["run"];
    assert_eq!(run["seed"], 13);
    assert_eq!(run["params"]["mode"], "mixup");
}

fn decode_gray(path: &Path) -> Vec<u8> {
    let img = Image::load(path).unwrap();
    assert_eq!(img.channels(), 1);
    img.into_data()
}

/// Runs `mix` and `generate_batch` with the same parameters and compares every byte.
fn assert_parity(src: &Sources, req: &BatchRequest, flags: &[&str], tag: &str) {
    let out = src.path(tag);
    let count = req.batch_size.to_string();
    let seed = req.seed.to_string();
    let gamma = req.gamma.to_string();
    let form = format!("entropy.form={}", serde_json::to_value(req.entropy_form).unwrap().as_str().unwrap());
    let mut args = vec!["--count", &count, "--seed", &seed, "--gamma", &gamma, "--set", &form];
    args.extend_from_slice(flags);
    let teacher;
    if let Some(t) = &req.teacher {
        teacher = t.to_str().unwrap().to_string();
        args.extend_from_slice(&["--teacher", &teacher]);
    }
    mix(src, &out, &args);

    let arrays = generate_batch(req).unwrap();
    let (hw, b) = (arrays.width * arrays.height, arrays.batch);
    assert_eq!(b, req.batch_size);
    for (i, r) in manifest(&out).iter().enumerate() {
        let file = |k: &str| out.join(r[k].as_str().unwrap());
        let image = Image::load(file("image")).unwrap();
        assert_eq!(image.data(), &arrays.images[i * hw * 3..(i + 1) * hw * 3], "{tag} image {i}");
        assert_eq!(decode_gray(&file("label")), arrays.labels[i * hw..(i + 1) * hw], "{tag} label {i}");
        assert_eq!(decode_gray(&file("reliability")), arrays.reliability[i * hw..(i + 1) * hw], "{tag} reliability {i}");
        assert_eq!(decode_gray(&file("provenance")), arrays.provenance[i * hw..(i + 1) * hw], "{tag} provenance {i}");
    }
}

#[test]
fn mix_pngs_match_batch_arrays() {
    let src = Sources::new(5, 40);
    let run = src.path("run");
    ok(&[
        "pretrain", "--synthetic", s(&src.synthetic()), "--real", s(&src.real()), "--out", s(&run), "--set",
        "train.total_steps=30", "--set", "train.batch_size=4", "--set", "train.lr_coefficient=0.3",
    ]);
    let checkpoint = run.join("checkpoint.gfck");

    for k in 0..20u64 {
        let mut req = BatchRequest::new(src.synthetic(), src.real());
        req.batch_size = 1 + (k as usize % 3);
        req.seed = 100 + k;
        req.tim = k % 2 == 0;
        req.gamma = [0.0, 20.0, 55.5, 90.0][k as usize % 4];
        req.entropy_form = if k % 3 == 0 { EntropyForm::Binary } else { EntropyForm::OneSided };
        req.teacher = (k % 4 != 1).then(|| checkpoint.clone());
        let flags: &[&str] = if req.tim { &[] } else { &["--no-tim"] };
        assert_parity(&src, &req, flags, &format!("p{k}"));
    }
}

#[test]
fn zero_gamma_keeps_every_pixel() {
    let src = Sources::new(3, 32);
    let run = src.path("run");
    ok(&[
        "pretrain", "--synthetic", s(&src.synthetic()), "--real", s(&src.real()), "--out", s(&run), "--set",
        "train.total_steps=5", "--set", "train.batch_size=2",
    ]);
    let mut req = BatchRequest::new(src.synthetic(), src.real());
    req.batch_size = 2;
    req.gamma = 0.0;
    req.teacher = Some(run.join("checkpoint.gfck"));
    let arrays = generate_batch(&req).unwrap();
    assert!(arrays.reliability.iter().all(|&v| v == 255));
}

#[test]
fn extract_glyphs_writes_masks_and_counters() {
    let src = Sources::new(3, 48);
    let out = src.path("masks");
    ok(&["extract-glyphs", "--annotations", s(&src.synthetic()), "--out-dir", s(&out), "--seed", "4"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let parsed = parse_annotations(src.synthetic()).unwrap();
    let images = report["images"].as_array().unwrap();
    assert_eq!(images.len(), 3);
    for (entry, record) in images.iter().zip(&parsed.records) {
        let image = Image::load(src.path("syn").join(&record.image_path)).unwrap();
        let expected = build_glyph_mask(&image, &record.char_boxes, &Default::default());
        let written = BinaryMask::load_png(out.join(entry["mask"].as_str().unwrap())).unwrap();
        assert_eq!(written, expected.mask);
        assert_eq!(entry["counters"]["boxes_processed"], expected.boxes_processed);
        assert_eq!(entry["counters"]["glyph_pixel_fraction"], expected.glyph_pixel_fraction);
        let raw = decode_gray(&out.join(entry["mask"].as_str().unwrap()));
        assert!(raw.iter().all(|&v| v == 0 || v == 255));
    }
    assert_eq!(report["seed"], 4);
}

#[test]
fn pretrain_is_reproducible() {
    let src = Sources::new(4, 32);
    let run = |name: &str| {
        let out = src.path(name);
        ok(&[
            "pretrain", "--synthetic", s(&src.synthetic()), "--real", s(&src.real()), "--out", s(&out), "--seed",
            "3", "--set", "train.total_steps=12", "--set", "train.batch_size=4", "--eval",
            s(&src.path("real/annotations.jsonl")),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let lines = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "gamma", "kept_fraction", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(tree(&a), tree(&b));
    let config = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(config.contains("seed = 3"));
    assert!(a.join("eval.json").exists());
}

#[test]
fn eval_dca_reports_every_mixer() {
    let src = Sources::new(30, 48);
    let (out, synthetic, real) = (src.path("dca"), src.synthetic(), src.real());
    let args = [
        "eval-dca", "--synthetic", s(&synthetic), "--real", s(&real), "--mixers",
        "glyphmix,cutmix,real,synthetic", "--budget", "50", "--seed", "2", "--json", "--out", s(&out),
    ];
    let printed: Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    let written: Value = serde_json::from_str(&fs::read_to_string(out.join("dca.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    let reports = written["reports"].as_array().unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r["mixer"].as_str().unwrap()).collect();
    assert_eq!(names, ["glyphmix", "cutmix", "real", "synthetic"]);
    assert!(reports.iter().all(|r| r["pairs"] == 50));
    let again: Value = serde_json::from_slice(&ok(&args).stdout).unwrap();
    assert_eq!(again, printed);

    let table = String::from_utf8_lossy(&ok(&args[..args.len() - 3]).stdout).into_owned();
    assert!(table.lines().count() == 5 && table.contains("glyphmix"));
    assert_eq!(glyphforge(&["eval-dca", "--synthetic", "a", "--real", "b", "--mixers", "blend"]).status.code(), Some(2));
}

#[test]
fn bench_prints_text_and_json() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench");
    let json = ok(&["bench", "--count", "3", "--size", "48", "--workers", "2", "--seed", "1", "--json", "--out", s(&out)]);
    let report: Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(report["count"], 3);
    assert_eq!(report["width"], 48);
    let written: Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(written["digest"], report["digest"]);
    let text = ok(&["bench", "--count", "3", "--size", "48", "--seed", "1"]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("images/sec"));
}
