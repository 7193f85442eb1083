//! `glyphforge` command line: glyph extraction, pair generation, pre-training,
//! domain evaluation and throughput benchmarks.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use glyphforge::annotation::{parse_annotations, Granularity};
use glyphforge::bench::bench_generate;
use glyphforge::checkpoint::Checkpoint;
use glyphforge::config::GlobalConfig;
use glyphforge::domain::{
    dca, train_domain_classifier, DcaReport, DcaSampling, DomainScorer, Mixer, ModeMixer, RealPassthrough,
    SynthPassthrough,
};
use glyphforge::generate::{
    load_real_dir, load_synthetic, load_synthetic_with_paths, real_image_paths, with_workers, Corpus, GeneratedPair,
    MixMode, PairGenerator, SynthItem,
};
use glyphforge::glyph::build_glyph_mask_serial;
use glyphforge::raster::Image;
use glyphforge::toy::{toy_corpus, write_toy_corpus, ToyDomain};
use glyphforge::train::{evaluate_pixels, run_pretraining};

#[derive(Parser)]
#[command(name = "glyphforge", version, about = "Glyph-level synthetic-to-real mixing for text detection pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts. Flags win over `--set`, which wins over
/// the config file.
#[derive(Args)]
struct Common {
    /// TOML config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Extract per-box glyph masks from annotated images.
    ExtractGlyphs(ExtractArgs),
    /// Write mixed pairs with labels, reliability and provenance maps.
    Mix(MixArgs),
    /// Run student-teacher pre-training.
    Pretrain(PretrainArgs),
    /// Measure domain confusion of mixing strategies.
    EvalDca(DcaArgs),
    /// Measure pair generation throughput.
    Bench(BenchArgs),
    /// Write a procedural toy corpus with annotations.
    ToyCorpus(ToyArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, alias = "out")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<MixMode>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Checkpoint whose teacher pseudo-labels the real images.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Paste glyphs onto a single real image.
    #[arg(long)]
    no_tim: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Annotated real images scored at the end against their character boxes.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DcaArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Comma-separated: glyphmix, mixup, cutmix, classmix, real, synthetic.
    #[arg(long, value_delimiter = ',', default_value = "glyphmix,mixup,cutmix,classmix")]
    mixers: Vec<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Average probabilities instead of counting hard decisions.
    #[arg(long)]
    soft: bool,
    /// Score every (synthetic, real) pair instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Annotated synthetic images; toy scenes when absent.
    #[arg(long, requires = "real")]
    synthetic: Option<PathBuf>,
    #[arg(long, requires = "synthetic")]
    real: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Synthetic,
    Real,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_enum)]
    domain: DomainArg,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

impl Common {
    /// Loads the config with `--set` overrides and then `flags` applied.
    fn load(&self, flags: Vec<String>) -> Result<GlobalConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(workers) = self.workers {
            overrides.push(format!("workers={workers}"));
        }
        overrides.extend(flags);
        let config = GlobalConfig::load(self.config.as_deref(), &overrides)?;
        init_logging(&config.log_level);
        Ok(config)
    }
}

fn init_logging(default_level: &str) {
    let env = env_logger::Env::new().filter_or("GLYPHFORGE_LOG", default_level);
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

/// `key=value` overrides for the flags that were given.
fn flag_overrides(pairs: &[(&str, Option<String>)]) -> Vec<String> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}")))
        .collect()
}

fn out_dir(flag: Option<&Path>, config: &GlobalConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .context("no output directory: pass --out or set out_dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn extract_glyphs(args: ExtractArgs) -> Result<()> {
    let granularity = args.granularity.map(|g| g.to_string());
    let config = args.common.load(flag_overrides(&[("mix.granularity", granularity)]))?;
    let out = out_dir(args.out_dir.as_deref(), &config)?;
    let parsed = parse_annotations(&args.annotations)?;
    let root = args.annotations.parent().unwrap_or(Path::new("."));
    let granularity = config.mix.granularity;

    let entries: Vec<Value> = with_workers(config.workers, || {
        use rayon::prelude::*;
        parsed
            .records
            .par_iter()
            .enumerate()
            .map(|(i, record)| -> Result<Value> {
                let Ok(boxes) = record.select_boxes(granularity) else {
                    log::warn!("{}: no {granularity} boxes, skipped", record.image_path.display());
                    return Ok(json!({"index": i, "image_path": record.image_path, "skipped": true}));
                };
                let image = Image::load(root.join(&record.image_path))?;
                let report = build_glyph_mask_serial(&image, boxes, &config.glyph);
                let mask_name = format!("{i:05}.png");
                report.mask.save_png(out.join(&mask_name))?;
                Ok(json!({
                    "index": i,
                    "image_path": record.image_path,
                    "mask": mask_name,
                    "counters": report.counters(),
                }))
            })
            .collect::<Result<_>>()
    })??;

    let counter = |key: &str| entries.iter().filter_map(|e| e["counters"][key].as_u64()).sum::<u64>();
    let totals = json!({
        "images": entries.iter().filter(|e| e.get("mask").is_some()).count(),
        "records_without_boxes": entries.iter().filter(|e| e.get("skipped").is_some()).count(),
        "boxes_processed": counter("boxes_processed"),
        "boxes_skipped_degenerate": counter("boxes_skipped_degenerate"),
        "invalid_boxes_dropped": parsed.dropped_boxes,
        "invalid_records_dropped": parsed.dropped_records,
    });
    log::info!("glyph masks written to {}: {totals}", out.display());
    write_json(
        &out.join("report.json"),
        &json!({
            "annotations": args.annotations,
            "granularity": granularity,
            "seed": config.seed,
            "glyph": config.glyph,
            "totals": totals,
            "images": entries,
        }),
    )
}

/// Indices already recorded in `manifest.jsonl`, after checking they were
/// produced with `run`. A partial trailing line from an interrupted run is
/// dropped.
fn completed_indices(path: &Path, run: &Value) -> Result<Vec<usize>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let complete = &text[..text.rfind('\n').map_or(0, |p| p + 1)];
    if complete.len() != text.len() {
        log::warn!("{}: dropping a partial last record", path.display());
        fs::write(path, complete).with_context(|| format!("rewriting {}", path.display()))?;
    }
    let mut done = Vec::new();
    for (n, line) in BufReader::new(complete.as_bytes()).lines().enumerate() {
        let record: Value =
            serde_json::from_str(&line?).with_context(|| format!("{}:{}: invalid record", path.display(), n + 1))?;
        if &record["run"] != run {
            bail!(
                "{} was written with different parameters; use another --out",
                path.display()
            );
        }
        done.push(record["index"].as_u64().context("record without index")? as usize);
    }
    Ok(done)
}

fn mix(args: MixArgs) -> Result<()> {
    let config = args.common.load(flag_overrides(&[
        ("mix.mode", args.mode.map(|m| m.to_string())),
        ("mix.granularity", args.granularity.map(|g| g.to_string())),
        ("mix.gamma", args.gamma.map(|g| g.to_string())),
        ("mix.tim", args.no_tim.then(|| "false".to_string())),
    ]))?;
    let (synth_paths, synth) = load_synthetic_with_paths(&args.synthetic, config.mix.granularity)?;
    let real_paths = real_image_paths(&args.real)?;
    let real = load_real_dir(&args.real)?;
    let teacher = args
        .teacher
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading teacher {}", p.display())))
        .transpose()?
        .map(|c| c.teacher);
    let out = out_dir(args.out.as_deref(), &config)?;
    let corpus = Corpus::new(synth, real)?;
    let mix_config = config.mix_config();
    let mut generator = PairGenerator::new(&corpus, mix_config, config.seed)?;
    if let Some(t) = &teacher {
        generator = generator.with_teacher(t);
    }

    let run = json!({
        "synthetic": args.synthetic,
        "real": args.real,
        "granularity": config.mix.granularity,
        "seed": config.seed,
        "teacher": args.teacher,
        "params": mix_config,
    });
    let manifest_path = out.join("manifest.jsonl");
    let done = completed_indices(&manifest_path, &run)?;
    let todo: Vec<usize> = (0..args.count).filter(|i| !done.contains(i)).collect();
    if todo.is_empty() {
        log::info!("all {} pairs already in {}", args.count, manifest_path.display());
        return Ok(());
    }
    let dirs = ["images", "labels", "reliability", "provenance"];
    for d in dirs {
        if d != "reliability" || mix_config.mode.has_reliability() {
            fs::create_dir_all(out.join(d)).with_context(|| format!("creating {}", out.join(d).display()))?;
        }
    }
    let mut manifest = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest_path)
        .with_context(|| format!("opening {}", manifest_path.display()))?;

    log::info!("generating {} of {} pairs into {}", todo.len(), args.count, out.display());
    // Chunks bound memory; each chunk's files exist before its records are appended.
    for chunk in todo.chunks(64 * config.workers) {
        let pairs = generator.generate(chunk, config.workers)?;
        let records = with_workers(config.workers, || {
            use rayon::prelude::*;
            pairs
                .par_iter()
                .map(|g| write_pair(&out, g, mix_config.mode, &synth_paths, &real_paths, &run))
                .collect::<Result<Vec<_>>>()
        })??;
        for record in records {
            writeln!(manifest, "{record}").with_context(|| format!("appending to {}", manifest_path.display()))?;
        }
        manifest.flush()?;
    }
    Ok(())
}

fn write_pair(
    out: &Path,
    g: &GeneratedPair,
    mode: MixMode,
    synth_paths: &[PathBuf],
    real_paths: &[PathBuf],
    run: &Value,
) -> Result<Value> {
    let name = format!("{:06}.png", g.index);
    let rel = |dir: &str| format!("{dir}/{name}");
    g.pair.image.to_rgb().save_png(out.join(rel("images")))?;
    g.pair.label.save_png(out.join(rel("labels")))?;
    let reliability = if mode.has_reliability() {
        g.pair.reliability.save_png(out.join(rel("reliability")))?;
        Some(rel("reliability"))
    } else {
        None
    };
    g.pair.provenance.to_image().save_png(out.join(rel("provenance")))?;
    Ok(json!({
        "index": g.index,
        "image": rel("images"),
        "label": rel("labels"),
        "reliability": reliability,
        "provenance": rel("provenance"),
        "synthetic_source": synth_paths[g.synth_index],
        "real_source": real_paths[g.real_index],
        "second_real_source": g.second_index.map(|j| &real_paths[j]),
        "run": run,
    }))
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let config = args
        .common
        .load(flag_overrides(&[("mix.granularity", args.granularity.map(|g| g.to_string()))]))?;
    let out = out_dir(args.out.as_deref(), &config)?;
    let train = config.train_config();
    let corpus = Corpus::new(
        load_synthetic(&args.synthetic, config.mix.granularity)?,
        load_real_dir(&args.real)?,
    )?;
    let eval = args
        .eval
        .as_ref()
        .map(|p| load_synthetic(p, Granularity::Char))
        .transpose()?;
    fs::write(out.join("config.toml"), config.to_toml()?).context("writing config.toml")?;
    log::info!(
        "pre-training {} steps on {} synthetic and {} real images",
        train.total_steps,
        corpus.synth().len(),
        corpus.real().len()
    );
    let outcome = run_pretraining(&train, &corpus, Some(&out))?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("step {} loss {:.5}", last.step, last.loss);
    }
    if let Some(items) = eval {
        let samples: Vec<(Image, _)> = items.into_iter().map(|s: SynthItem| (s.image.to_rgb(), s.label)).collect();
        let threshold = train.binarize_threshold;
        let scores = json!({
            "images": samples.len(),
            "student": evaluate_pixels(&outcome.student, &samples, threshold)?,
            "teacher": evaluate_pixels(&outcome.teacher, &samples, threshold)?,
        });
        println!("{scores}");
        write_json(&out.join("eval.json"), &scores)?;
    }
    Ok(())
}

fn mixer_by_name(name: &str, config: &GlobalConfig) -> Result<Box<dyn Mixer>> {
    Ok(match name.trim() {
        "real" => Box::new(RealPassthrough),
        "synthetic" => Box::new(SynthPassthrough),
        other => {
            let mode: MixMode = other.parse()?;
            Box::new(ModeMixer(glyphforge::generate::MixConfig {
                mode,
                ..config.mix_config()
            }))
        }
    })
}

fn eval_dca(args: DcaArgs) -> Result<()> {
    let config = args.common.load(flag_overrides(&[
        ("dca.budget", args.budget.map(|b| b.to_string())),
        ("dca.soft", args.soft.then(|| "true".to_string())),
        ("mix.granularity", args.granularity.map(|g| g.to_string())),
    ]))?;
    let mixers: Vec<Box<dyn Mixer>> = args
        .mixers
        .iter()
        .map(|m| mixer_by_name(m, &config))
        .collect::<Result<_>>()?;
    let corpus = Corpus::new(
        load_synthetic(&args.synthetic, config.mix.granularity)?,
        load_real_dir(&args.real)?,
    )?;
    let sampling = if args.exhaustive {
        DcaSampling::Exhaustive
    } else {
        DcaSampling::MonteCarlo {
            budget: config.dca.budget,
        }
    };
    let synth_images: Vec<Image> = corpus.synth().iter().map(|s| s.image.clone()).collect();
    let reports: Vec<DcaReport> = with_workers(config.workers, || -> Result<Vec<DcaReport>> {
        let classifier = train_domain_classifier(&synth_images, corpus.real(), &config.dca.classifier, config.seed)?;
        log::info!("domain classifier holdout accuracy {:.3}", classifier.holdout_accuracy());
        mixers
            .iter()
            .map(|m| Ok(dca(&classifier, m.as_ref(), &corpus, sampling, config.seed, config.dca.soft)?))
            .collect()
    })??;

    let doc = json!({
        "seed": config.seed,
        "sampling": sampling,
        "classifier": config.dca.classifier,
        "reports": reports,
    });
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("{:<10} {:>7} {:>7} {:>8} {:>8}", "mixer", "pairs", "skipped", "dca", "holdout");
        for r in &reports {
            println!(
                "{:<10} {:>7} {:>7} {:>8.4} {:>8.3}",
                r.mixer, r.pairs, r.skipped, r.dca, r.holdout_accuracy
            );
        }
    }
    if let Some(dir) = args.out.as_deref().or(config.out_dir.as_deref()) {
        let dir = out_dir(Some(dir), &config)?;
        write_json(&dir.join("dca.json"), &doc)?;
    }
    Ok(())
}

/// Toy scenes used when `bench` is given no sources.
const BENCH_TOY_SCENES: usize = 16;

fn bench(args: BenchArgs) -> Result<()> {
    let config = args.common.load(flag_overrides(&[
        ("bench.count", args.count.map(|c| c.to_string())),
        ("bench.size", args.size.map(|s| s.to_string())),
    ]))?;
    let size = config.bench.size;
    let corpus = match (&args.synthetic, &args.real) {
        (Some(s), Some(r)) => Corpus::new(load_synthetic(s, config.mix.granularity)?, load_real_dir(r)?)?,
        _ => {
            let synth = toy_corpus(ToyDomain::Synthetic, BENCH_TOY_SCENES, size, size, config.seed)
                .into_iter()
                .map(|s| SynthItem::from_boxes(s.image, s.char_boxes))
                .collect();
            let real = toy_corpus(ToyDomain::Real, BENCH_TOY_SCENES, size, size, config.seed)
                .into_iter()
                .map(|s| s.image)
                .collect();
            Corpus::new(synth, real)?
        }
    };
    let report = bench_generate(
        &corpus,
        &config.mix_config(),
        config.bench.count,
        size,
        config.workers,
        config.seed,
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    if let Some(dir) = args.out.as_deref().or(config.out_dir.as_deref()) {
        let dir = out_dir(Some(dir), &config)?;
        write_json(&dir.join("bench.json"), &report)?;
    }
    Ok(())
}

fn toy(args: ToyArgs) -> Result<()> {
    let config = args.common.load(Vec::new())?;
    let out = out_dir(args.out.as_deref(), &config)?;
    let domain = match args.domain {
        DomainArg::Synthetic => ToyDomain::Synthetic,
        DomainArg::Real => ToyDomain::Real,
    };
    let scenes = with_workers(config.workers, || toy_corpus(domain, args.count, args.size, args.size, config.seed))?;
    let path = write_toy_corpus(&scenes, &out)?;
    log::info!("{} scenes, annotations in {}", scenes.len(), path.display());
    Ok(())
}

/// The error and its causes, skipping causes already spelled out above them.
fn error_text(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text += ": ";
            }
            text += &part;
        }
    }
    text
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractGlyphs(a) => extract_glyphs(a),
        Command::Mix(a) => mix(a),
        Command::Pretrain(a) => pretrain(a),
        Command::EvalDca(a) => eval_dca(a),
        Command::Bench(a) => bench(a),
        Command::ToyCorpus(a) => toy(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_text(&e));
            ExitCode::from(2)
        }
    }
}
