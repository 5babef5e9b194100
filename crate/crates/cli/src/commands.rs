use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use lungseg::bench::{self, SweepConfig, TimingReport, DEFAULT_WORKER_CAP};
use lungseg::dataset::{self, build_manifest, nodule_stats, split_by_patient, split_view, training_view, Manifest, Split};
use lungseg::gradsuite::run_gradient_suite;
use lungseg::image::write_rgb_png;
use lungseg::ingest::{self, NormImage, WindowSpec};
use lungseg::loader::{Delayed, FileSource, Loader, LoaderConfig, SampleSource};
use lungseg::metrics::{self, binarize, EmptySegmenter, OracleSegmenter, Segmenter};
use lungseg::synth::{self, CirclesConfig, SynthLayout};
use lungseg::trainer::{self, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT};
use lungseg::unet::{self, Model, UNetConfig};
use lungseg::Tensor;

use crate::config::{self, echo, load_file, parse_ratios, resolve_ratios, resolve_threshold, FileConfig, ModelArgs, TrainArgs, WindowArgs};
use crate::{Cli, Command, UsageError};

pub fn run(cli: Cli) -> Result<ExitCode> {
    let file = load_file(cli.config.as_deref())?;
    if let Some(cap) = config::thread_cap()? {
        lungseg::par::limit_threads(cap);
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(a, &file),
        Command::Ingest(a) => ingest_cmd(a, &file),
        Command::Manifest(a) => manifest_cmd(a),
        Command::Split(a) => split_cmd(a, &file),
        Command::Stats(a) => stats_cmd(a),
        Command::Train(a) => train_cmd(a, &file),
        Command::Finetune(a) => finetune_cmd(a, &file),
        Command::Eval(a) => eval_cmd(a, &file),
        Command::Overlay(a) => overlay_cmd(a, &file),
        Command::BenchSweep(a) => sweep_cmd(a, &file),
        Command::BenchTime(a) => time_cmd(a, &file),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" | "training" => Ok(Split::Training),
        "val" | "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub patients: usize,
    /// Slices with a disk per patient
    #[arg(long, default_value_t = 5)]
    pub nodule_slices: usize,
    /// Slices without a disk per patient
    #[arg(long, default_value_t = 5)]
    pub blank_slices: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Write DICOM slices (for `ingest`) instead of PNGs
    #[arg(long)]
    pub dicom: bool,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    out_dir: &'a Path,
    dicom: bool,
    circles: &'a CirclesConfig,
    layout: &'a SynthLayout,
}

fn synth_cmd(a: SynthArgs, file: &FileConfig) -> Result<()> {
    let window = a.window.resolve(file)?;
    if a.size < 8 {
        return Err(UsageError(format!("size must be >= 8, got {}", a.size)).into());
    }
    let d = CirclesConfig::default();
    let scale = a.size as f64 / d.size as f64;
    let circles = CirclesConfig { size: a.size, min_radius: d.min_radius * scale, max_radius: d.max_radius * scale, seed: a.seed, ..d };
    let layout = SynthLayout { patients: a.patients, nodule_slices: a.nodule_slices, blank_slices: a.blank_slices, ..SynthLayout::default() };
    echo("synth", &SynthEcho { out_dir: &a.out_dir, dicom: a.dicom, circles: &circles, layout: &layout });
    let n = if a.dicom {
        synth::write_dicom_dataset(&a.out_dir, &circles, &layout, &window)?
    } else {
        synth::write_png_dataset(&a.out_dir, &circles, &layout)?
    };
    println!("wrote {n} slices to {}", a.out_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory searched recursively for .dcm files
    pub input: PathBuf,
    /// Output root for windowed PNGs and slices.jsonl
    pub output: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Serialize)]
struct IngestEcho<'a> {
    input: &'a Path,
    output: &'a Path,
    window: WindowSpec,
}

fn ingest_cmd(a: IngestArgs, file: &FileConfig) -> Result<()> {
    let window = a.window.resolve(file)?;
    echo("ingest", &IngestEcho { input: &a.input, output: &a.output, window });
    let s = ingest::ingest_directory(&a.input, &a.output, &window)?;
    println!("ingested {} slices ({} masks, {} warnings) into {}", s.slices, s.masks, s.warnings, a.output.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    /// Dataset root laid out as <root>/<patient>/<slice>.png
    pub root: PathBuf,
    /// Where to write the manifest [default: <root>/manifest.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn manifest_cmd(a: ManifestArgs) -> Result<()> {
    let root = fs::canonicalize(&a.root).with_context(|| format!("dataset root {}", a.root.display()))?;
    let out = a.out.unwrap_or_else(|| root.join("manifest.json"));
    let m = build_manifest(&root)?;
    m.save(&out)?;
    let nodules = m.samples.iter().filter(|s| s.has_nodule).count();
    println!("{} samples ({} with nodules) from {} patients -> {}", m.len(), nodules, m.patients.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    pub manifest: PathBuf,
    /// Train,val,test patient fractions [default: 0.8,0.1,0.1]
    #[arg(long, value_parser = parse_ratios)]
    pub ratios: Option<[f64; 3]>,
    /// Shuffle seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output manifest [default: overwrite the input]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SplitEcho {
    ratios: [f64; 3],
    seed: u64,
}

fn split_cmd(a: SplitArgs, file: &FileConfig) -> Result<()> {
    let r = resolve_ratios(a.ratios, file)?;
    let seed = a.seed.or(file.split.seed).unwrap_or(0);
    echo("split", &SplitEcho { ratios: [r.train, r.val, r.test], seed });
    let m = load_manifest(&a.manifest)?;
    let out = split_by_patient(&m, &r, seed)?;
    out.save(a.out.as_deref().unwrap_or(&a.manifest))?;
    let counts = out.patient_counts();
    let get = |s| counts.get(&s).copied().unwrap_or(0);
    println!(
        "patients: train {}, val {}, test {}",
        get(Split::Training),
        get(Split::Validation),
        get(Split::Test)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    pub manifest: PathBuf,
    /// Also write the table here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn stats_cmd(a: StatsArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let csv = nodule_stats(&m)?.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    pub manifest: PathBuf,
    /// Directory for checkpoints and loss history
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    model: UNetConfig,
    window: WindowSpec,
    train: &'a TrainConfig,
}

fn nodule_view(m: &Manifest, split: Split, seed: u64) -> Result<Option<Vec<dataset::ViewSample>>> {
    match training_view(m, split, 0.0, seed) {
        Ok(v) => Ok(Some(v)),
        Err(dataset::DatasetError::NoNoduleSamples(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_history(dir: &Path, stem: &str, h: &trainer::TrainHistory) -> Result<()> {
    write(&dir.join(format!("{stem}.csv")), &h.to_csv())?;
    write(&dir.join(format!("{stem}.jsonl")), &h.to_jsonl())
}

fn train_cmd(a: TrainCmdArgs, file: &FileConfig) -> Result<()> {
    let model_cfg = a.model.resolve(file)?;
    let window = a.window.resolve(file)?;
    let mut cfg = a.train.resolve(file)?;
    cfg.checkpoint_dir = Some(a.out_dir.clone());
    echo("train", &TrainEcho { model: model_cfg, window, train: &cfg });

    let m = load_manifest(&a.manifest)?;
    let Some(train_view) = nodule_view(&m, Split::Training, cfg.seed)? else {
        bail!("training split has no nodule samples; run `split` first");
    };
    let val_view = nodule_view(&m, Split::Validation, cfg.seed)?;
    if val_view.is_none() {
        log::warn!("validation split has no nodule samples; keeping the last epoch");
    }
    let source = Arc::new(FileSource { window });
    let mut train = Loader::new(train_view, source.clone(), cfg.train_loader())?;
    let mut val = val_view.map(|v| Loader::new(v, source, cfg.eval_loader())).transpose()?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed)?;
    let out = trainer::train(&mut model, &mut train, val.as_mut(), &cfg)?;
    unet::save(&out.best, &a.out_dir.join(BEST_CHECKPOINT))?;
    write_history(&a.out_dir, "history", &out.history)?;
    match (out.history.best_epoch, out.history.best_val_loss) {
        (Some(e), Some(l)) => println!("best epoch {e} (validation loss {l:.6}); checkpoints in {}", a.out_dir.display()),
        _ => println!("trained {} epochs; checkpoints in {}", out.history.epochs.len(), a.out_dir.display()),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    pub manifest: PathBuf,
    /// Checkpoint to continue from
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub window: WindowArgs,
}

fn finetune_cmd(a: FinetuneArgs, file: &FileConfig) -> Result<()> {
    let window = a.window.resolve(file)?;
    let mut cfg = a.train.resolve(file)?;
    cfg.checkpoint_dir = Some(a.out_dir.clone());
    let mut model: Model<f32> = unet::load(&a.checkpoint, None).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    echo("finetune", &TrainEcho { model: *model.config(), window, train: &cfg });

    let m = load_manifest(&a.manifest)?;
    let view = trainer::finetune_view(&m, &cfg)?;
    let val_view = nodule_view(&m, Split::Validation, cfg.seed)?;
    let source = Arc::new(FileSource { window });
    let mut train = Loader::new(view, source.clone(), cfg.train_loader())?;
    let mut val = val_view.map(|v| Loader::new(v, source, cfg.eval_loader())).transpose()?;
    let history = trainer::finetune(&mut model, &mut train, val.as_mut(), &cfg)?;
    write_history(&a.out_dir, "finetune_history", &history)?;
    println!("finetuned {} epochs on {} slices; wrote {}", history.epochs.len(), train.len(), a.out_dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

#[derive(Args, Debug)]
#[group(id = "predictor", required = true, multiple = false)]
pub struct PredictorArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Predict the ground truth itself (pipeline check; scores 1.0)
    #[arg(long)]
    pub oracle: bool,
    /// Predict all-background masks
    #[arg(long)]
    pub empty: bool,
}

impl PredictorArgs {
    fn build(&self) -> Result<Box<dyn Segmenter>> {
        Ok(match &self.checkpoint {
            Some(p) => Box::new(unet::load::<f32>(p, None).with_context(|| format!("loading {}", p.display()))?),
            None if self.oracle => Box::new(OracleSegmenter),
            None => Box::new(EmptySegmenter),
        })
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    /// Split to score
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Probability threshold [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Write metrics.csv and summary.txt here
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub loader: config::LoaderArgs,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    split: &'a str,
    threshold: f64,
    predictor: String,
    window: WindowSpec,
    loader: &'a LoaderConfig,
}

fn eval_loader(batch_size: usize, loader: &config::LoaderArgs, file: &FileConfig) -> Result<LoaderConfig> {
    let d = LoaderConfig::default();
    let mut workers = loader.workers.or(file.loader.workers).unwrap_or(d.workers);
    if let Some(cap) = config::thread_cap()? {
        workers = workers.min(cap);
    }
    let cfg = LoaderConfig {
        batch_size,
        workers,
        queue_ratio: loader.queue_ratio.or(file.loader.queue_ratio).unwrap_or(d.queue_ratio),
        ..d
    }
    .for_eval();
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn eval_cmd(a: EvalArgs, file: &FileConfig) -> Result<()> {
    let threshold = resolve_threshold(a.threshold, file)?;
    let window = a.window.resolve(file)?;
    let loader = eval_loader(a.batch_size, &a.loader, file)?;
    let predictor = match &a.predictor.checkpoint {
        Some(p) => p.display().to_string(),
        None if a.predictor.oracle => "oracle".into(),
        None => "empty".into(),
    };
    echo("eval", &EvalEcho { split: a.split.as_str(), threshold, predictor, window, loader: &loader });

    let model = a.predictor.build()?;
    let m = load_manifest(&a.manifest)?;
    let view = split_view(&m, a.split);
    if view.is_empty() {
        bail!("{} split is empty", a.split.as_str());
    }
    let report = metrics::evaluate(model.as_ref(), view, Arc::new(FileSource { window }), &loader, threshold)?;
    let summary = report.summary();
    if let Some(dir) = &a.out_dir {
        write(&dir.join("metrics.csv"), &report.to_csv())?;
        write(&dir.join("summary.txt"), &summary)?;
    }
    print!("{summary}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct OverlayArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub predictor: PredictorArgs,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Only render nodule slices
    #[arg(long)]
    pub nodules_only: bool,
    /// Render at most this many slices
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}

fn overlay_cmd(a: OverlayArgs, file: &FileConfig) -> Result<()> {
    let threshold = resolve_threshold(a.threshold, file)?;
    let window = a.window.resolve(file)?;
    let model = a.predictor.build()?;
    let m = load_manifest(&a.manifest)?;
    let mut view = split_view(&m, a.split);
    if a.nodules_only {
        view.retain(|s| m.samples[s.id].has_nodule);
    }
    if let Some(n) = a.limit {
        view.truncate(n);
    }
    if view.is_empty() {
        bail!("no slices to render in the {} split", a.split.as_str());
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let loader_cfg = LoaderConfig { batch_size: 1, workers: 1, ..LoaderConfig::default() }.for_eval();
    let mut loader = Loader::new(view, Arc::new(FileSource { window }), loader_cfg)?;
    let mut written = 0;
    for batch in loader.epoch::<f32>(0) {
        let batch = batch?;
        let probs = model.predict(&batch)?;
        let preds = binarize(&probs, threshold)?;
        let gts = binarize(&batch.masks, 0.5)?;
        let s = batch.images.shape();
        for (i, id) in batch.sample_ids.iter().enumerate() {
            let base = ingest::quantize8(&NormImage { rows: s.h, cols: s.w, values: batch.images.item(i).to_vec() });
            let img = metrics::overlay(&preds[i], &gts[i], &base)?;
            let path = a.out_dir.join(format!("overlay_{id:05}.png"));
            write_rgb_png(&path, &img)?;
            written += 1;
        }
    }
    println!("wrote {written} overlays to {}", a.out_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
#[group(id = "data", required = true, multiple = false)]
pub struct DataArgs {
    /// Time the training split of this manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Time this many synthetic in-memory slices
    #[arg(long)]
    pub synthetic: Option<usize>,
}

impl DataArgs {
    fn describe(&self) -> String {
        match (&self.manifest, self.synthetic) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(n)) => format!("synthetic:{n}"),
            _ => String::new(),
        }
    }

    fn build(&self, window: WindowSpec, size: usize, delay: Duration) -> Result<(Vec<dataset::ViewSample>, Arc<Delayed<Box<dyn SampleSource>>>)> {
        let (view, inner): (_, Box<dyn SampleSource>) = match (&self.manifest, self.synthetic) {
            (Some(p), _) => {
                let m = load_manifest(p)?;
                let v = split_view(&m, Split::Training);
                if v.is_empty() {
                    bail!("training split of {} is empty; run `split` first", p.display());
                }
                (v, Box::new(FileSource { window }))
            }
            (None, Some(n)) => {
                if n == 0 {
                    return Err(UsageError("--synthetic needs at least one slice".into()).into());
                }
                let cfg = CirclesConfig { size, min_radius: size as f64 / 8.0, max_radius: size as f64 / 4.0, ..CirclesConfig::default() };
                let src = synth::circles(&cfg, 0, n);
                (src.view(), Box::new(src))
            }
            _ => unreachable!("clap enforces one data source"),
        };
        Ok((view, Arc::new(Delayed { inner, delay })))
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Worker counts to try
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers: Vec<usize>,
    /// Queue ratios to try (capacity = ratio x batch size)
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub queue_ratios: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub epochs_per_cell: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    /// Extra latency added to every sample load
    #[arg(long, default_value_t = 0)]
    pub decode_delay_ms: u64,
    /// Side of synthetic slices
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write sweep.csv and sweep.dat here
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    data: String,
    sweep: &'a SweepConfig,
}

fn sweep_cmd(a: SweepArgs, file: &FileConfig) -> Result<()> {
    let window = a.window.resolve(file)?;
    let cfg = SweepConfig {
        workers: a.workers.clone(),
        queue_ratios: a.queue_ratios.clone(),
        epochs_per_cell: a.epochs_per_cell,
        batch_size: a.batch_size,
        decode_delay: Duration::from_millis(a.decode_delay_ms),
        worker_cap: config::thread_cap()?.unwrap_or(DEFAULT_WORKER_CAP),
        seed: a.seed,
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    echo("bench-sweep", &SweepEcho { data: a.data.describe(), sweep: &cfg });
    let (view, source) = a.data.build(window, a.size, cfg.decode_delay)?;
    let result = bench::sweep(&view, source, &cfg)?;
    let csv = result.to_csv();
    print!("{csv}");
    if let Some(best) = result.best() {
        println!("fastest: workers {} queue_ratio {} ({:.1} samples/s)", best.workers, best.queue_ratio, best.samples_per_sec);
    }
    if let Some(dir) = &a.out_dir {
        write(&dir.join("sweep.csv"), &csv)?;
        write(&dir.join("sweep.dat"), &result.plot_data())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct TimeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Side of synthetic slices
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Forward passes over the data for inference timing
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Append the report rows to this CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub window: WindowArgs,
}

fn time_cmd(a: TimeArgs, file: &FileConfig) -> Result<()> {
    let model_cfg = a.model.resolve(file)?;
    let window = a.window.resolve(file)?;
    let cfg = a.train.resolve(file)?;
    echo("bench-time", &TrainEcho { model: model_cfg, window, train: &cfg });
    let (view, source) = a.data.build(window, a.size, Duration::ZERO)?;
    let mut model = Model::<f32>::build(model_cfg, cfg.seed)?;

    let mut train = Loader::new(view.clone(), source.clone(), cfg.train_loader())?;
    let mut val = Loader::new(view.clone(), source.clone(), cfg.eval_loader())?;
    let training = bench::time_training(&mut model, &mut train, Some(&mut val), &cfg, cfg.epochs)?;

    let mut images: Vec<Tensor<f32>> = Vec::with_capacity(view.len());
    let mut one = Loader::new(view, source, LoaderConfig { batch_size: 1, ..cfg.eval_loader() })?;
    for b in one.epoch::<f32>(0) {
        images.push(b?.images);
    }
    let inference = bench::time_inference(&model, &images, cfg.batch_size, a.repetitions)?;

    let mut csv = String::from(TimingReport::csv_header());
    csv.push('\n');
    for r in [&training, &inference] {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        write(out, &csv)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let entries = run_gradient_suite(a.seed)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<32} checked {:>4} skipped {:>3} max_rel_error {:.3e} (tol {:.0e})", e.name, e.checked, e.skipped, e.max_rel_error, e.tolerance);
        failed += usize::from(!e.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", entries.len());
    }
    println!("all {} gradient checks passed", entries.len());
    Ok(())
}
