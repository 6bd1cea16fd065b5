//! Commands behind the `earloc` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! (non-finite training loss or a failed gradient check).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use earloc_core::cascade::{build_stage2_dataset, Cascade, CascadeConfig, Detector, ModelDetector};
use earloc_core::data::{
    generate, image_name, load_dataset, split, write_manifest, write_sample, AnnotatedImage, SceneSpec,
};
use earloc_core::eval::{curve, objectness_vs_iou_report, threshold_grid, IouRule, ImageRecord};
use earloc_core::gradcheck::run_suite;
use earloc_core::net::{load_model, save_model, Model};
use earloc_core::tensor::OpKind;
use earloc_core::train::{epoch_csv, step_csv, train, EpochLoss, RunConfig, TrainReport};
use earloc_core::{Detection, Error};
use image::GrayImage;
use log::info;

#[derive(Debug, Parser)]
#[command(name = "earloc", version, about = "Ear localisation with anchor-based detectors")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with manifest.csv, train.csv and test.csv.
    Gen(GenArgs),
    /// Train one detector.
    Train(TrainArgs),
    /// Train both stages of the cascade.
    TrainCascade(TrainCascadeArgs),
    /// Print the detections of one image.
    Detect(DetectArgs),
    /// Evaluate a detector over a manifest at a grid of IOU thresholds.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Side of the square images.
    #[arg(long, default_value_t = 320)]
    pub size: u32,
    #[arg(long, default_value_t = 0.25)]
    pub occlusion_prob: f64,
    /// Largest share of the ear an occluder may hide.
    #[arg(long, default_value_t = 0.4)]
    pub max_occlusion: f64,
    /// Gaussian noise sigma in gray levels.
    #[arg(long, default_value_t = 6.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub min_distractors: u32,
    #[arg(long, default_value_t = 5)]
    pub max_distractors: u32,
    /// Share of images in train.csv.
    #[arg(long, default_value_t = 0.5)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Sets both the initialisation and the shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Final model; the best checkpoint goes next to it as `<stem>.best.<ext>`.
    #[arg(long)]
    pub model_out: PathBuf,
    /// Per-epoch loss CSV (default `<stem>.loss.csv` next to the model).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Optional per-step loss CSV.
    #[arg(long)]
    pub step_log: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainCascadeArgs {
    #[arg(long)]
    pub config1: PathBuf,
    #[arg(long)]
    pub config2: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Context margin around stage-1 boxes, in pixels.
    #[arg(long, default_value_t = 25.0)]
    pub expansion: f64,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ModelChoice {
    #[arg(long, conflicts_with = "cascade", required_unless_present = "cascade")]
    pub model: Option<PathBuf>,
    /// Stage-1 and stage-2 models.
    #[arg(long, num_args = 2, value_names = ["STAGE1", "STAGE2"])]
    pub cascade: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 0.7)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    pub score_threshold: f64,
    /// Cascade context margin, in pixels.
    #[arg(long, default_value_t = 25.0)]
    pub expansion: f64,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub models: ModelChoice,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RuleArg {
    Strict,
    Inclusive,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub models: ModelChoice,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub iou_from: f64,
    #[arg(long, default_value_t = 0.9)]
    pub iou_to: f64,
    #[arg(long, default_value_t = 0.05)]
    pub iou_step: f64,
    /// Output directory for metrics.csv, objectness.csv and detections.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write metrics.svg.
    #[arg(long)]
    pub plot: bool,
    /// Whether IOU equal to the threshold counts as a hit.
    #[arg(long, value_enum, default_value_t = RuleArg::Strict)]
    pub rule: RuleArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultArg {
    Conv,
    Maxpool,
    Relu,
    Add,
    Concat,
    Upsample,
    Softmax,
    Sigmoid,
    Linear,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupts one backward rule; the suite must then fail.
    #[arg(long, value_enum, hide = true)]
    pub corrupt: Option<FaultArg>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A numerical check did not pass.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Failed(_) => 3,
            CliError::Core(e) => match e {
                Error::NonFinite(_) => 3,
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::TrainCascade(a) => cmd_train_cascade(&a),
        Command::Detect(a) => {
            for line in cmd_detect(&a)? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let spec = SceneSpec {
        width: a.size,
        height: a.size,
        occlusion_prob: a.occlusion_prob,
        max_occlusion: a.max_occlusion,
        noise_sigma: a.noise,
        distractor_range: (a.min_distractors, a.max_distractors),
        seed: a.seed,
        ..Default::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(a.split_fraction > 0.0 && a.split_fraction < 1.0) {
        return Err(CliError::Usage(format!("--split-fraction {} outside (0, 1)", a.split_fraction)));
    }
    create_dir(&a.out.join("images"))?;
    let mut rows = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let s = generate(&spec, i as u64)?;
        let rel = image_name(i);
        write_sample(&a.out, &rel, &s)?;
        rows.push((rel, s.gt));
    }
    write_manifest(&a.out.join("manifest.csv"), &rows)?;
    let (tr, te) = split(&rows, a.split_fraction, a.split_seed)?;
    write_manifest(&a.out.join("train.csv"), &tr)?;
    write_manifest(&a.out.join("test.csv"), &te)?;
    println!(
        "wrote {} images to {} ({} train, {} test)",
        rows.len(),
        a.out.display(),
        tr.len(),
        te.len()
    );
    Ok(())
}

fn load_config(path: &Path, o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr_initial {
        cfg.lr_initial = lr;
    }
    if let Some(lr) = o.lr_final {
        cfg.lr_final = lr;
    }
    if let Some(s) = o.seed {
        cfg.init_seed = s;
        cfg.shuffle_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_nonempty(path: &Path) -> CliResult<Vec<AnnotatedImage>> {
    let data = load_dataset(path)?;
    if data.is_empty() {
        return Err(CliError::Core(Error::Manifest {
            path: path.to_path_buf(),
            line: 1,
            msg: "manifest lists no images".into(),
        }));
    }
    Ok(data)
}

/// `dir/stem.tag.ext` for a model path `dir/stem.ext`.
pub fn sibling(path: &Path, tag: &str, ext: Option<&str>) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = ext.or_else(|| path.extension().and_then(|e| e.to_str()));
    let name = match ext {
        Some(e) => format!("{stem}.{tag}.{e}"),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Trains one model, keeping the loss log current after every epoch.
fn train_to(cfg: &RunConfig, data: &[AnnotatedImage], model_out: &Path, loss_log: &Path) -> CliResult<TrainReport> {
    if let Some(dir) = model_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut model = Model::<f32>::new(cfg.net.clone(), cfg.init_seed)?;
    let mut rows: Vec<EpochLoss> = Vec::new();
    let report = train(cfg, &mut model, data, |e, _| {
        rows.push(*e);
        fs::write(loss_log, epoch_csv(&rows)).map_err(|err| Error::Io {
            path: loss_log.to_path_buf(),
            source: err,
        })
    })?;
    save_model(&model, model_out)?;
    save_model(&report.best, &sibling(model_out, "best", None))?;
    write_file(&sibling(model_out, "cfg", Some("txt")), &cfg.to_text())?;
    Ok(report)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let data = load_nonempty(&a.data)?;
    let loss_log = a.loss_log.clone().unwrap_or_else(|| sibling(&a.model_out, "loss", Some("csv")));
    let report = train_to(&cfg, &data, &a.model_out, &loss_log)?;
    if let Some(p) = &a.step_log {
        write_file(p, &step_csv(&report.steps))?;
    }
    let last = report.epochs.last().map_or(f64::NAN, |e| e.total);
    println!(
        "trained {} epochs on {} images: final loss {last:.4}, best epoch {}",
        report.epochs.len(),
        data.len(),
        report.best_epoch
    );
    Ok(())
}

pub fn cmd_train_cascade(a: &TrainCascadeArgs) -> CliResult<()> {
    let cfg1 = load_config(&a.config1, &a.overrides)?;
    let cfg2 = load_config(&a.config2, &a.overrides)?;
    if !(a.expansion >= 0.0) {
        return Err(CliError::Usage("--expansion must be non-negative".into()));
    }
    let data = load_nonempty(&a.data)?;
    create_dir(&a.out_dir)?;
    let s1_path = a.out_dir.join("stage1.uesg");
    info!("stage 1: {} images", data.len());
    train_to(&cfg1, &data, &s1_path, &a.out_dir.join("stage1.loss.csv"))?;
    let stage1 = ModelDetector::new(load_model(&s1_path)?, 0.0, cfg1.nms_iou);
    let s2 = build_stage2_dataset(&stage1, &data, a.expansion, cfg2.net.input_size as u32)?;
    if s2.samples.is_empty() {
        return Err(CliError::Core(Error::InvalidArgument(
            "stage 1 produced no usable crops for stage 2".into(),
        )));
    }
    info!("stage 2: {} crops, {} images dropped", s2.samples.len(), s2.dropped.len());
    let s2_path = a.out_dir.join("stage2.uesg");
    train_to(&cfg2, &s2.samples, &s2_path, &a.out_dir.join("stage2.loss.csv"))?;
    let summary = format!(
        "stage1 = stage1.uesg\nstage2 = stage2.uesg\nexpansion = {}\ntrain_images = {}\nstage2_samples = {}\nstage2_dropped = {}\n",
        a.expansion,
        data.len(),
        s2.samples.len(),
        s2.dropped.len()
    );
    write_file(&a.out_dir.join("cascade.txt"), &summary)?;
    println!(
        "trained cascade in {}: stage 2 used {} of {} images",
        a.out_dir.display(),
        s2.samples.len(),
        data.len()
    );
    Ok(())
}

/// A single network or a two-stage cascade.
pub enum AnyDetector {
    Single(ModelDetector),
    Cascade(Cascade<ModelDetector, ModelDetector>),
}

impl Detector for AnyDetector {
    fn input_size(&self) -> u32 {
        match self {
            AnyDetector::Single(d) => d.input_size(),
            AnyDetector::Cascade(c) => c.input_size(),
        }
    }

    fn detect(&self, image: &GrayImage) -> earloc_core::Result<Vec<Detection>> {
        match self {
            AnyDetector::Single(d) => d.detect(image),
            AnyDetector::Cascade(c) => c.detect(image),
        }
    }

    fn detect_batch(&self, images: &[&GrayImage]) -> earloc_core::Result<Vec<Vec<Detection>>> {
        match self {
            AnyDetector::Single(d) => d.detect_batch(images),
            AnyDetector::Cascade(c) => c.detect_batch(images),
        }
    }
}

fn check_unit(name: &str, v: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{name} {v} outside [0, 1]")))
    }
}

/// Loads the detector selected by `--model` or `--cascade`. Stage 1 of a
/// cascade keeps every box so that its best one is always refined; the score
/// threshold applies to the final detections.
pub fn load_detector(m: &ModelChoice) -> CliResult<AnyDetector> {
    check_unit("--nms-iou", m.nms_iou)?;
    check_unit("--score-threshold", m.score_threshold)?;
    match (&m.model, &m.cascade) {
        (Some(p), None) => Ok(AnyDetector::Single(ModelDetector::new(load_model(p)?, m.score_threshold, m.nms_iou))),
        (None, Some(paths)) if paths.len() == 2 => {
            let s1 = ModelDetector::new(load_model(&paths[0])?, 0.0, m.nms_iou);
            let s2 = ModelDetector::new(load_model(&paths[1])?, m.score_threshold, m.nms_iou);
            let cfg = CascadeConfig {
                expansion: m.expansion,
                nms_iou: m.nms_iou,
                ..Default::default()
            };
            Cascade::new(s1, s2, cfg)
                .map(AnyDetector::Cascade)
                .map_err(|e| CliError::Usage(e.to_string()))
        }
        _ => Err(CliError::Usage("give exactly one of --model or --cascade STAGE1 STAGE2".into())),
    }
}

/// `x_min y_min x_max y_max score`.
pub fn format_detection(d: &Detection) -> String {
    let b = &d.bbox;
    format!("{:.2} {:.2} {:.2} {:.2} {:.4}", b.x_min, b.y_min, b.x_max, b.y_max, d.score)
}

/// Output lines for one image, best score first.
pub fn detection_lines(det: &impl Detector, image: &GrayImage) -> CliResult<Vec<String>> {
    let mut dets = det.detect(image)?;
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets.iter().map(format_detection).collect())
}

pub fn cmd_detect(a: &DetectArgs) -> CliResult<Vec<String>> {
    let det = load_detector(&a.models)?;
    let image = image::open(&a.image).map_err(Error::from)?.into_luma8();
    detection_lines(&det, &image)
}

/// Runs `det` over `data` and keeps the top detection of each image.
pub fn records(det: &impl Detector, data: &[AnnotatedImage]) -> CliResult<Vec<ImageRecord>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let images: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        for (s, d) in chunk.iter().zip(det.detect_batch(&images)?) {
            out.push(ImageRecord::new(s.source_id.clone(), s.gt, &d));
        }
    }
    Ok(out)
}

fn records_csv(recs: &[ImageRecord]) -> String {
    let mut s = String::from("id,gt_x_min,gt_y_min,gt_x_max,gt_y_max,x_min,y_min,x_max,y_max,score,iou\n");
    for r in recs {
        let g = &r.gt;
        s.push_str(&format!("{},{},{},{},{}", r.id, g.x_min, g.y_min, g.x_max, g.y_max));
        match &r.top {
            Some(d) => {
                let b = &d.bbox;
                s.push_str(&format!(
                    ",{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}\n",
                    b.x_min,
                    b.y_min,
                    b.x_max,
                    b.y_max,
                    d.score,
                    r.iou()
                ));
            }
            None => s.push_str(",,,,,,0\n"),
        }
    }
    s
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let grid = threshold_grid(a.iou_from, a.iou_to, a.iou_step).map_err(|e| CliError::Usage(e.to_string()))?;
    let det = load_detector(&a.models)?;
    let data = load_nonempty(&a.data)?;
    let recs = records(&det, &data)?;
    let rule = match a.rule {
        RuleArg::Strict => IouRule::Strict,
        RuleArg::Inclusive => IouRule::Inclusive,
    };
    let c = curve(&recs, &grid, rule)?;
    let obj = objectness_vs_iou_report(&recs, &grid)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), &c.to_csv())?;
    write_file(&a.out.join("objectness.csv"), &obj.to_csv())?;
    write_file(&a.out.join("detections.csv"), &records_csv(&recs))?;
    if a.plot {
        write_file(&a.out.join("metrics.svg"), &c.to_svg("Detection metrics vs IOU threshold"))?;
    }
    let mean_iou = recs.iter().map(ImageRecord::iou).sum::<f64>() / recs.len() as f64;
    println!("evaluated {} images: mean top-1 IOU {mean_iou:.4}", recs.len());
    for t in [0.5, 0.8] {
        if let Some(acc) = c.row_at(t).and_then(|r| r.accuracy) {
            println!("accuracy at IOU {t}: {acc:.4}");
        }
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let fault = a.corrupt.map(|f| match f {
        FaultArg::Conv => OpKind::Conv2d,
        FaultArg::Maxpool => OpKind::MaxPool2,
        FaultArg::Relu => OpKind::Relu,
        FaultArg::Add => OpKind::Add,
        FaultArg::Concat => OpKind::Concat,
        FaultArg::Upsample => OpKind::Upsample2x,
        FaultArg::Softmax => OpKind::Softmax,
        FaultArg::Sigmoid => OpKind::Sigmoid,
        FaultArg::Linear => OpKind::Linear,
    });
    let report = run_suite(fault)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::Failed(format!("gradient check failed: {}", names.join(", "))))
    }
}
