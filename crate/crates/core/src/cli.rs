//! `smallaug` command line.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O
//! error, 4 evaluator protocol failure.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;

use crate::augment::{apply_policy_set_with_stats, parse_policy_file, AugmentStats, PlacementConfig};
use crate::data::{self, load_manifest, parse_dota, write_manifest, DataError, Dataset, ImageEntry};
use crate::metrics::{self, EvalConfig, Interpolation};
use crate::report;
use crate::search::{self, GateMode, OracleSpec, SearchConfig, SubprocessEvaluator, SyntheticOracle};
use crate::seed::{self, derive_seed};
use crate::synth::{self, SynthConfig};
use crate::tpe::{read_trials_jsonl, TpeConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_EVALUATOR: i32 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Evaluator(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Evaluator(_) => EXIT_EVALUATOR,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Evaluator(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Decode { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "smallaug", version, about = "Small-object copy-paste augmentation and policy search")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Base seed for every random stream
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-image and per-fold parallelism
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    workers: u32,
    /// Log level (overridden by SMALLAUG_LOG)
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Augment a dataset with a policy file
    Augment(AugmentArgs),
    /// Search augmentation policies with K-fold TPE
    Search(SearchArgs),
    /// Evaluate detections against ground truth
    Evaluate(EvaluateArgs),
    /// Summarize the best searched policies
    Report(ReportArgs),
    /// Write a synthetic dataset
    Synth(SynthArgs),
    /// Convert DOTA label files into a manifest
    ImportDota(ImportDotaArgs),
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Dataset manifest to augment
    #[arg(long)]
    input: PathBuf,
    /// Policy file: a JSON list of {op, p, m}
    #[arg(long)]
    policies: PathBuf,
    /// Directory for the augmented images and manifest
    #[arg(long)]
    output: PathBuf,
    /// Ignore each policy's probability and always apply it
    #[arg(long)]
    force_p1: bool,
    /// Placement attempts per paste before it is skipped
    #[arg(long, default_value_t = 50)]
    max_attempts: u32,
    /// Minimum gap in pixels between a paste and any other box
    #[arg(long, default_value_t = 0)]
    margin: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GateArg {
    Stratified,
    Bypass,
    PerImage,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Training dataset manifest
    #[arg(long)]
    dataset: PathBuf,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    k: u32,
    /// TPE trials per fold
    #[arg(long)]
    num_search: u32,
    /// Policies kept from each fold
    #[arg(long, default_value_t = 4)]
    top_n: u32,
    /// `synthetic:<spec.json>` or `subprocess:<train-cmd>,<loss-cmd>`
    #[arg(long)]
    evaluator: String,
    /// Directory for policies.json, trials and the report
    #[arg(long)]
    out: PathBuf,
    /// How a candidate's probability is applied to the held-out fold
    #[arg(long, value_enum, default_value = "stratified")]
    gate: GateArg,
    /// Placement attempts per paste before it is skipped
    #[arg(long, default_value_t = 50)]
    max_attempts: u32,
    /// Minimum gap in pixels between a paste and any other box
    #[arg(long, default_value_t = 0)]
    margin: u32,
    /// Record wall-clock time in search_report.json
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth dataset manifest
    #[arg(long)]
    gt: PathBuf,
    /// Detections file: a JSON list of {image_id, category, bbox, score}
    #[arg(long)]
    dets: PathBuf,
    /// IoU needed for a match
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Recall points for interpolated precision: 101 or 11
    #[arg(long, default_value = "101")]
    interp: String,
    /// Ignore ground truth marked difficult
    #[arg(long)]
    exclude_difficult: bool,
    /// Where to write the JSON result (default: next to the detections file)
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Glob matching trials_fold*.jsonl files
    #[arg(long)]
    trials: String,
    /// Output prefix; writes <prefix>.csv and <prefix>.png
    #[arg(long)]
    out: PathBuf,
    /// Number of lowest-loss trials to keep
    #[arg(long, default_value_t = 20)]
    top: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory for the images and manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 40)]
    images: u32,
    /// Image width in pixels
    #[arg(long, default_value_t = 64)]
    width: u32,
    /// Image height in pixels
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Medium-sized objects added to each image
    #[arg(long, default_value_t = 0)]
    medium_objects: u32,
}

#[derive(Debug, Args)]
struct ImportDotaArgs {
    /// Directory holding the DOTA images
    #[arg(long)]
    images: PathBuf,
    /// Directory holding the DOTA label files
    #[arg(long)]
    labels: PathBuf,
    /// Directory for the converted images and manifest
    #[arg(long)]
    out: PathBuf,
}

fn init_logging(level: &str) {
    let filter = std::env::var("SMALLAUG_LOG").unwrap_or_else(|_| level.to_owned());
    let _ = env_logger::Builder::new()
        .parse_filters(&filter)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    init_logging(&cli.global.log_level);
    let result = match &cli.command {
        Command::Augment(a) => cmd_augment(&cli.global, a, out),
        Command::Search(a) => cmd_search(&cli.global, a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Synth(a) => cmd_synth(&cli.global, a, out),
        Command::ImportDota(a) => cmd_import_dota(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn pool(workers: u32) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers as usize)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn cmd_augment(g: &GlobalArgs, a: &AugmentArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.max_attempts < 1 {
        return Err(CliError::Config("--max-attempts must be at least 1".into()));
    }
    let placement = PlacementConfig {
        max_attempts: a.max_attempts,
        margin: a.margin,
        rng_seed: g.seed,
    };
    let policy_text = fs::read_to_string(&a.policies).map_err(io_err(&a.policies))?;
    let mut policies = parse_policy_file(&policy_text).map_err(|e| CliError::Config(e.to_string()))?;
    if policies.is_empty() {
        return Err(CliError::Config(format!("{}: policy set is empty", a.policies.display())));
    }
    if a.force_p1 {
        for e in &mut policies.entries {
            e.policy.p = 1.0;
        }
    }
    let d = load_manifest(&a.input)?;
    if let Some(input_dir) = a.input.parent() {
        if same_dir(input_dir, &a.output) {
            return Err(CliError::Config("--output must differ from the input directory".into()));
        }
    }

    let results: Vec<Result<(Option<ImageEntry>, AugmentStats), DataError>> = pool(g.workers)?
        .install(|| {
            (0..d.len())
                .into_par_iter()
                .map(|i| {
                    let img = d.load_image(i)?;
                    let mut rng = seed::rng(derive_seed(g.seed, &img.id));
                    let (aug, stats) = apply_policy_set_with_stats(&img, &policies, &placement, &mut rng)
                        .expect("policy set is non-empty");
                    let entry = (stats.pasted > 0).then(|| ImageEntry {
                        id: aug.id,
                        file: None,
                        width: aug.width,
                        height: aug.height,
                        instances: aug.instances,
                        pixels: Some(Arc::new(aug.pixels)),
                    });
                    Ok((entry, stats))
                })
                .collect()
        });

    let mut augmented = d.clone();
    let mut total = AugmentStats::default();
    for (i, r) in results.into_iter().enumerate() {
        let (entry, stats) = r?;
        if let Some(entry) = entry {
            augmented.images[i] = entry;
        }
        total += stats;
    }
    write_manifest(&augmented, &a.output)?;
    let _ = writeln!(
        out,
        "images={} pasted_instances={} skipped_placements={}",
        d.len(),
        total.pasted,
        total.skipped
    );
    Ok(())
}

enum EvaluatorSpec {
    Synthetic(PathBuf),
    Subprocess { train: String, loss: String },
}

fn parse_evaluator(s: &str) -> Result<EvaluatorSpec, CliError> {
    if let Some(path) = s.strip_prefix("synthetic:") {
        if path.is_empty() {
            return Err(CliError::Config("synthetic evaluator needs a spec file".into()));
        }
        return Ok(EvaluatorSpec::Synthetic(PathBuf::from(path)));
    }
    if let Some(rest) = s.strip_prefix("subprocess:") {
        if let Some((train, loss)) = rest.split_once(',') {
            if !train.trim().is_empty() && !loss.trim().is_empty() {
                return Ok(EvaluatorSpec::Subprocess {
                    train: train.to_owned(),
                    loss: loss.to_owned(),
                });
            }
        }
        return Err(CliError::Config(
            "subprocess evaluator must look like subprocess:<train-cmd>,<loss-cmd>".into(),
        ));
    }
    Err(CliError::Config(format!(
        "unknown evaluator `{s}`; expected synthetic:<spec> or subprocess:<train>,<loss>"
    )))
}

fn cmd_search(g: &GlobalArgs, a: &SearchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = SearchConfig {
        k_folds: a.k,
        num_search: a.num_search,
        top_n: a.top_n,
        seed: g.seed,
        placement: PlacementConfig {
            max_attempts: a.max_attempts,
            margin: a.margin,
            rng_seed: g.seed,
        },
        tpe: TpeConfig {
            rng_seed: g.seed,
            ..TpeConfig::default()
        },
        gate: match a.gate {
            GateArg::Stratified => GateMode::Stratified,
            GateArg::Bypass => GateMode::Bypass,
            GateArg::PerImage => GateMode::PerImage,
        },
        workers: g.workers,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let evaluator = parse_evaluator(&a.evaluator)?;
    let d = load_manifest(&a.dataset)?;

    let started = Instant::now();
    let outcome = match evaluator {
        EvaluatorSpec::Synthetic(path) => {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let spec: OracleSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let oracle = SyntheticOracle::new(spec).map_err(|e| CliError::Config(e.to_string()))?;
            search::run_search(&d, &oracle, &cfg)
        }
        EvaluatorSpec::Subprocess { train, loss } => {
            let evaluator = SubprocessEvaluator::new(train, loss, a.out.join("work"));
            search::run_search(&d, &evaluator, &cfg)
        }
    }
    .map_err(|e| match e {
        search::SearchError::TooFewImages { .. } | search::SearchError::Config(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Io(other.to_string()),
    })?;
    let elapsed = a.timing.then(|| started.elapsed());
    outcome
        .write_outputs(&a.out, elapsed)
        .map_err(|e| CliError::Io(e.to_string()))?;

    for fold in &outcome.folds {
        let best = fold
            .best_loss()
            .map_or_else(|| "none".to_owned(), |l| format!("{l:.6}"));
        let _ = writeln!(out, "fold={} trials={} best_loss={best}", fold.fold_index, fold.history.len());
    }
    let _ = writeln!(out, "policies={}", outcome.policy_set().len());
    info!("search finished in {:?}", started.elapsed());
    match outcome.first_error() {
        None => Ok(()),
        Some(e) if e.is_evaluator_failure() => Err(CliError::Evaluator(match e.evaluator_stderr() {
            Some(stderr) => format!("{e}\nevaluator stderr:\n{}", stderr.trim_end()),
            None => e.to_string(),
        })),
        Some(e) => Err(CliError::Io(e.to_string())),
    }
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let interpolation = match a.interp.as_str() {
        "101" => Interpolation::Points101,
        "11" => Interpolation::Points11,
        other => return Err(CliError::Config(format!("--interp must be 101 or 11, got `{other}`"))),
    };
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(CliError::Config(format!("--iou = {} must lie in (0, 1]", a.iou)));
    }
    let cfg = EvalConfig {
        iou_thresh: a.iou,
        interpolation,
        include_difficult: !a.exclude_difficult,
    };
    let gts = load_manifest(&a.gt)?;
    let text = fs::read_to_string(&a.dets).map_err(io_err(&a.dets))?;
    let dets = metrics::parse_detections(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let result = metrics::evaluate(&dets, &gts, &cfg).map_err(|e| CliError::Config(e.to_string()))?;

    let label = a
        .dets
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("detections");
    let _ = write!(out, "{}", metrics::render_table(&[(label, &result)]));

    let json_path = a.json.clone().unwrap_or_else(|| {
        a.dets.with_file_name(format!("{label}.eval.json"))
    });
    let doc = serde_json::json!({ "config": cfg, "result": result });
    let mut text = serde_json::to_string_pretty(&doc).expect("result serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let paths: Vec<PathBuf> = glob::glob(&a.trials)
        .map_err(|e| CliError::Config(format!("bad --trials pattern: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Io(e.to_string()))?;
    if paths.is_empty() {
        return Err(CliError::Io(format!("no trials files match `{}`", a.trials)));
    }
    let mut files = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = fs::File::open(p).map_err(io_err(p))?;
        let recs = read_trials_jsonl(BufReader::new(f)).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        files.push(recs);
    }
    let rows = report::select_top(&files, a.top);

    let csv_path = with_suffix(&a.out, "csv");
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&csv_path, report::to_csv(&rows)).map_err(io_err(&csv_path))?;
    let png_path = with_suffix(&a.out, "png");
    if let Err(e) = report::render_chart(&rows, &png_path) {
        log::warn!("chart not written: {e}");
    }

    let total: usize = files.iter().map(Vec::len).sum();
    let _ = writeln!(out, "trials={total} selected={}", rows.len());
    match report::p_m_correlation(&rows) {
        Some(r) => {
            let _ = writeln!(out, "pearson_p_m={r:.6}");
        }
        None => {
            let _ = writeln!(out, "pearson_p_m=undefined");
        }
    }
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn cmd_synth(g: &GlobalArgs, a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = SynthConfig {
        images: a.images,
        width: a.width,
        height: a.height,
        medium_objects: a.medium_objects,
        seed: g.seed,
        ..SynthConfig::default()
    };
    if cfg.width < 16 || cfg.height < 16 {
        return Err(CliError::Config("images must be at least 16x16".into()));
    }
    let d = synth::generate_dataset(&cfg)?;
    let path = write_manifest(&d, &a.out)?;
    let _ = writeln!(out, "images={} instances={} manifest={}", d.len(), d.instance_count(), path.display());
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn cmd_import_dota(a: &ImportDotaArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut labels: Vec<PathBuf> = fs::read_dir(&a.labels)
        .map_err(io_err(&a.labels))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    labels.sort();

    let mut images = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    for label in &labels {
        let stem = label.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(file) = IMAGE_EXTENSIONS
            .iter()
            .map(|ext| format!("{stem}.{ext}"))
            .find(|f| a.images.join(f).is_file())
        else {
            log::warn!("no image for {}", label.display());
            continue;
        };
        let img_path = a.images.join(&file);
        let (w, h) = image::image_dimensions(&img_path)
            .map_err(|e| CliError::Io(format!("{}: {e}", img_path.display())))?;
        let text = fs::read_to_string(label).map_err(io_err(label))?;
        let instances =
            parse_dota(&text, (w, h)).map_err(|e| CliError::Config(format!("{}: {e}", label.display())))?;
        for inst in &instances {
            if !categories.contains(&inst.category) {
                categories.push(inst.category.clone());
            }
        }
        let mut entry = ImageEntry::new(stem, w, h);
        entry.file = Some(file);
        entry.instances = instances;
        images.push(entry);
    }
    categories.sort();
    let mut d = Dataset::new(images, categories)?;
    d.root = Some(a.images.clone());
    let path = data::write_manifest(&d, &a.out)?;
    let _ = writeln!(out, "images={} instances={} manifest={}", d.len(), d.instance_count(), path.display());
    Ok(())
}
