//! The `signdet` command line.
//!
//! Exit codes: 0 on success, 1 when the command ran but found problems (validation findings,
//! augmentation failures, target collisions, a failed gradient check) or could not process
//! its inputs, 2 on usage errors, including refusing to overwrite an output without
//! `--force`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{
    from_coco, from_voc, parse_label_file, parse_predictions, serialize_predictions, serialize_yolo, to_coco,
    to_voc, validate_dataset, validate_tree, Annotation, DatasetManifest, ImageSize, LabelFile, LabelMap,
    ValidationReport,
};
use crate::dataset::{self, AugmentSpec, SplitSpec};
use crate::detector::{self, Grid, HeadConfig, LayerSpec, ModelConfig, TargetGrid};
use crate::eval::{self, EvalImage};
use crate::geometry::{nms, BBox};
use crate::imaging::{self, FramePolicy, ResizeMode};
use crate::losses::{self, LossWeights};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "signdet", version, about = "Detection math and YOLO dataset tooling")]
pub struct Cli {
    /// Label map file, one class name per line (`name` or `name=alias`). Defaults to A-Z, 0-9.
    #[arg(long, global = true, value_name = "PATH")]
    label_map: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress progress notes on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset tree or manifest for annotation and pairing problems.
    Validate(InputArgs),
    /// Convert YOLO labels to VOC XML or COCO JSON, or back to YOLO.
    Convert(ConvertArgs),
    /// Write rotated (and optionally grayscale / resized) copies of a dataset.
    Augment(AugmentArgs),
    /// Assign train/val/test splits deterministically.
    Split(SplitArgs),
    /// Per-class, per-split and image-size counts.
    Stats(InputArgs),
    /// Pick frame indices (or frame files) out of an extracted clip.
    SelectFrames(SelectFramesArgs),
    /// Build a target grid from a YOLO label file.
    Encode(EncodeArgs),
    /// Turn a prediction grid into detections.
    Decode(DecodeArgs),
    /// Evaluate the four losses on saved grids.
    Loss(LossArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit a grid to labels by plain gradient descent.
    ToyTrain(ToyTrainArgs),
    /// Non-maximum suppression over a prediction file.
    Nms(NmsArgs),
    /// Precision, recall, accuracy, AP and confusion against ground truth.
    Eval(EvalArgs),
    /// Shape propagation and parameter counts for a layer chain.
    Layers(LayersArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Dataset root (with images/ and labels/) or a manifest TSV.
    input: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Voc,
    Coco,
    Yolo,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Dataset root or manifest; for `--to yolo`, a COCO JSON file or a directory of VOC XML.
    input: PathBuf,
    #[arg(long, value_enum)]
    to: Format,
    /// Output directory (voc, yolo) or file (coco).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clockwise rotations in degrees, multiples of 90.
    #[arg(long, default_value = "90,180,270,0", value_parser = parse_turns)]
    turns: Turns,
    /// Resize every output to WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    resize: Option<(usize, usize)>,
    /// Use nearest-neighbour instead of bilinear resizing.
    #[arg(long)]
    nearest: bool,
    #[arg(long)]
    grayscale: bool,
    /// Do not copy the unrotated originals.
    #[arg(long)]
    no_originals: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    input: PathBuf,
    /// Train:val:test proportions, normalized by their sum.
    #[arg(long, default_value = "80:10:10", value_parser = parse_ratios)]
    ratios: Ratios,
    /// Split individual files instead of keeping rotations of one image together.
    #[arg(long)]
    ungrouped: bool,
    /// Manifest to write; stdout when absent. Paths stay relative to the dataset root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["total", "dir"])))]
struct SelectFramesArgs {
    /// Number of frames in the clip.
    #[arg(long)]
    total: Option<usize>,
    /// Directory of frames named `<prefix><number>.<ext>`.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    start: usize,
    #[arg(long, default_value_t = 10)]
    step: usize,
    #[arg(long, default_value_t = 6)]
    count: usize,
    /// Explicit comma-separated indices; overrides start/step/count.
    #[arg(long, value_parser = parse_index_list)]
    frames: Option<IndexList>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// YOLO label file.
    label: PathBuf,
    /// Model config TOML with a [head] table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid JSON to write; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Prediction grid JSON.
    grid: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Minimum raw confidence.
    #[arg(long, default_value_t = 0.5)]
    conf: f64,
    /// Apply class-aware NMS at this IoU.
    #[arg(long)]
    nms: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// Prediction grid JSON.
    pred: PathBuf,
    /// Target grid JSON, as written by `encode`.
    target: PathBuf,
    /// conf,cls,loc,giou weights.
    #[arg(long, default_value = "1,1,1,1", value_parser = parse_weights)]
    weights: LossWeights,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("grids").multiple(true).requires_all(["pred", "target"])))]
struct GradcheckArgs {
    /// Random instances to check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Check a saved prediction grid instead of random instances.
    #[arg(long, group = "grids")]
    pred: Option<PathBuf>,
    #[arg(long, group = "grids")]
    target: Option<PathBuf>,
    #[arg(long, default_value = "1,1,1,1", value_parser = parse_weights)]
    weights: LossWeights,
}

#[derive(Debug, Args)]
struct ToyTrainArgs {
    /// YOLO label file to fit; a seeded random object when absent.
    #[arg(long)]
    label: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value = "1,1,1,0", value_parser = parse_weights)]
    weights: LossWeights,
    /// Loss trace CSV to write.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fitted grid JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct NmsArgs {
    /// Prediction file, `<class> <cx> <cy> <w> <h> <conf>` per line.
    input: PathBuf,
    #[arg(long, default_value_t = 0.45)]
    iou: f64,
    /// Suppress across classes.
    #[arg(long)]
    class_agnostic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of ground-truth YOLO label files.
    #[arg(long)]
    gt: PathBuf,
    /// Directory of prediction files with matching stems.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_IOU)]
    iou: f64,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
}

#[derive(Debug, Args)]
struct LayersArgs {
    /// Model config TOML with [[layers]].
    config: PathBuf,
    /// Input HEIGHTxWIDTHxCHANNELS; overrides the config's `input`.
    #[arg(long, value_parser = parse_shape)]
    input: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
struct Turns(Vec<u8>);

#[derive(Debug, Clone, Copy)]
struct Ratios([f64; 3]);

#[derive(Debug, Clone)]
struct IndexList(Vec<usize>);

fn parse_turns(s: &str) -> Result<Turns, String> {
    s.split(',')
        .map(|t| {
            let deg: u32 = t.trim().parse().map_err(|_| format!("not a number of degrees: {t:?}"))?;
            if deg % 90 != 0 || deg > 360 {
                return Err(format!("rotation {deg} is not one of 0, 90, 180, 270, 360"));
            }
            Ok(((deg / 90) % 4) as u8)
        })
        .collect::<Result<_, _>>()
        .map(Turns)
}

fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("not a number: {p:?}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("expected train:val:test, got {s:?}"));
    }
    if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err("ratios must be non-negative".into());
    }
    let sum: f64 = parts.iter().sum();
    if sum <= 0.0 {
        return Err("ratios must not all be zero".into());
    }
    Ok(Ratios([parts[0] / sum, parts[1] / sum, parts[2] / sum]))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (n(w), n(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected positive WIDTHxHEIGHT, got {s:?}")),
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let v: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("expected positive HEIGHTxWIDTHxCHANNELS, got {s:?}"))?;
    match v[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(format!("expected HEIGHTxWIDTHxCHANNELS, got {s:?}")),
    }
}

fn parse_index_list(s: &str) -> Result<IndexList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("not an index: {p:?}")))
        .collect::<Result<_, _>>()
        .map(IndexList)
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    LossWeights::parse(s).map_err(|e| e.to_string())
}

enum CliError {
    /// Bad invocation: exit 2 with the subcommand synopsis.
    Usage(String),
    /// The command could not do its job: exit 1.
    Failed(String),
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

struct Ctx<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    quiet: bool,
    json: bool,
    seed: u64,
    label_map: LabelMap,
}

impl Ctx<'_> {
    fn print(&mut self, text: &str) -> Result<(), CliError> {
        self.out.write_all(text.as_bytes())?;
        Ok(())
    }

    fn note(&mut self, text: &str) -> Result<(), CliError> {
        if !self.quiet {
            writeln!(self.err, "{text}")?;
        }
        Ok(())
    }

    fn print_json<T: serde::Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.print(&text)
    }
}

/// Runs the command line with the process's stdout and stderr and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the command line against the given output streams and returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    2
                }
            };
        }
    };
    let sub = subcommand_name(&cli.command);
    let label_map = match load_label_map(cli.label_map.as_deref()) {
        Ok(m) => m,
        Err(e) => return report_error(err, sub, e),
    };
    let mut ctx = Ctx {
        out,
        err,
        quiet: cli.quiet,
        json: cli.json,
        seed: cli.seed,
        label_map,
    };
    let result = dispatch(&mut ctx, &cli.command);
    let _ = ctx.out.flush();
    match result {
        Ok(code) => code,
        Err(e) => report_error(ctx.err, sub, e),
    }
}

fn report_error(err: &mut dyn Write, sub: &str, e: CliError) -> i32 {
    match e {
        CliError::Usage(msg) => {
            let mut cmd = Cli::command();
            let usage = cmd
                .find_subcommand_mut(sub)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            let _ = writeln!(err, "error: {msg}\n\n{usage}");
            2
        }
        CliError::Failed(msg) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Validate(_) => "validate",
        Command::Convert(_) => "convert",
        Command::Augment(_) => "augment",
        Command::Split(_) => "split",
        Command::Stats(_) => "stats",
        Command::SelectFrames(_) => "select-frames",
        Command::Encode(_) => "encode",
        Command::Decode(_) => "decode",
        Command::Loss(_) => "loss",
        Command::Gradcheck(_) => "gradcheck",
        Command::ToyTrain(_) => "toy-train",
        Command::Nms(_) => "nms",
        Command::Eval(_) => "eval",
        Command::Layers(_) => "layers",
    }
}

fn dispatch(ctx: &mut Ctx, command: &Command) -> CliResult {
    match command {
        Command::Validate(a) => cmd_validate(ctx, a),
        Command::Convert(a) => cmd_convert(ctx, a),
        Command::Augment(a) => cmd_augment(ctx, a),
        Command::Split(a) => cmd_split(ctx, a),
        Command::Stats(a) => cmd_stats(ctx, a),
        Command::SelectFrames(a) => cmd_select_frames(ctx, a),
        Command::Encode(a) => cmd_encode(ctx, a),
        Command::Decode(a) => cmd_decode(ctx, a),
        Command::Loss(a) => cmd_loss(ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(ctx, a),
        Command::ToyTrain(a) => cmd_toy_train(ctx, a),
        Command::Nms(a) => cmd_nms(ctx, a),
        Command::Eval(a) => cmd_eval(ctx, a),
        Command::Layers(a) => cmd_layers(ctx, a),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_label_map(path: Option<&Path>) -> Result<LabelMap, CliError> {
    match path {
        None => Ok(LabelMap::addsl()),
        Some(p) => Ok(LabelMap::parse(&read_text(p)?)?),
    }
}

/// Refuses to touch an existing file, or a non-empty directory, unless `force` is set.
fn check_output(path: &Path, force: bool) -> Result<(), CliError> {
    if force || !path.exists() {
        return Ok(());
    }
    let occupied = if path.is_dir() {
        fs::read_dir(path)?.next().is_some()
    } else {
        true
    };
    if occupied {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, data: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, data).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// Writes to `path` when given, else to stdout.
fn emit(ctx: &mut Ctx, path: Option<&Path>, data: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, data),
        None => ctx.print(data),
    }
}

/// A dataset root is scanned; anything else is read as a manifest.
fn load_dataset(input: &Path) -> Result<(DatasetManifest, Option<crate::annotation::ScanResult>), CliError> {
    if input.is_dir() {
        let scan = DatasetManifest::scan(input)?;
        Ok((scan.manifest.clone(), Some(scan)))
    } else {
        Ok((DatasetManifest::load(input)?, None))
    }
}

fn head_config(ctx: &Ctx, config: Option<&Path>) -> Result<HeadConfig, CliError> {
    let from_file = match config {
        Some(p) => ModelConfig::from_toml(&read_text(p)?)?.head,
        None => None,
    };
    Ok(from_file.unwrap_or_else(|| HeadConfig {
        classes: ctx.label_map.len(),
        ..HeadConfig::default()
    }))
}

fn load_label(ctx: &Ctx, path: &Path) -> Result<LabelFile, CliError> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_label_file(&read_text(path)?, &stem, &ctx.label_map)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_grid(path: &Path) -> Result<Grid, CliError> {
    Grid::from_json(&read_text(path)?).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn render_validation(ctx: &Ctx, r: &ValidationReport) -> String {
    let mut out = String::new();
    for f in &r.findings {
        match f.line {
            Some(l) => out.push_str(&format!("{}:{l}: {}: {}\n", f.path, f.kind, f.message)),
            None => out.push_str(&format!("{}: {}: {}\n", f.path, f.kind, f.message)),
        }
    }
    out.push_str(&format!(
        "{} images, {} objects, {}/{} classes, train {} val {} test {}, {} findings\n",
        r.images,
        r.objects,
        r.classes_present(),
        ctx.label_map.len(),
        r.split_counts[0],
        r.split_counts[1],
        r.split_counts[2],
        r.findings.len()
    ));
    out
}

fn cmd_validate(ctx: &mut Ctx, a: &InputArgs) -> CliResult {
    let report = match load_dataset(&a.input)? {
        (_, Some(scan)) => validate_tree(&scan, &ctx.label_map),
        (manifest, None) => validate_dataset(&manifest, &ctx.label_map),
    };
    if ctx.json {
        ctx.print_json(&report)?;
    } else {
        let text = render_validation(ctx, &report);
        ctx.print(&text)?;
    }
    Ok(if report.is_clean() { 0 } else { 1 })
}

fn cmd_convert(ctx: &mut Ctx, a: &ConvertArgs) -> CliResult {
    check_output(&a.out, a.force)?;
    match a.to {
        Format::Coco => {
            let (manifest, _) = load_dataset(&a.input)?;
            let json = to_coco(&manifest, &ctx.label_map)?;
            write_file(&a.out, &json)?;
            ctx.note(&format!("wrote {} images to {}", manifest.len(), a.out.display()))?;
        }
        Format::Voc => {
            let (manifest, _) = load_dataset(&a.input)?;
            fs::create_dir_all(&a.out)?;
            for e in &manifest.entries {
                let info = imaging::load_image_info(&manifest.resolve(&e.image))?;
                let label = load_label(ctx, &manifest.resolve(&e.label))?;
                let mut file = label;
                file.image_id = e
                    .image
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let xml = to_voc(&file, ImageSize::new(info.width as u32, info.height as u32), &ctx.label_map);
                write_file(&a.out.join(format!("{}.xml", e.image_stem())), &xml)?;
            }
            ctx.note(&format!("wrote {} VOC files to {}", manifest.len(), a.out.display()))?;
        }
        Format::Yolo => {
            let files: Vec<LabelFile> = if a.input.is_dir() {
                let mut xmls: Vec<PathBuf> = fs::read_dir(&a.input)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<Result<_, _>>()?;
                xmls.retain(|p| p.extension().is_some_and(|x| x == "xml"));
                xmls.sort();
                xmls.iter()
                    .map(|p| {
                        from_voc(&read_text(p)?, &ctx.label_map)
                            .map(|(f, _)| f)
                            .map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))
                    })
                    .collect::<Result<_, _>>()?
            } else {
                from_coco(&read_text(&a.input)?, &ctx.label_map)?
                    .into_iter()
                    .map(|(_, _, f)| f)
                    .collect()
            };
            fs::create_dir_all(&a.out)?;
            for f in &files {
                let stem = Path::new(&f.image_id)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| f.image_id.clone());
                write_file(&a.out.join(format!("{stem}.txt")), &serialize_yolo(f))?;
            }
            ctx.note(&format!("wrote {} label files to {}", files.len(), a.out.display()))?;
        }
    }
    Ok(0)
}

fn cmd_augment(ctx: &mut Ctx, a: &AugmentArgs) -> CliResult {
    check_output(&a.out, a.force)?;
    let spec = AugmentSpec {
        turns: a.turns.0.clone(),
        resize_to: a.resize,
        resize_mode: if a.nearest {
            ResizeMode::Nearest
        } else {
            ResizeMode::Bilinear
        },
        grayscale: a.grayscale,
        keep_originals: !a.no_originals,
        allow_duplicate_turns: false,
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (manifest, _) = load_dataset(&a.input)?;
    let result = dataset::augment(&manifest, &spec, &a.out, &ctx.label_map)?;
    let manifest_path = a.out.join("manifest.tsv");
    result.manifest.save(&manifest_path)?;
    for f in &result.failures {
        let line = format!("{}: {}", f.path, f.message);
        writeln!(ctx.err, "{line}")?;
    }
    if ctx.json {
        let summary = serde_json::json!({
            "inputs": manifest.len(),
            "outputs": result.manifest.len(),
            "failures": result.failures,
            "manifest": manifest_path.to_string_lossy(),
        });
        ctx.print_json(&summary)?;
    } else {
        ctx.print(&format!(
            "{} inputs, {} outputs, {} failures\n",
            manifest.len(),
            result.manifest.len(),
            result.failures.len()
        ))?;
    }
    Ok(if result.failures.is_empty() { 0 } else { 1 })
}

fn cmd_split(ctx: &mut Ctx, a: &SplitArgs) -> CliResult {
    if let Some(out) = &a.out {
        check_output(out, a.force)?;
    }
    let mut spec = SplitSpec::new(a.ratios.0, ctx.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    spec.grouped = !a.ungrouped;
    let (manifest, _) = load_dataset(&a.input)?;
    let out = dataset::split(&manifest, &spec)?;
    emit(ctx, a.out.as_deref(), &out.to_tsv())?;
    let c = out.split_counts();
    ctx.note(&format!("train {} val {} test {}", c[0], c[1], c[2]))?;
    Ok(0)
}

fn cmd_stats(ctx: &mut Ctx, a: &InputArgs) -> CliResult {
    let (manifest, _) = load_dataset(&a.input)?;
    let r = dataset::stats(&manifest, &ctx.label_map)?;
    if ctx.json {
        ctx.print_json(&r)?;
        return Ok(0);
    }
    let mut out = format!("{:<6} {:<8} {:>7} {:>8}\n", "class", "name", "images", "objects");
    for c in &r.classes {
        out.push_str(&format!("{:<6} {:<8} {:>7} {:>8}\n", c.class_id, c.name, c.images, c.objects));
    }
    out.push_str(&format!(
        "\nimages {}  objects {}  negatives {}\n",
        r.images, r.objects, r.negatives
    ));
    out.push_str(&format!(
        "train {}  val {}  test {}\n",
        r.split_counts[0], r.split_counts[1], r.split_counts[2]
    ));
    for s in &r.image_sizes {
        out.push_str(&format!("size {}x{}x{}: {}\n", s.width, s.height, s.channels, s.count));
    }
    out.push_str(&format!("classes present: {}/{}\n", r.classes_present(), ctx.label_map.len()));
    ctx.print(&out)?;
    Ok(0)
}

fn cmd_select_frames(ctx: &mut Ctx, a: &SelectFramesArgs) -> CliResult {
    let policy = match &a.frames {
        Some(list) => FramePolicy::Explicit(list.0.clone()),
        None => FramePolicy::Stride {
            start: a.start,
            step: a.step,
            count: a.count,
        },
    };
    let lines: Vec<String> = match (&a.dir, a.total) {
        (Some(dir), _) => imaging::select_frame_files(dir, &policy)?
            .iter()
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        (None, Some(total)) => imaging::select_frames(total, &policy)?
            .iter()
            .map(|i| i.to_string())
            .collect(),
        (None, None) => unreachable!("clap requires --total or --dir"),
    };
    if ctx.json {
        ctx.print_json(&lines)?;
    } else {
        ctx.print(&lines.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    }
    Ok(0)
}

fn cmd_encode(ctx: &mut Ctx, a: &EncodeArgs) -> CliResult {
    if let Some(out) = &a.out {
        check_output(out, a.force)?;
    }
    let cfg = head_config(ctx, a.config.as_deref())?;
    let label = load_label(ctx, &a.label)?;
    let assignment = detector::assign_targets(&label.objects, &cfg)?;
    emit(ctx, a.out.as_deref(), &assignment.target.grid().to_json())?;
    for c in &assignment.collisions {
        let line = format!(
            "collision: object {} dropped, cell ({}, {}) anchor {} already holds object {}",
            c.dropped, c.col, c.row, c.anchor, c.kept
        );
        writeln!(ctx.err, "{line}")?;
    }
    Ok(if assignment.collisions.is_empty() { 0 } else { 1 })
}

fn cmd_decode(ctx: &mut Ctx, a: &DecodeArgs) -> CliResult {
    if let Some(out) = &a.out {
        check_output(out, a.force)?;
    }
    if !(0.0..=1.0).contains(&a.conf) {
        return Err(CliError::Usage(format!("--conf {} is not in [0, 1]", a.conf)));
    }
    let grid = load_grid(&a.grid)?;
    let mut cfg = head_config(ctx, a.config.as_deref())?;
    if a.config.is_none() {
        // Only the shape matters for decoding.
        let (s, b, c) = grid.shape();
        cfg = HeadConfig {
            grid: s,
            classes: c,
            anchors: vec![[1.0, 1.0]; b],
        };
    }
    let mut dets = detector::decode(&grid, &cfg, a.conf)?;
    if let Some(t) = a.nms {
        dets = nms(&dets, t, true);
    }
    emit(ctx, a.out.as_deref(), &serialize_predictions(&dets))?;
    Ok(0)
}

fn render_breakdown(b: &losses::LossBreakdown) -> String {
    [
        ("conf", b.conf),
        ("cls", b.cls),
        ("loc", b.loc),
        ("giou", b.giou),
        ("total", b.total),
    ]
    .iter()
    .map(|(k, v)| format!("{k:<6} {v:.12}\n"))
    .collect()
}

fn cmd_loss(ctx: &mut Ctx, a: &LossArgs) -> CliResult {
    let pred = load_grid(&a.pred)?;
    let target = TargetGrid::from_grid(load_grid(&a.target)?);
    let b = losses::total_loss(&pred, &target, &a.weights)?;
    if ctx.json {
        ctx.print_json(&b)?;
    } else {
        ctx.print(&render_breakdown(&b))?;
    }
    Ok(0)
}

fn cmd_gradcheck(ctx: &mut Ctx, a: &GradcheckArgs) -> CliResult {
    let max_rel = match (&a.pred, &a.target) {
        (Some(p), Some(t)) => {
            let pred = load_grid(p)?;
            let target = TargetGrid::from_grid(load_grid(t)?);
            let r = losses::finite_difference_check(&pred, &target, &a.weights, losses::FD_STEP)?;
            if ctx.json {
                ctx.print_json(&r)?;
            } else {
                ctx.print(&format!(
                    "values {}  max relative error {:.3e}  max absolute error {:.3e}\n",
                    r.values, r.max_rel_error, r.max_abs_error
                ))?;
            }
            r.max_rel_error
        }
        _ => {
            if a.trials == 0 {
                return Err(CliError::Usage("--trials must be at least 1".into()));
            }
            let s = losses::gradcheck_trials(a.trials, ctx.seed)?;
            if ctx.json {
                ctx.print_json(&s)?;
            } else {
                ctx.print(&format!(
                    "trials {}  seed {}  max relative error {:.3e}  max absolute error {:.3e}\n",
                    s.trials, s.seed, s.max_rel_error, s.max_abs_error
                ))?;
            }
            s.max_rel_error
        }
    };
    Ok(if max_rel < GRADCHECK_TOLERANCE { 0 } else { 1 })
}

/// A seeded object fully inside the image.
fn random_object(seed: u64, classes: usize) -> Annotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: f64 = rng.random_range(0.1..0.5);
    let h: f64 = rng.random_range(0.1..0.5);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    Annotation {
        class_id: rng.random_range(0..classes.max(1)),
        bbox: BBox::new(cx, cy, w, h).expect("box inside the image"),
    }
}

fn cmd_toy_train(ctx: &mut Ctx, a: &ToyTrainArgs) -> CliResult {
    for p in [&a.trace, &a.out].into_iter().flatten() {
        check_output(p, a.force)?;
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(CliError::Usage(format!("--lr must be positive, got {}", a.lr)));
    }
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let cfg = head_config(ctx, a.config.as_deref())?;
    let objects = match &a.label {
        Some(p) => load_label(ctx, p)?.objects,
        None => vec![random_object(ctx.seed, cfg.classes)],
    };
    let fit = losses::toy_fit(&objects, &cfg, &a.weights, a.lr, a.steps)?;
    if let Some(p) = &a.trace {
        write_file(p, &losses::trace_csv(&fit.trace))?;
    }
    if let Some(p) = &a.out {
        write_file(p, &fit.grid.to_json())?;
    }
    let last = fit.final_loss();
    let dets = detector::decode(&fit.grid, &cfg, 0.5)?;
    if ctx.json {
        let summary = serde_json::json!({
            "steps": a.steps,
            "lr": a.lr,
            "initial": fit.trace[0],
            "final": last,
            "monotone": fit.monotone,
            "objects": serialize_yolo(&LabelFile::new("", objects.clone())),
            "decoded": serialize_predictions(&dets),
        });
        ctx.print_json(&summary)?;
    } else {
        let mut out = format!(
            "steps {}  lr {}  initial loss {:.6e}  final loss {:.6e}  monotone {}\n",
            a.steps, a.lr, fit.trace[0].total, last.total, fit.monotone
        );
        out.push_str("objects:\n");
        out.push_str(&serialize_yolo(&LabelFile::new("", objects)));
        out.push_str("decoded:\n");
        out.push_str(&serialize_predictions(&dets));
        ctx.print(&out)?;
    }
    Ok(0)
}

fn cmd_nms(ctx: &mut Ctx, a: &NmsArgs) -> CliResult {
    if let Some(out) = &a.out {
        check_output(out, a.force)?;
    }
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(CliError::Usage(format!("--iou {} is not in [0, 1]", a.iou)));
    }
    let text = read_text(&a.input)?;
    let dets = parse_predictions(&text, &ctx.label_map)
        .map_err(|e| CliError::Failed(format!("{}: {e}", a.input.display())))?;
    let kept = nms(&dets, a.iou, !a.class_agnostic);
    emit(ctx, a.out.as_deref(), &serialize_predictions(&kept))?;
    ctx.note(&format!("kept {} of {}", kept.len(), dets.len()))?;
    Ok(0)
}

fn txt_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))? {
        let p = entry?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            if let Some(stem) = p.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_eval(ctx: &mut Ctx, a: &EvalArgs) -> CliResult {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(CliError::Usage(format!("--iou {} is not in (0, 1]", a.iou)));
    }
    let gts = txt_stems(&a.gt)?;
    let preds = txt_stems(&a.pred)?;
    let mut stems: Vec<&String> = gts.iter().chain(&preds).map(|(s, _)| s).collect();
    stems.sort();
    stems.dedup();
    let find = |list: &[(String, PathBuf)], stem: &str| list.iter().find(|(s, _)| s == stem).map(|(_, p)| p.clone());
    let mut images = Vec::with_capacity(stems.len());
    for stem in stems {
        let gt = match find(&gts, stem) {
            Some(p) => load_label(ctx, &p)?.objects,
            None => Vec::new(),
        };
        let dets = match find(&preds, stem) {
            Some(p) => parse_predictions(&read_text(&p)?, &ctx.label_map)
                .map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?,
            None => Vec::new(),
        };
        images.push(EvalImage {
            id: stem.clone(),
            dets,
            gts: gt,
        });
    }
    let report = eval::evaluate(&images, ctx.label_map.len(), a.iou, a.conf);
    if ctx.json {
        ctx.print(&report.to_json())?;
    } else {
        let mut out = report.to_table();
        let lines = report.confusion_lines(&ctx.label_map);
        if !lines.is_empty() {
            out.push_str("\nconfusions (ground truth -> predicted):\n");
            for l in lines {
                out.push_str(&format!("  {l}\n"));
            }
        }
        ctx.print(&out)?;
    }
    Ok(0)
}

fn cmd_layers(ctx: &mut Ctx, a: &LayersArgs) -> CliResult {
    let cfg = ModelConfig::from_toml(&read_text(&a.config)?)?;
    let input = match (a.input, cfg.input) {
        (Some(s), _) => s,
        (None, Some([h, w, c])) => (h, w, c),
        (None, None) => {
            return Err(CliError::Usage(
                "no input shape: pass --input or set `input` in the config".into(),
            ))
        }
    };
    let shapes = detector::shape_propagate(input, &cfg.layers)?;
    let total = detector::param_count(&cfg.layers);
    if ctx.json {
        let layers: Vec<_> = cfg
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| serde_json::json!({"layer": l, "params": l.params(), "output": [s.0, s.1, s.2]}))
            .collect();
        let head = cfg.head.as_ref().map(|h| h.channels());
        ctx.print_json(&serde_json::json!({
            "input": [input.0, input.1, input.2],
            "layers": layers,
            "params": total,
            "head_channels": head,
        }))?;
        return Ok(0);
    }
    let mut out = format!(
        "{:<4} {:<15} {:>5} {:>5} {:>3} {:>3} {:>3} {:>10}  {}\n",
        "#", "kind", "in", "out", "k", "s", "p", "params", "output"
    );
    out.push_str(&format!("{:<4} {:<15} {:>46}  {}x{}x{}\n", "", "input", "", input.0, input.1, input.2));
    for (i, (l, s)) in cfg.layers.iter().zip(&shapes).enumerate() {
        out.push_str(&format!(
            "{:<4} {:<15} {:>5} {:>5} {:>3} {:>3} {:>3} {:>10}  {}x{}x{}\n",
            i,
            layer_kind_name(l),
            l.in_ch,
            l.out_ch,
            l.kernel,
            l.stride,
            l.padding,
            l.params(),
            s.0,
            s.1,
            s.2
        ));
    }
    out.push_str(&format!("total params {total}\n"));
    if let Some(h) = &cfg.head {
        out.push_str(&format!(
            "head {}x{}x({}x(5+{})) = {} channels\n",
            h.grid,
            h.grid,
            h.num_anchors(),
            h.classes,
            h.channels()
        ));
    }
    ctx.print(&out)?;
    Ok(0)
}

fn layer_kind_name(l: &LayerSpec) -> &'static str {
    match l.kind {
        detector::LayerKind::Conv => "conv",
        detector::LayerKind::DepthwiseConv => "depthwise_conv",
        detector::LayerKind::PointwiseConv => "pointwise_conv",
        detector::LayerKind::Maxpool => "maxpool",
    }
}
