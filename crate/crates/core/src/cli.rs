//! The `segkit` command line.
//!
//! Exit status: 0 on success, 1 when inputs fail validation or cannot be
//! read or written, 2 on usage errors. Any flag can also come from a JSON
//! `--config` file keyed by long flag name; flags on the command line win.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use crate::augment::{self, AugmentParams};
use crate::coco::{self, write_json, Dataset, Detection};
use crate::ensemble::{integrate_by_category, Mode, RoutingConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, EvalParams};
use crate::softnms::{soft_nms_grouped, IouKind, NmsMethod, NmsParams};
use crate::swa;
use crate::tta::merge_flip_results;

#[derive(Debug, Parser)]
#[command(name = "segkit", version, about = "Instance-segmentation pipeline tooling")]
pub struct Cli {
    /// Worker threads for per-image stages (output does not depend on it).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    /// JSON file supplying defaults for any flag, keyed by long flag name.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scale/crop/pad/flip and Copy-Paste augmentation of a training set.
    Augment(AugmentArgs),
    /// Soft-NMS over a results file, per image and category.
    Nms(NmsArgs),
    /// Fuse original and horizontally-flipped inference results.
    TtaMerge(TtaMergeArgs),
    /// Integrate two models' results per category.
    Ensemble(EnsembleArgs),
    /// Average weight snapshots element-wise.
    SwaAverage(SwaAverageArgs),
    /// Write a cyclic learning-rate schedule.
    SwaSchedule(SwaScheduleArgs),
    /// Mask (or box) AP@[0.50:0.95] of a results file.
    Evaluate(EvaluateArgs),
    /// Check a dataset and, optionally, a results file against it.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct NmsFlags {
    #[arg(long, default_value = "gaussian", value_parser = parse_from_str::<NmsMethod>)]
    pub method: NmsMethod,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    /// Overlap threshold used by the hard and linear methods.
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 0.001)]
    pub score_floor: f64,
    #[arg(long = "iou", default_value = "mask", value_parser = parse_from_str::<IouKind>)]
    pub iou_kind: IouKind,
}

impl NmsFlags {
    fn params(&self) -> NmsParams {
        NmsParams {
            method: self.method,
            iou_threshold: self.iou_threshold,
            sigma: self.sigma,
            score_floor: self.score_floor,
            iou_kind: self.iou_kind,
        }
    }
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of source images; enables pixel mode (PNG in, PNG out).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where augmented images go in pixel mode [default: <out stem>_images/ next to --out].
    #[arg(long)]
    pub out_images: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub paste_min: u32,
    #[arg(long, default_value_t = 3)]
    pub paste_max: u32,
    #[arg(long, default_value_t = 720)]
    pub short_min: u32,
    #[arg(long, default_value_t = 1620)]
    pub short_max: u32,
    #[arg(long, default_value_t = 1920)]
    pub long_cap: u32,
    #[arg(long, default_value_t = 1920)]
    pub crop_width: u32,
    #[arg(long, default_value_t = 1080)]
    pub crop_height: u32,
    #[arg(long, default_value_t = 0.5)]
    pub hflip_prob: f64,
    #[arg(long, default_value_t = 1)]
    pub min_remaining_area: u64,
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Validate results against this dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub nms: NmsFlags,
}

#[derive(Debug, Args)]
pub struct TtaMergeArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub flipped: PathBuf,
    /// JSON map of image id to width, e.g. {"1": 1920}.
    #[arg(long, required_unless_present = "dataset")]
    pub widths: Option<PathBuf>,
    /// Dataset providing image widths (and validating both inputs).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub nms: NmsFlags,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Routing by category name, e.g. "default=A,cane=B".
    #[arg(long, conflicts_with = "route_file")]
    pub route: Option<String>,
    /// Routing as JSON: {"default": "A", "overrides": {"cane": "B"}, "mode": "route"}.
    #[arg(long)]
    pub route_file: Option<PathBuf>,
    /// route | merge; overrides the routing config's mode.
    #[arg(long, value_parser = parse_from_str::<Mode>)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub nms: NmsFlags,
}

#[derive(Debug, Args)]
pub struct SwaAverageArgs {
    /// Snapshot directories or single-file JSON snapshots.
    #[arg(required = true)]
    pub snapshots: Vec<PathBuf>,
    /// Output directory, or a .json file for the single-file form.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SwaScheduleArgs {
    #[arg(long, default_value_t = swa::SWA_STAGE_LR)]
    pub start: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub end: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub cycles: usize,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long = "iou", default_value = "mask", value_parser = parse_from_str::<IouKind>)]
    pub iou_kind: IouKind,
    #[arg(long, default_value_t = 100)]
    pub max_dets: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub results: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_with_config(&args) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
        Err(ParseFailure::Config(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };

    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => {
                eprintln!("error: cannot start {n} worker threads: {e}");
                return 1;
            }
        },
        None => execute(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum ParseFailure {
    Clap(clap::Error),
    Config(Error),
}

fn parse_with_config(args: &[OsString]) -> std::result::Result<Cli, ParseFailure> {
    // required arguments may be supplied by the config, so the first pass is lenient
    let strict = Cli::command().try_get_matches_from(args);
    let matches = match &strict {
        Ok(m) => m.clone(),
        Err(_) => match Cli::command().ignore_errors(true).try_get_matches_from(args) {
            Ok(m) if m.get_one::<PathBuf>("config").is_some() && m.subcommand().is_some() => m,
            _ => return Err(ParseFailure::Clap(strict.unwrap_err())),
        },
    };
    let Some(config_path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap);
    };
    let config = load_config(&config_path).map_err(ParseFailure::Config)?;
    let merged = merge_config_args(args, &matches, &config).map_err(ParseFailure::Config)?;
    let matches = Cli::command()
        .try_get_matches_from(&merged)
        .map_err(ParseFailure::Clap)?;
    Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)
}

fn load_config(path: &Path) -> Result<serde_json::Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_str(&text).map_err(|e| Error::json(path, &text, e))? {
        Value::Object(map) => Ok(map),
        _ => Err(Error::invalid(format!("{}: config must be a JSON object", path.display()))),
    }
}

fn scalar_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Rebuilds argv with config values for every subcommand argument not given
/// on the command line. Config keys may use kebab-case or snake_case.
fn merge_config_args(
    args: &[OsString],
    matches: &clap::ArgMatches,
    config: &serde_json::Map<String, Value>,
) -> Result<Vec<OsString>> {
    let (sub_name, sub_matches) = matches
        .subcommand()
        .ok_or_else(|| Error::invalid("no subcommand"))?;
    let root = Cli::command();
    let sub_cmd = root
        .find_subcommand(sub_name)
        .ok_or_else(|| Error::invalid(format!("unknown subcommand {sub_name}")))?;

    let mut flags: Vec<OsString> = Vec::new();
    let mut positionals: Vec<OsString> = Vec::new();
    let known: Vec<String> = sub_cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string).or_else(|| Some(a.get_id().to_string())))
        .collect();
    for key in config.keys() {
        let norm = key.replace('_', "-");
        if !known.contains(&norm) && !known.contains(key) && !["jobs", "config"].contains(&norm.as_str()) {
            return Err(Error::invalid(format!("config key {key:?} is not a flag of `{sub_name}`")));
        }
    }

    for arg in sub_cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(sub_matches.value_source(id), Some(ValueSource::CommandLine)) {
            continue;
        }
        let name = arg.get_long().unwrap_or(id);
        let Some(value) = config
            .get(name)
            .or_else(|| config.get(&name.replace('-', "_")))
        else {
            continue;
        };
        let values: Vec<String> = match value {
            Value::Array(items) => items.iter().filter_map(scalar_to_string).collect(),
            v => scalar_to_string(v).into_iter().collect(),
        };
        if let Some(long) = arg.get_long() {
            if matches!(arg.get_action(), ArgAction::SetTrue) {
                if value.as_bool() == Some(true) {
                    flags.push(format!("--{long}").into());
                }
            } else {
                for v in values {
                    flags.push(format!("--{long}={v}").into());
                }
            }
        } else {
            positionals.extend(values.into_iter().map(OsString::from));
        }
    }

    // globals from config unless given on the command line
    let mut globals: Vec<OsString> = Vec::new();
    if !matches!(matches.value_source("jobs"), Some(ValueSource::CommandLine)) {
        if let Some(v) = config.get("jobs").and_then(scalar_to_string) {
            globals.push(format!("--jobs={v}").into());
        }
    }

    let sub_pos = args
        .iter()
        .position(|a| a == sub_name)
        .ok_or_else(|| Error::invalid("subcommand not found in arguments"))?;
    let mut out: Vec<OsString> = args[..sub_pos].to_vec();
    out.extend(globals);
    out.push(args[sub_pos].clone());
    out.extend(flags);
    out.extend(args[sub_pos + 1..].iter().cloned());
    out.extend(positionals);
    Ok(out)
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Augment(a) => cmd_augment(a),
        Command::Nms(a) => cmd_nms(a),
        Command::TtaMerge(a) => cmd_tta_merge(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::SwaAverage(a) => cmd_swa_average(a),
        Command::SwaSchedule(a) => cmd_swa_schedule(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn cmd_augment(a: &AugmentArgs) -> Result<()> {
    let params = AugmentParams {
        short_side_min: a.short_min,
        short_side_max: a.short_max,
        long_side_cap: a.long_cap,
        crop_width: a.crop_width,
        crop_height: a.crop_height,
        hflip_prob: a.hflip_prob,
        paste_min: a.paste_min,
        paste_max: a.paste_max,
        min_remaining_area: a.min_remaining_area,
        seed: a.seed,
    };
    params.validate()?;
    let ds = coco::parse_dataset(&a.dataset)?;

    let pixels = match &a.images {
        Some(dir) => Some(
            ds.images
                .iter()
                .map(|img| {
                    let path = dir.join(&img.file_name);
                    let px = image::open(&path)
                        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                        .to_rgb8();
                    if px.dimensions() != (img.width, img.height) {
                        return Err(Error::Dimension(format!(
                            "{} is {}x{}, dataset says {}x{}",
                            path.display(),
                            px.width(),
                            px.height(),
                            img.width,
                            img.height
                        )));
                    }
                    Ok(px)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let units = augment::annotated_images(&ds, pixels)?;
    let mut out_images = augment::augment_images(&units, &params)?;

    if a.images.is_some() {
        let dir = a.out_images.clone().unwrap_or_else(|| default_image_dir(&a.out));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for ai in &mut out_images {
            let stem = Path::new(&ai.image.file_name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| ai.image.id.to_string());
            ai.image.file_name = format!("{stem}.png");
            let path = dir.join(&ai.image.file_name);
            if let Some(px) = &ai.pixels {
                px.save(&path)
                    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            }
        }
    }

    let out = augment::to_dataset(&ds, &out_images);
    coco::write_dataset(&out, &a.out)?;
    log::info!(
        "augmented {} images: {} -> {} annotations",
        out.images.len(),
        ds.annotations.len(),
        out.annotations.len()
    );
    Ok(())
}

fn default_image_dir(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "augmented".into());
    out.with_file_name(format!("{stem}_images"))
}

fn load_results(path: &Path, dataset: Option<&Dataset>) -> Result<Vec<Detection>> {
    match dataset {
        Some(ds) => coco::parse_results(path, ds),
        None => coco::parse_results_standalone(path),
    }
}

fn cmd_nms(a: &NmsArgs) -> Result<()> {
    let params = a.nms.params();
    params.validate()?;
    let ds = a.dataset.as_ref().map(coco::parse_dataset).transpose()?;
    let dets = load_results(&a.input, ds.as_ref())?;
    let out = soft_nms_grouped(&dets, &params)?;
    log::info!("nms: {} -> {} detections", dets.len(), out.len());
    coco::write_results(&out, &a.output)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WidthsFile {
    Map(HashMap<String, u32>),
    List(Vec<WidthEntry>),
}

#[derive(Deserialize)]
struct WidthEntry {
    id: u64,
    width: u32,
}

/// Reads `{"<image id>": width}` or `[{"id": .., "width": ..}]`.
pub fn load_widths(path: &Path) -> Result<HashMap<u64, u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: WidthsFile = serde_json::from_str(&text).map_err(|e| Error::json(path, &text, e))?;
    match parsed {
        WidthsFile::Map(m) => m
            .into_iter()
            .map(|(k, w)| {
                k.trim()
                    .parse::<u64>()
                    .map(|id| (id, w))
                    .map_err(|_| Error::invalid(format!("{}: image id {k:?} is not an integer", path.display())))
            })
            .collect(),
        WidthsFile::List(v) => Ok(v.into_iter().map(|e| (e.id, e.width)).collect()),
    }
}

fn cmd_tta_merge(a: &TtaMergeArgs) -> Result<()> {
    let params = a.nms.params();
    params.validate()?;
    let ds = a.dataset.as_ref().map(coco::parse_dataset).transpose()?;
    let widths = match (&a.widths, &ds) {
        (Some(p), _) => load_widths(p)?,
        (None, Some(ds)) => ds.images.iter().map(|i| (i.id, i.width)).collect(),
        (None, None) => return Err(Error::invalid("either --widths or --dataset is required")),
    };
    let original = load_results(&a.original, ds.as_ref())?;
    let flipped = load_results(&a.flipped, ds.as_ref())?;
    let fused = merge_flip_results(&original, &flipped, &widths, &params)?;
    log::info!(
        "tta-merge: {} + {} -> {} detections",
        original.len(),
        flipped.len(),
        fused.len()
    );
    coco::write_results(&fused, &a.out)
}

fn cmd_ensemble(a: &EnsembleArgs) -> Result<()> {
    let params = a.nms.params();
    params.validate()?;
    let ds = coco::parse_dataset(&a.dataset)?;
    let mut cfg = match (&a.route, &a.route_file) {
        (Some(spec), _) => RoutingConfig::parse_spec(spec)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path, &text, e))?
        }
        (None, None) => RoutingConfig::default(),
    };
    if let Some(mode) = a.mode {
        cfg.mode = Some(mode);
    }
    let table = cfg.resolve(&ds.categories)?;
    let dets_a = coco::parse_results(&a.a, &ds)?;
    let dets_b = coco::parse_results(&a.b, &ds)?;
    let out = integrate_by_category(&dets_a, &dets_b, &table, &ds.categories, &params)?;
    log::info!(
        "ensemble ({:?}): {} + {} -> {} detections",
        table.mode,
        dets_a.len(),
        dets_b.len(),
        out.len()
    );
    coco::write_results(&out, &a.out)
}

fn cmd_swa_average(a: &SwaAverageArgs) -> Result<()> {
    let snaps = a
        .snapshots
        .iter()
        .map(swa::load_snapshot)
        .collect::<Result<Vec<_>>>()?;
    let avg = swa::average_snapshots(&snaps)?;
    if a.out.extension().is_some_and(|e| e == "json") {
        swa::save_snapshot_json(&avg, &a.out)
    } else {
        swa::save_snapshot_dir(&avg, &a.out)
    }
}

fn cmd_swa_schedule(a: &SwaScheduleArgs) -> Result<()> {
    let schedule = swa::cyclic_lr_schedule(a.start, a.end, a.steps, a.cycles)?;
    match &a.out {
        Some(path) => write_json(&schedule, path),
        None => {
            let text = serde_json::to_string(&schedule).expect("schedule serializes");
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let gt = coco::parse_dataset(&a.gt)?;
    let dets = coco::parse_results(&a.results, &gt)?;
    let params = EvalParams {
        iou_kind: a.iou_kind,
        max_dets_per_image: a.max_dets,
        ..EvalParams::default()
    };
    let report = evaluate_map(&gt, &dets, &params)?;
    if let Some(path) = &a.report {
        write_json(&report, path)?;
    }
    let mut stdout = std::io::stdout().lock();
    let text = if a.json {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    } else {
        report.to_table()
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let ds = coco::parse_dataset(&a.dataset)?;
    println!(
        "dataset ok: {} images, {} categories, {} annotations",
        ds.images.len(),
        ds.categories.len(),
        ds.annotations.len()
    );
    if let Some(path) = &a.results {
        let dets = coco::parse_results(path, &ds)?;
        println!("results ok: {} detections", dets.len());
    }
    Ok(())
}
