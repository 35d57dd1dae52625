//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 bad or insufficient
//! data, 5 numeric failure or unsupported version.
//!
//! Config files hold one `key=value` per line; `#` starts a comment. Keys are the
//! training keys of [`TrainConfig`], the generator range keys of [`GaitRanges`], and
//! `mix`. Anything else is rejected. Flags given on the command line win over the file.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::data_io::{
    load_model_file, load_tracks, parse_fps_comment, parse_record, save_model, write_tracks, Dataset,
};
use crate::error::Error;
use crate::eval::{
    ablate, evaluate, evaluate_transitions, format_ablation_table, format_report, predict_track,
};
use crate::features::FeatureSelection;
use crate::network::{stream_step, ModelParams, StreamState};
use crate::skeleton::DEFAULT_CONF_THRESHOLD;
use crate::synthgait::{generate_dataset_with, GaitRanges};
use crate::training::{tiny_grad_check, train_with_progress, TinyCheck, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Gradient checks pass below this worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Frames on each side of a label boundary counted as transition frames.
pub const TRANSITION_WINDOW: usize = 5;

const OUTPUT_VERSION: &str = "v1";

#[derive(Debug, Parser)]
#[command(name = "micromotion", version, about = "Walking/standing estimation from 2D pose keypoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled track file
    Synth(SynthArgs),
    /// Train a model and write it to --out
    Train(TrainArgs),
    /// Frame-level metrics of a model on labeled tracks
    Eval(EvalArgs),
    /// Per-frame walking probabilities
    Infer(InferArgs),
    /// Finite-difference check of the analytic gradients on a tiny model
    Gradcheck(GradcheckArgs),
    /// Retrain without each feature group and compare
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tracks: usize,
    #[arg(long)]
    pub seed: u64,
    /// Target fraction of walking frames
    #[arg(long)]
    pub mix: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Training flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Any config key, as KEY=VALUE; may repeat
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// all, no-position, no-distance, no-angle or no-dynamic
    #[arg(long)]
    pub features: Option<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Consume frames one line at a time in file order
    #[arg(long)]
    pub stream: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out tracks to evaluate on; defaults to --data
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Failure of a command, already mapped to its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::InvalidConfig(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::VersionUnsupported(_) => EXIT_NUMERIC,
        Error::DegeneratePose(_)
        | Error::InsufficientData(_)
        | Error::Parse { .. }
        | Error::DuplicateFrame { .. }
        | Error::ChecksumMismatch
        | Error::MalformedModel(_)
        | Error::LengthMismatch { .. }
        | Error::EmptyMatrix => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError {
            code: exit_code(&err),
            message: err.to_string(),
        }
    }
}

fn with_path(err: Error, path: &Path) -> CliError {
    let code = exit_code(&err);
    CliError {
        code,
        message: format!("{}: {err}", path.display()),
    }
}

fn io_err(err: io::Error) -> CliError {
    Error::Io(err).into()
}

/// Effective settings after merging the config file and flags.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub gait: GaitRanges,
    pub mix: Option<f64>,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> crate::error::Result<()> {
        if key == "mix" {
            let v = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("mix: cannot parse {value:?}")))?;
            self.mix = Some(v);
            Ok(())
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)
        } else if GaitRanges::KEYS.contains(&key) {
            self.gait.set(key, value)
        } else {
            Err(Error::InvalidConfig(format!("unknown key {key:?}")))
        }
    }
}

pub fn parse_config_text(text: &str, settings: &mut Settings) -> crate::error::Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("config line {}: expected key=value", i + 1))
        })?;
        settings
            .set(key.trim(), value.trim())
            .map_err(|e| Error::InvalidConfig(format!("config line {}: {e}", i + 1)))?;
    }
    Ok(())
}

fn load_settings(config: Option<&Path>) -> Result<Settings, CliError> {
    let mut settings = Settings::default();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| with_path(Error::Io(e), path))?;
        parse_config_text(&text, &mut settings).map_err(|e| with_path(e, path))?;
    }
    Ok(settings)
}

fn apply_overrides(ov: &TrainOverrides, features: Option<&str>) -> Result<TrainConfig, CliError> {
    let mut settings = load_settings(ov.config.as_deref())?;
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        settings.set(k.trim(), v.trim())?;
    }
    let cfg = &mut settings.train;
    if let Some(v) = ov.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.lr0 {
        cfg.lr0 = v;
    }
    if let Some(v) = ov.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = ov.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(f) = features {
        cfg.features = FeatureSelection::parse(f)
            .ok_or_else(|| CliError::usage(format!("unknown feature selection {f:?}")))?;
    }
    cfg.validate()?;
    Ok(settings.train)
}

fn load_data(path: &Path, conf_threshold: f64) -> Result<Dataset, CliError> {
    load_tracks(path, conf_threshold).map_err(|e| with_path(e, path))
}

fn require_tracks(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    if ds.tracks.is_empty() {
        return Err(with_path(Error::InsufficientData("no tracks".into()), path));
    }
    Ok(())
}

/// Loads a model and the confidence threshold it was trained with.
fn load_model_with_threshold(path: &Path) -> Result<(ModelParams, f64), CliError> {
    let file = load_model_file(path).map_err(|e| with_path(e, path))?;
    if !file.params.arch.matches_features() {
        return Err(with_path(
            Error::MalformedModel("architecture does not match the feature extractor".into()),
            path,
        ));
    }
    let threshold = file
        .config
        .iter()
        .find(|(k, _)| k == "conf_threshold")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(DEFAULT_CONF_THRESHOLD);
    Ok((file.params, threshold))
}

fn header(out: &mut dyn Write, command: &str, extra: &[(&str, String)]) -> io::Result<()> {
    writeln!(out, "# micromotion {command} {OUTPUT_VERSION}")?;
    for (k, v) in extra {
        writeln!(out, "# {k}={v}")?;
    }
    Ok(())
}

fn config_echo(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    cfg.entries()
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.tracks == 0 {
        return Err(CliError::usage("--tracks must be at least 1"));
    }
    let settings = load_settings(args.config.as_deref())?;
    let mix = args.mix.or(settings.mix).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&mix) {
        return Err(CliError::usage("--mix must be in [0, 1]"));
    }
    let tracks = generate_dataset_with(args.tracks, mix, args.seed, &settings.gait)?;
    let comments = vec![
        format!("generator=synthgait tracks={} seed={} mix={mix}", args.tracks, args.seed),
    ];
    write_tracks(&args.out, &tracks, &comments).map_err(|e| with_path(e, &args.out))?;
    let frames: usize = tracks.iter().map(|t| t.len()).sum();
    writeln!(out, "wrote {} tracks ({frames} frames) to {}", tracks.len(), args.out.display()).map_err(io_err)?;
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = apply_overrides(&args.overrides, args.features.as_deref())?;
    let ds = load_data(&args.data, cfg.conf_threshold)?;
    require_tracks(&ds, &args.data)?;
    let mut extra = config_echo(&cfg);
    extra.push(("tracks", ds.tracks.len().to_string()));
    header(out, "train", &extra).map_err(io_err)?;

    let mut write_err = None;
    let result = train_with_progress(&ds.tracks, &cfg, |record| {
        let line = serde_json::to_string(record).expect("history record serializes");
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(failure) => {
            let mut message = failure.error.to_string();
            if let Some(params) = failure.checkpoint {
                let path = suffixed(&args.out, ".checkpoint");
                save_model(&params, Some(&cfg), &path).map_err(|e| with_path(e, &path))?;
                message.push_str(&format!("; last finite parameters saved to {}", path.display()));
            }
            return Err(CliError {
                code: exit_code(&failure.error),
                message,
            });
        }
    };
    save_model(&outcome.best_params, Some(&cfg), &args.out).map_err(|e| with_path(e, &args.out))?;
    let final_path = suffixed(&args.out, ".final");
    save_model(&outcome.final_params, Some(&cfg), &final_path).map_err(|e| with_path(e, &final_path))?;
    let best = outcome
        .best_epoch
        .map_or_else(|| "final".to_string(), |e| e.to_string());
    writeln!(
        out,
        "# train_tracks={} val_tracks={} best_epoch={best} model={} final={}",
        outcome.train_tracks,
        outcome.val_tracks,
        args.out.display(),
        final_path.display()
    )
    .map_err(io_err)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (params, threshold) = load_model_with_threshold(&args.model)?;
    let ds = load_data(&args.data, threshold)?;
    require_tracks(&ds, &args.data)?;
    let report = evaluate(&params, &ds.tracks, threshold).map_err(|e| with_path(e, &args.data))?;
    header(
        out,
        "eval",
        &[
            ("model", args.model.display().to_string()),
            ("data", args.data.display().to_string()),
            ("tracks", ds.tracks.len().to_string()),
        ],
    )
    .map_err(io_err)?;
    out.write_all(format_report(&report).as_bytes()).map_err(io_err)?;
    let transitions = evaluate_transitions(&params, &ds.tracks, threshold, TRANSITION_WINDOW).ok();
    if let Some(t) = &transitions {
        writeln!(out, "transition accuracy {:.4} ({} frames)", t.accuracy, t.confusion.total()).map_err(io_err)?;
    }
    let record = serde_json::json!({ "metrics": report, "transitions": transitions });
    writeln!(out, "{record}").map_err(io_err)?;
    Ok(())
}

fn prob_line(out: &mut dyn Write, track_id: &str, frame_index: u64, p_walking: f64) -> io::Result<()> {
    writeln!(out, "{track_id},{frame_index},{p_walking}")
}

fn cmd_infer(args: &InferArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (params, threshold) = load_model_with_threshold(&args.model)?;
    let mode = if args.stream { "stream" } else { "batch" };
    header(
        out,
        "infer",
        &[
            ("mode", mode.to_string()),
            ("model", args.model.display().to_string()),
            ("columns", "track_id,frame_index,p_walking".to_string()),
        ],
    )
    .map_err(io_err)?;
    if !args.stream {
        let ds = load_data(&args.data, threshold)?;
        for track in &ds.tracks {
            let preds = predict_track(&params, track, threshold).map_err(|e| with_path(e, &args.data))?;
            for p in preds {
                prob_line(out, &track.track_id, p.frame_index, p.probs.p_walking).map_err(io_err)?;
            }
        }
        return Ok(());
    }
    let file = fs::File::open(&args.data).map_err(|e| with_path(Error::Io(e), &args.data))?;
    let mut states: HashMap<String, StreamState> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| with_path(Error::Io(e), &args.data))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            if let Some(fps) = parse_fps_comment(trimmed) {
                if !(fps > 0.0) {
                    return Err(with_path(
                        Error::Parse {
                            line: i + 1,
                            message: "fps must be positive".into(),
                        },
                        &args.data,
                    ));
                }
            }
            continue;
        }
        let record = parse_record(trimmed, i + 1).map_err(|e| with_path(e, &args.data))?;
        let state = states
            .remove(&record.track_id)
            .unwrap_or_else(|| StreamState::new(&params, threshold));
        let (state, output) = stream_step(state, &record.pose, &params).map_err(|e| with_path(e, &args.data))?;
        prob_line(out, &record.track_id, record.pose.frame_index, output.probs.p_walking).map_err(io_err)?;
        states.insert(record.track_id, state);
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let settings = TinyCheck::default();
    let start = Instant::now();
    let report = tiny_grad_check(args.seed, settings)?;
    header(
        out,
        "gradcheck",
        &[
            ("seed", args.seed.to_string()),
            ("eps", settings.eps.to_string()),
            ("tolerance", GRADCHECK_TOLERANCE.to_string()),
        ],
    )
    .map_err(io_err)?;
    let (name, index) = report
        .worst
        .clone()
        .unwrap_or_else(|| ("none".to_string(), 0));
    writeln!(
        out,
        "max relative error {:e} at {name}[{index}] (analytic {:e}, numeric {:e}, {} entries, {:.2}s)",
        report.max_rel_error,
        report.analytic_at_worst,
        report.numeric_at_worst,
        report.checked,
        start.elapsed().as_secs_f64()
    )
    .map_err(io_err)?;
    writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(io_err)?;
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        writeln!(out, "PASS").map_err(io_err)?;
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!(
                "gradient check failed: {:e} >= {GRADCHECK_TOLERANCE:e} at {name}[{index}]",
                report.max_rel_error
            ),
        })
    }
}

fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = apply_overrides(&args.overrides, None)?;
    let train_ds = load_data(&args.data, cfg.conf_threshold)?;
    require_tracks(&train_ds, &args.data)?;
    let test_path = args.test.as_deref().unwrap_or(&args.data);
    let test_ds = if args.test.is_some() {
        load_data(test_path, cfg.conf_threshold)?
    } else {
        train_ds.clone()
    };
    require_tracks(&test_ds, test_path)?;
    let mut extra = config_echo(&cfg);
    extra.retain(|(k, _)| *k != "features");
    extra.push(("test", test_path.display().to_string()));
    header(out, "ablate", &extra).map_err(io_err)?;
    let rows = ablate(&train_ds.tracks, &test_ds.tracks, &cfg).map_err(|f| CliError::from(f.error))?;
    out.write_all(format_ablation_table(&rows).as_bytes()).map_err(io_err)?;
    for row in &rows {
        writeln!(out, "{}", serde_json::to_string(row).expect("row serializes")).map_err(io_err)?;
    }
    Ok(())
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => {
            let _ = out.flush();
            EXIT_OK
        }
        Err(e) => {
            let _ = out.flush();
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_overrides_and_rejects() {
        let mut s = Settings::default();
        parse_config_text("# comment\nepochs = 3\nmix=0.25\njitter_sigma_max=2 # trailing\n", &mut s).unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.mix, Some(0.25));
        assert_eq!(s.gait.jitter_sigma.1, 2.0);
        assert!(parse_config_text("bogus=1\n", &mut s).is_err());
        assert!(parse_config_text("epochs\n", &mut s).is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::VersionUnsupported("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::InsufficientData("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Io(io::Error::other("x"))), EXIT_IO);
    }

    #[test]
    fn zero_tracks_is_usage_error() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            ["micromotion", "synth", "--out", "/nonexistent/x", "--tracks", "0", "--seed", "1"],
            &mut out,
            &mut err,
        );
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn missing_flag_is_usage_error() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["micromotion", "train"], &mut out, &mut err), EXIT_USAGE);
    }
}
