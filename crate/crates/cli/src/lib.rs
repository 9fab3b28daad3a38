//! Command-line runner: synthetic data, training, inference, gradient
//! checks and FROC evaluation. Every command that writes a run directory
//! also writes the exact `config.toml` it used and a `run.json` naming the
//! tool version, command and seed.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msb_core::config::{ModelVariant, Precision, RunConfig};
use msb_core::detection::Detection;
use msb_core::experiment::{prepare_sample, synthesize_split, train_detector, PreparedSplit};
use msb_core::froc::{evaluate, group_by_image, Annotation, FrocReport};
use msb_core::io::{read_annotations_jsonl, read_detections_csv, save_detections_csv};
use msb_core::model::{detect_all, Detector, LossRecord};
use msb_core::synth::{dataset_root, load_dataset, read_manifest, write_dataset, Split};
use msb_core::verify::{run_gradcheck_suite, Fault, SuiteReport};

pub const TOOL: &str = "msb";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "msb", version, about = "Multi-scale booster lesion detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare every analytic gradient against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,

        /// Verification precision, overriding the config.
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,

        #[arg(long, hide = true, value_name = "OP")]
        fault_inject: Option<String>,
    },
    /// Generate the synthetic phantom dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,

        /// Ablation variant: fpn, fpn+msb, fpn+hdc, fpn+hdc+ch, fpn+hdc+sp.
        #[arg(long, value_name = "NAME")]
        model: Option<ModelVariant>,

        /// Dataset directory written by `synth`; generated in memory when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Run a trained detector over one split and write detections.csv.
    Infer {
        #[command(flatten)]
        common: Common,

        #[arg(long, value_name = "NAME")]
        model: Option<ModelVariant>,

        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,

        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,

        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// FROC report for a detections CSV.
    Eval {
        #[command(flatten)]
        common: Common,

        #[arg(long, value_name = "PATH")]
        detections: PathBuf,

        /// Annotations as JSON lines.
        #[arg(long, value_name = "PATH", conflicts_with = "data")]
        ground_truth: Option<PathBuf>,

        /// Dataset directory; annotations of `--split` are used.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,

        #[arg(long, default_value = "test")]
        split: Split,

        #[arg(long, value_name = "F")]
        iou_thresh: Option<f64>,

        /// Comma-separated FPs per image, e.g. 0.5,1,2,4,8.
        #[arg(long, value_name = "LIST", value_parser = parse_rates)]
        fp_rates: Option<FpRates>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpRates(pub Vec<f64>);

fn parse_rates(s: &str) -> Result<FpRates, String> {
    let rates = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if rates.is_empty() || rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err("rates must be positive numbers".into());
    }
    Ok(FpRates(rates))
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" | "32" => Ok(Precision::F32),
        "f64" | "64" => Ok(Precision::F64),
        other => Err(format!("unknown precision `{other}` (f32 or f64)")),
    }
}

/// A failed command with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            code: 2,
            message: format!("io error at {}: {err}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<msb_core::Error> for CliError {
    fn from(e: msb_core::Error) -> Self {
        Self {
            code: if e.is_io() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<()> {
    let invocation = command_name(&command);
    match command {
        Command::Gradcheck {
            common,
            precision,
            fault_inject,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.verify.seed = seed;
            }
            if let Some(p) = precision {
                cfg.verify.precision = p;
            }
            let fault = fault_inject.map(|f| f.parse::<Fault>()).transpose()?;
            cmd_gradcheck(&cfg, fault, common.out.as_deref(), stdout, stderr)
        }
        Command::Synth { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
                cfg.data.phantom.seed = seed;
            }
            let out = require_out(&common, &cfg)?;
            cmd_synth(&cfg, &out, stdout)
        }
        Command::Train { common, model, data } => {
            let cfg = run_config(&common, model)?;
            let out = require_out(&common, &cfg)?;
            cmd_train(&cfg, data.as_deref(), &out, stdout, stderr)
        }
        Command::Infer {
            common,
            model,
            checkpoint,
            data,
            split,
        } => {
            let cfg = run_config(&common, model)?;
            let out = require_out(&common, &cfg)?;
            cmd_infer(&cfg, &checkpoint, data.as_deref(), split, &out, stdout)
        }
        Command::Eval {
            common,
            detections,
            ground_truth,
            data,
            split,
            iou_thresh,
            fp_rates,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(t) = iou_thresh {
                cfg.eval.iou_threshold = t;
            }
            if let Some(FpRates(r)) = fp_rates {
                cfg.eval.fp_rates = r;
            }
            cfg.eval.options()?;
            let truth = match (ground_truth, data) {
                (Some(path), _) => GroundTruth::Jsonl(path),
                (None, Some(dir)) => GroundTruth::Dataset(dir, split),
                (None, None) => {
                    return Err(CliError::validation(
                        "eval needs --ground-truth FILE or --data DIR",
                    ))
                }
            };
            let report = cmd_eval(&cfg, &detections, &truth)?;
            let text = report.to_text();
            write_out(stdout, &text)?;
            if let Some(out) = &common.out {
                create_dir(out)?;
                write_file(&out.join(REPORT_TEXT_FILE), &text)?;
                write_file(&out.join(REPORT_JSON_FILE), &to_json(&report))?;
                write_run_files(out, &cfg, &invocation)?;
            }
            Ok(())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gradcheck { .. } => "gradcheck",
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Infer { .. } => "infer",
        Command::Eval { .. } => "eval",
    }
}

pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    match &common.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn run_config(common: &Common, model: Option<ModelVariant>) -> CliResult<RunConfig> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = model {
        cfg.model.variant = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common, cfg: &RunConfig) -> CliResult<PathBuf> {
    Ok(common.out.clone().unwrap_or_else(|| cfg.out_dir.clone()))
}

/// Provenance written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub model: String,
}

pub fn write_run_files(dir: &Path, cfg: &RunConfig, command: &str) -> CliResult<()> {
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    let info = RunInfo {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: command.into(),
        seed: cfg.seed,
        model: cfg.model.variant.name().into(),
    };
    write_file(&dir.join(RUN_FILE), &to_json(&info))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_out(w: &mut dyn Write, text: &str) -> CliResult<()> {
    w.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn cmd_gradcheck(
    cfg: &RunConfig,
    fault: Option<Fault>,
    out: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<()> {
    let report: SuiteReport = run_gradcheck_suite(&cfg.verify, fault)?;
    for w in &report.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    let text = report.to_text();
    write_out(stdout, &text)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(GRADCHECK_FILE), &text)?;
        write_run_files(dir, cfg, "gradcheck")?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<String> = report
            .failures()
            .iter()
            .map(|r| format!("{} ({:.3e} > {:.1e})", r.name, r.max_relative_error, r.tolerance))
            .collect();
        Err(CliError::validation(format!(
            "gradient check failed: {}",
            names.join(", ")
        )))
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, stdout: &mut dyn Write) -> CliResult<()> {
    create_dir(out)?;
    let manifest = write_dataset(&cfg.data.phantom, &cfg.data.counts, out)?;
    write_run_files(out, cfg, "synth")?;
    let mut text = String::new();
    for split in Split::ALL {
        let n = manifest.split(split).count();
        let lesions: usize = manifest.split(split).map(|e| e.annotations.len()).sum();
        text += &format!("{split}: {n} images, {lesions} lesions\n");
    }
    text += &format!("wrote {}\n", out.display());
    write_out(stdout, &text)
}

/// Loads and normalises one split from a dataset directory, or synthesises it
/// from the config when no directory is given.
pub fn prepare_split(cfg: &RunConfig, data: Option<&Path>, split: Split) -> CliResult<PreparedSplit> {
    let Some(dir) = data else {
        return Ok(synthesize_split(cfg, split)?);
    };
    let root = dataset_root(dir);
    let manifest = read_manifest(&root)?;
    let stride = cfg.model.backbone.max_stride();
    if manifest.spec.image_size % stride != 0 {
        return Err(CliError::validation(format!(
            "dataset images are {0}x{0}, not divisible by the model's largest stride {stride}",
            manifest.spec.image_size
        )));
    }
    let mut samples = Vec::new();
    let mut annotations = Vec::new();
    for s in load_dataset(&manifest, &root, Some(split)) {
        let s = s?;
        samples.push(prepare_sample(&s.image_id, &s.stack, &s.annotations));
        annotations.extend(s.annotations);
    }
    if samples.is_empty() {
        return Err(CliError::validation(format!(
            "{} has no images in split `{split}`",
            root.display()
        )));
    }
    Ok(PreparedSplit { samples, annotations })
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("epoch,iteration,loss,classification,regression,grad_norm\n");
    for r in log {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.iteration, r.loss, r.classification, r.regression, r.grad_norm
        );
    }
    s
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> CliResult<()> {
    let split = prepare_split(cfg, data, Split::Train)?;
    create_dir(out)?;
    write_run_files(out, cfg, "train")?;
    let mut epoch_sum = 0.0;
    let mut epoch_n = 0usize;
    let mut current = 0usize;
    let (det, log) = train_detector(cfg, &split, |r| {
        if r.epoch != current {
            if epoch_n > 0 {
                let _ = writeln!(stderr, "epoch {current}: mean loss {:.5}", epoch_sum / epoch_n as f64);
            }
            current = r.epoch;
            epoch_sum = 0.0;
            epoch_n = 0;
        }
        epoch_sum += r.loss;
        epoch_n += 1;
    })?;
    if epoch_n > 0 {
        let _ = writeln!(stderr, "epoch {current}: mean loss {:.5}", epoch_sum / epoch_n as f64);
    }
    write_file(&out.join(LOSS_LOG_FILE), &loss_log_csv(&log))?;
    det.save(out.join(CHECKPOINT_FILE))?;
    write_out(
        stdout,
        &format!(
            "trained {} for {} iterations on {} images; wrote {}\n",
            cfg.model.variant,
            log.len(),
            split.samples.len(),
            out.display()
        ),
    )
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    split: Split,
    out: &Path,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let det = Detector::<f32>::load(cfg.model.clone(), checkpoint).map_err(|e| {
        let mut err = CliError::from(e);
        err.message += &format!(" (model variant `{}`)", cfg.model.variant);
        err
    })?;
    let samples = prepare_split(cfg, data, split)?;
    let dets = detect_all(&det, &samples.samples, &cfg.inference)?;
    create_dir(out)?;
    save_detections_csv(out.join(DETECTIONS_FILE), &dets)?;
    write_run_files(out, cfg, "infer")?;
    write_out(
        stdout,
        &format!(
            "{} detections on {} {split} images; wrote {}\n",
            dets.len(),
            samples.samples.len(),
            out.join(DETECTIONS_FILE).display()
        ),
    )
}

/// Where `eval` reads reference annotations from.
#[derive(Clone, Debug)]
pub enum GroundTruth {
    Jsonl(PathBuf),
    Dataset(PathBuf, Split),
}

/// Evaluates a detections CSV. The image set is every image that has an
/// annotation or a detection, plus every manifest image of the split.
pub fn cmd_eval(cfg: &RunConfig, detections: &Path, truth: &GroundTruth) -> CliResult<FrocReport> {
    let dets: Vec<Detection> = read_detections_csv(detections)?;
    let (annotations, ids): (Vec<Annotation>, Vec<String>) = match truth {
        GroundTruth::Jsonl(path) => (read_annotations_jsonl(path)?, Vec::new()),
        GroundTruth::Dataset(dir, split) => {
            let manifest = read_manifest(&dataset_root(dir))?;
            let ids = manifest.split(*split).map(|e| e.image_id.clone()).collect();
            (manifest.annotations(*split), ids)
        }
    };
    let images = group_by_image(&ids, &dets, &annotations);
    Ok(evaluate(&images, &cfg.eval.options()?)?)
}
