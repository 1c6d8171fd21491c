//! Command-line front end. Exit codes: 0 success, 1 runtime error, 2 usage
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rsaforge_core::optim::{DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use rsaforge_core::synthetic::{gen_stimuli, gen_synthetic, synthetic_brain, BrainFixture};
use rsaforge_core::train::{train, CheckpointRule, TrainConfig};
use rsaforge_core::{ArchConfig, Model, TAPS};

use crate::checkpoint::{load_checkpoint_inferred, save_checkpoint};
use crate::data::{load_brain, load_dataset, load_images, read_bytes, save_brain, save_dataset, write_bytes};
use crate::pipeline::{
    compute_rdms, evaluate, extract, parse_taps, read_activations, read_rdms, score, worker_count,
    write_rdms, write_report, EvalManifest, Normalization,
};
use crate::report::{read_ledger, report_csv, report_json, report_rows};
use crate::data::write_archive;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rsaforge", version, about = "Train ResNet-20 and score its layers against brain RDMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write checkpoints plus a JSON-lines log
    Train(TrainArgs),
    /// Dump per-tap activations for a stimulus set
    Extract(ExtractArgs),
    /// Build one RDM per tap from an activation archive
    Rdm(RdmArgs),
    /// Score layer RDMs against brain RDMs
    Score(ScoreArgs),
    /// Run extract, rdm and score from a manifest and record a leaderboard row
    Evaluate(EvaluateArgs),
    /// Print the leaderboard from a results ledger
    Report(ReportArgs),
    /// Generate a synthetic labelled stimulus set and matching brain RDMs
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Resnet20,
    Resnet18,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SyntheticSpec {
    classes: usize,
    per_class: usize,
    size: usize,
}

fn parse_synthetic(s: &str) -> std::result::Result<SyntheticSpec, String> {
    let mut spec = SyntheticSpec {
        classes: 4,
        per_class: 50,
        size: 64,
    };
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
        let value: usize = value
            .parse()
            .map_err(|_| format!("{key} must be a non-negative integer"))?;
        match key.trim() {
            "classes" => spec.classes = value,
            "per_class" => spec.per_class = value,
            "size" => spec.size = value,
            other => return Err(format!("unknown key {other:?} (classes, per_class, size)")),
        }
    }
    if spec.classes < 2 || spec.per_class == 0 || spec.size == 0 {
        return Err("need classes >= 2, per_class >= 1 and size >= 1".into());
    }
    Ok(spec)
}

fn positive(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn non_negative(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn momentum(s: &str) -> std::result::Result<f32, String> {
    match s.parse::<f32>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("momentum must be in [0, 1), got {s:?}")),
    }
}

fn size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
    let dims = match s.split_once(['x', 'X']) {
        Some((h, w)) => parse(h).zip(parse(w)),
        None => parse(s).map(|v| (v, v)),
    };
    dims.ok_or_else(|| format!("expected N or HxW, got {s:?}"))
}

fn triple(s: &str) -> std::result::Result<[f32; 3], String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected three comma-separated numbers, got {s:?}"))?;
    <[f32; 3]>::try_from(v).map_err(|_| format!("expected three values, got {s:?}"))
}

fn channels(s: &str) -> std::result::Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected four comma-separated integers, got {s:?}"))?;
    <[usize; 4]>::try_from(v)
        .ok()
        .filter(|c| c.iter().all(|&x| x > 0))
        .ok_or_else(|| format!("expected four positive channel counts, got {s:?}"))
}

#[derive(Debug, Args)]
struct NormArgs {
    /// Per-channel mean subtracted after resizing
    #[arg(long, value_parser = triple, default_value = "0.485,0.456,0.406")]
    mean: [f32; 3],
    /// Per-channel standard deviation divided out after resizing
    #[arg(long, value_parser = triple, default_value = "0.229,0.224,0.225")]
    std: [f32; 3],
}

impl NormArgs {
    fn get(&self) -> Result<Normalization> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Usage("--std components must be positive".into()));
        }
        Ok(Normalization {
            mean: self.mean,
            std: self.std,
        })
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset archive with `images` [M,3,H,W] and `labels` [M]
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Generated dataset, e.g. classes=4,per_class=50[,size=64]
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<SyntheticSpec>,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 120)]
    max_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_parser = positive, default_value_t = DEFAULT_LEARNING_RATE, allow_negative_numbers = true)]
    lr: f32,
    #[arg(long, value_parser = momentum, default_value_t = DEFAULT_MOMENTUM, allow_negative_numbers = true)]
    momentum: f32,
    #[arg(long, value_parser = non_negative, default_value_t = DEFAULT_WEIGHT_DECAY, allow_negative_numbers = true)]
    weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Arch::Resnet20)]
    arch: Arch,
    /// Output channels of the four stages
    #[arg(long, value_parser = channels, default_value = "64,128,256,512")]
    channels: [usize; 4],
    /// Model input size, N or HxW
    #[arg(long, value_parser = size, default_value = "64")]
    input_size: (usize, usize),
    /// Output classes; defaults to the dataset's class count
    #[arg(long)]
    classes: Option<usize>,
    /// Directory for checkpoints and the training log
    #[arg(long, default_value = "checkpoints")]
    out: PathBuf,
    #[command(flatten)]
    norm: NormArgs,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM directory or RDMA image archive
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated taps
    #[arg(long, value_delimiter = ',', default_values_t = TAPS.map(String::from))]
    taps: Vec<String>,
    #[arg(long, value_parser = size, default_value = "64")]
    input_size: (usize, usize),
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    norm: NormArgs,
}

#[derive(Debug, Args)]
struct RdmArgs {
    #[arg(long)]
    activations: PathBuf,
    /// Directory receiving one `<tap>.rdmt` per layer
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Directory of `<tap>.rdmt` files
    #[arg(long)]
    rdms: PathBuf,
    #[arg(long)]
    brain: PathBuf,
    /// Stimulus-set name recorded in the report
    #[arg(long, default_value = "set")]
    set: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Results ledger; overrides the manifest's
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Output file; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 92)]
    stimuli: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_parser = size, default_value = "64")]
    size: (usize, usize),
    #[arg(long, default_value_t = 15)]
    subjects: usize,
    #[arg(long, value_parser = non_negative, default_value_t = 0.25)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset archive (`images` and `labels`)
    #[arg(long)]
    images_out: PathBuf,
    /// Brain archive (`EVC` and `IT`)
    #[arg(long)]
    brain_out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Rdm(a) => cmd_rdm(a),
        Command::Score(a) => cmd_score(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    mean_loss: f64,
    accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_path: Option<&'a str>,
}

pub fn checkpoint_file(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.rdma"))
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

fn cmd_train(a: TrainArgs) -> Result<()> {
    if a.epochs > a.max_epochs {
        return Err(Error::Usage(format!(
            "--epochs {} exceeds --max-epochs {}",
            a.epochs, a.max_epochs
        )));
    }
    if a.batch_size == 0 {
        return Err(Error::Usage("--batch-size must be positive".into()));
    }
    let norm = a.norm.get()?;
    let dataset = match (&a.data, a.synthetic) {
        (Some(path), _) => load_dataset(path)?,
        (None, Some(s)) => gen_synthetic(s.classes, s.per_class, (s.size, s.size), a.seed)?,
        (None, None) => unreachable!("clap requires one of --data / --synthetic"),
    };
    let classes = a.classes.unwrap_or(dataset.class_count());
    let base = match a.arch {
        Arch::Resnet20 => ArchConfig::resnet20(classes),
        Arch::Resnet18 => ArchConfig::resnet18(classes),
    };
    let config = base
        .with_channels(a.channels)
        .with_input_size(a.input_size.0, a.input_size.1);
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let mut model = Model::build(config, a.seed)?;
    let train_config = TrainConfig {
        epochs: a.epochs,
        max_epochs: a.max_epochs,
        batch_size: a.batch_size,
        checkpoints: CheckpointRule::default(),
        seed: a.seed,
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        mean: norm.mean,
        std: norm.std,
        resize: true,
    };
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let mut sink_error = None;
    let log = train(&mut model, &dataset, &train_config, |epoch, model| {
        let path = checkpoint_file(&a.out, epoch);
        let written = save_checkpoint(model, epoch).and_then(|b| write_bytes(&path, &b));
        match written {
            Ok(()) => {
                eprintln!("epoch {epoch}: wrote {}", path.display());
                Ok(Some(path.to_string_lossy().into_owned()))
            }
            Err(e) => {
                let msg = e.to_string();
                sink_error = Some(e);
                Err(rsaforge_core::Error::Sink(msg))
            }
        }
    });
    let log = match (log, sink_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let mut text = String::new();
    for r in &log {
        let line = LogLine {
            epoch: r.epoch,
            mean_loss: r.mean_loss,
            accuracy: r.accuracy,
            checkpoint_path: r.checkpoint.as_deref(),
        };
        text.push_str(&serde_json::to_string(&line).expect("plain record"));
        text.push('\n');
        eprintln!("epoch {}: loss {:.4}, accuracy {:.3}", r.epoch, r.mean_loss, r.accuracy);
    }
    write_bytes(&a.out.join(TRAIN_LOG), text.as_bytes())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let taps = parse_taps(&a.taps)?;
    let norm = a.norm.get()?;
    let workers = worker_count()?;
    let checkpoint = load_checkpoint_inferred(&read_bytes(&a.checkpoint)?, a.input_size)?;
    let images = load_images(&a.images)?;
    let acts = extract(&checkpoint.model, &images, &taps, &norm, workers)?;
    write_archive(&a.out, &acts)
}

fn cmd_rdm(a: RdmArgs) -> Result<()> {
    let acts = read_activations(&a.activations)?;
    let rdms = compute_rdms(&acts)?;
    write_rdms(&a.out, &rdms)?;
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let rdms = read_rdms(&a.rdms)?;
    let brain = load_brain(&a.brain)?;
    let report = score(&rdms, &brain, &a.set)?;
    write_report(&a.out, &report)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let workers = worker_count()?;
    let manifest = EvalManifest::load(&a.manifest)?;
    let outcome = evaluate(&manifest, a.ledger.as_deref(), workers)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let row = &outcome.row;
    println!(
        "{} epoch {}: EVC {:.3}%, IT {:.3}%, mean {:.3}% (best layer {})",
        row.model, row.epoch, row.evc_pct, row.it_pct, row.mean_pct, row.best_layer
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let rows = report_rows(&read_ledger(&a.ledger)?);
    let text = match a.format {
        Format::Csv => report_csv(&rows)?,
        Format::Json => report_json(&rows)?,
    };
    match &a.out {
        Some(path) => write_bytes(path, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(Error::io(Path::new("<stdout>"))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.stimuli < 3 {
        return Err(Error::Usage("--stimuli must be at least 3".into()));
    }
    if a.subjects < 2 {
        return Err(Error::Usage("--subjects must be at least 2".into()));
    }
    let stimuli = gen_stimuli(a.stimuli, a.classes, a.size, a.seed)
        .map_err(|e| Error::Usage(e.to_string()))?;
    let fixture = BrainFixture {
        subjects: a.subjects,
        noise: a.noise as f64,
        seed: a.seed,
    };
    let brain = synthetic_brain(&stimuli, &fixture)?;
    save_dataset(&a.images_out, &stimuli)?;
    save_brain(&a.brain_out, &brain)
}
