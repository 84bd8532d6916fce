//! `patchwise`: corpus preparation, training, evaluation, prediction,
//! triage and patch-label overlays.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchwise::checkpoint;
use patchwise::config::{BackboneSpec, PipelineConfig, Setting};
use patchwise::dataset::{self, CorpusManifest, Crack500Spec, SyntheticSpec};
use patchwise::geometry::PatchStrategy;
use patchwise::overlay::visualize;
use patchwise::patches::Split;
use patchwise::schedule::ScheduleSpec;
use patchwise::train::{evaluate, evaluate_two_stage, predict_paths, train, TrainOptions};
use patchwise::triage::triage;
use patchwise::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "patchwise", version, about = "Patch label inference for pavement distress images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pavement corpus with masks and a manifest.
    Synth(SynthArgs),
    /// Build a manifest from a `<root>/<class>/<image>` tree.
    Ingest(IngestArgs),
    /// Build crack/normal manifests from mask-annotated crack images.
    Crack500(Crack500Args),
    /// Write a manifest without the normal class.
    DistressedOnly(DistressedOnlyArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Evaluate(EvaluateArgs),
    /// Classify individual images.
    Predict(PredictArgs),
    /// Split a manifest by distressed score into kept and dropped images.
    Filter(FilterArgs),
    /// Render per-patch confidences over an image.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Number of classes including normal, at most 8.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 1200)]
    width: u32,
    #[arg(long, default_value_t = 900)]
    height: u32,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    root: PathBuf,
    /// Manifest path; quarantined files are listed next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Crack500Args {
    /// Directory of crack images with `_mask` siblings.
    #[arg(long)]
    cracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 286)]
    normals: usize,
    #[arg(long, default_value_t = 5)]
    replicas: usize,
    #[arg(long, default_value_t = 1200)]
    width: u32,
    #[arg(long, default_value_t = 900)]
    height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DistressedOnlyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    #[value(name = "i-det")]
    IDet,
    #[value(name = "i-rec")]
    IRec,
    #[value(name = "ii-rec-i")]
    IIRecI,
    #[value(name = "ii-rec-n")]
    IIRecN,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::IDet => Setting::IDet,
            SettingArg::IRec => Setting::IRec,
            SettingArg::IIRecI => Setting::IIRecI,
            SettingArg::IIRecN => Setting::IIRecN,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Sw,
    Ip,
    Ss,
}

impl From<StrategyArg> for PatchStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Sw => PatchStrategy::SlideWindow,
            StrategyArg::Ip => PatchStrategy::ImagePyramid,
            StrategyArg::Ss => PatchStrategy::SparseSampling,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Tiny,
    #[value(name = "effnet-b3")]
    EffnetB3,
}

fn unit_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite value >= 0, got {v}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a finite value > 0, got {v}"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    setting: SettingArg,
    #[arg(long, value_enum, default_value = "ip")]
    strategy: StrategyArg,
    /// Sampled share of each pyramid layer; only with `--strategy ss`.
    #[arg(long, value_parser = unit_fraction)]
    alpha: Option<f64>,
    #[arg(long, value_parser = non_negative, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "effnet-b3")]
    backbone: BackboneArg,
    /// Torchvision-style EfficientNet-B3 weights in safetensors format.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, value_parser = positive, default_value_t = 8e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wrap Adam in Lookahead.
    #[arg(long)]
    lookahead: bool,
    /// Train without flips, rotations and brightness jitter.
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint; the recognizer for `ii-rec-n`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Detector checkpoint for `ii-rec-n`.
    #[arg(long)]
    detector_ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the checkpoint's setting.
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for `report.json` and `roc.tsv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Images with distressed score at or above this are kept.
    #[arg(long)]
    threshold: f64,
    /// Directory for `kept.tsv`, `dropped.tsv` and `scores.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Patch strategy the caller expects the checkpoint to use.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Directory for `overlay.png` and `overlay.tsv`.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::InvalidConfig(_)
        | Error::InvalidGeometry(_)
        | Error::InfeasibleEnumeration { .. }
        | Error::Checkpoint(_)
        | Error::Manifest(_)
        | Error::Label(_)
        | Error::Shape(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Crack500(a) => crack500(a),
        Command::DistressedOnly(a) => distressed_only(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Filter(a) => filter(a),
        Command::Visualize(a) => visualize_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> CmdResult {
    let m = dataset::generate_synthetic_corpus(
        &a.out,
        &SyntheticSpec {
            per_class: a.per_class,
            classes: a.classes,
            dims: (a.width, a.height),
            seed: a.seed,
            train_fraction: a.train_fraction,
        },
    )?;
    println!("{} images in {} classes, manifest {}", m.entries.len(), m.classes.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

fn ingest(a: IngestArgs) -> CmdResult {
    let report = dataset::ingest(&a.root, (a.train_fraction, 1.0 - a.train_fraction), a.seed)?;
    report.manifest.write(&a.out)?;
    let quarantine = a.out.with_file_name("quarantine.tsv");
    std::fs::write(&quarantine, report.quarantine_tsv()).map_err(Error::from)?;
    println!(
        "{} images in {} classes, {} quarantined",
        report.manifest.entries.len(),
        report.manifest.classes.len(),
        report.quarantined.len()
    );
    Ok(())
}

fn crack500(a: Crack500Args) -> CmdResult {
    let out = dataset::prepare_crack500_pdd(
        &a.cracks,
        &a.out,
        &Crack500Spec {
            normals: a.normals,
            dims: (a.width, a.height),
            seed: a.seed,
            replicas: a.replicas,
        },
    )?;
    println!(
        "{} crack and {} normal images, {} replicas, {} skipped without mask",
        out.cracks,
        out.normals,
        out.manifests.len(),
        out.skipped.len()
    );
    if !out.detection_usable() {
        println!("no normal images: manifests support recognition only");
    }
    Ok(())
}

fn distressed_only(a: DistressedOnlyArgs) -> CmdResult {
    let m = dataset::distressed_only(&CorpusManifest::read(&a.manifest)?)?;
    m.write(&a.out)?;
    println!("{} distressed images in {} classes", m.entries.len(), m.classes.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let setting = Setting::from(a.setting);
    if setting == Setting::IIRecN {
        return Err(Failure::Usage(
            "ii-rec-n is not trained directly; train i-det and ii-rec-i models and chain them with evaluate".into(),
        ));
    }
    if a.alpha.is_some() && a.strategy != StrategyArg::Ss {
        return Err(Failure::Usage("--alpha only applies to --strategy ss".into()));
    }
    if a.pretrained.is_some() && matches!(a.backbone, BackboneArg::Tiny) {
        return Err(Failure::Usage("--pretrained needs --backbone effnet-b3".into()));
    }
    let manifest = CorpusManifest::read(&a.manifest)?;
    let mut config = PipelineConfig::new(setting, vec![], None);
    config.strategy = a.strategy.into();
    if let Some(alpha) = a.alpha {
        config.alpha = alpha;
    }
    config.lambda = a.lambda;
    config.backbone = match a.backbone {
        BackboneArg::Tiny => BackboneSpec::tiny(),
        BackboneArg::EffnetB3 => BackboneSpec::effnet_b3(),
    };
    if a.no_augment {
        config.augment = None;
    }
    let schedule = ScheduleSpec {
        base_lr: a.lr,
        total_epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        lookahead: a.lookahead.then(Default::default),
        ..ScheduleSpec::default()
    };
    let outcome = train(
        &manifest,
        config,
        &schedule,
        &TrainOptions {
            out_dir: Some(a.out.clone()),
            validation_fraction: a.validation_fraction,
            pretrained: a.pretrained,
            evaluate_test: true,
        },
    )?;
    println!("best epoch {} of {}, run directory {}", outcome.best_epoch, a.epochs, a.out.display());
    if let Some(r) = &outcome.test_report {
        print_summary(r);
    }
    Ok(())
}

fn print_summary(r: &patchwise::report::EvaluationReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} on {} images: AUC {}, macro F1 {}",
        r.setting,
        r.num_samples,
        fmt(r.auc()),
        fmt(r.macro_f1())
    );
}

fn evaluate_cmd(a: EvaluateArgs) -> CmdResult {
    let manifest = CorpusManifest::read(&a.manifest)?;
    let mut model = checkpoint::load(&a.ckpt)?;
    let setting = a.setting.map(Setting::from).unwrap_or(model.config.setting);
    let report = if setting == Setting::IIRecN {
        let path = a
            .detector_ckpt
            .ok_or_else(|| Failure::Usage("ii-rec-n needs --detector-ckpt".into()))?;
        let mut detector = checkpoint::load(&path)?;
        let out = evaluate_two_stage(&mut detector, &mut model, &manifest, a.split)?;
        println!("recognizer ran on {} of {} images", out.recognizer_calls, out.report.num_samples);
        out.report
    } else {
        if a.detector_ckpt.is_some() {
            return Err(Failure::Usage("--detector-ckpt only applies to ii-rec-n".into()));
        }
        if setting != model.config.setting {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for {}, not {setting}",
                model.config.setting
            ))
            .into());
        }
        evaluate(&mut model, &manifest, a.split)?
    };
    match &a.out {
        Some(dir) => report.write_to(dir)?,
        None => println!("{}", report.to_json()),
    }
    print_summary(&report);
    Ok(())
}

fn predict(a: PredictArgs) -> CmdResult {
    let mut model = checkpoint::load(&a.ckpt)?;
    let p = predict_paths(&mut model, &a.images)?;
    let scores = p.scores(model.config.normal_class);
    let mut out = String::from("path\tclass\tscore");
    for name in &model.config.class_names {
        let _ = write!(out, "\tp_{name}");
    }
    out.push('\n');
    for (i, path) in a.images.iter().enumerate() {
        let score = scores.as_ref().map_or("NA".to_string(), |s| s[i].to_string());
        let _ = write!(out, "{}\t{}\t{score}", path.display(), model.config.class_names[p.predictions[i]]);
        for v in &p.probs[i] {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, out).map_err(Error::from)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn filter(a: FilterArgs) -> CmdResult {
    if !a.threshold.is_finite() {
        return Err(Failure::Usage(format!("threshold must be finite, got {}", a.threshold)));
    }
    let manifest = CorpusManifest::read(&a.manifest)?;
    let mut model = checkpoint::load(&a.ckpt)?;
    let t = triage(&mut model, &manifest, a.threshold)?;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    t.kept.write(&a.out.join("kept.tsv"))?;
    t.dropped.write(&a.out.join("dropped.tsv"))?;
    let mut scores = String::from("path\tscore\n");
    for (e, s) in manifest.entries.iter().zip(&t.scores) {
        let _ = writeln!(scores, "{}\t{s}", manifest.resolve(e).display());
    }
    std::fs::write(a.out.join("scores.tsv"), scores).map_err(Error::from)?;
    println!("kept {} of {} images", t.kept.entries.len(), manifest.entries.len());
    if let (Some(r), Some(p)) = (t.recall(), t.precision()) {
        println!("kept-set recall {r:.4}, precision {p:.4}");
    }
    Ok(())
}

fn visualize_cmd(a: VisualizeArgs) -> CmdResult {
    let mut model = checkpoint::load(&a.ckpt)?;
    if let Some(s) = a.strategy {
        let expected = PatchStrategy::from(s);
        if expected != model.config.strategy {
            return Err(Error::Checkpoint(format!(
                "checkpoint uses strategy {}, not {}",
                model.config.strategy.as_str(),
                expected.as_str()
            ))
            .into());
        }
    }
    let image = dataset::load_gray(&a.image)?;
    let artifact = visualize(&mut model, &image)?;
    artifact.write_to(&a.out)?;
    let tagged = artifact.boxes.iter().filter(|b| b.tag.is_some()).count();
    println!(
        "{} boxes, {tagged} tagged, written to {}",
        artifact.boxes.len(),
        a.out.display()
    );
    Ok(())
}
