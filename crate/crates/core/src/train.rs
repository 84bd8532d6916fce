//! Training, evaluation and the two-stage protocol.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::checkpoint;
use crate::config::{PipelineConfig, Setting};
use crate::dataset::ingest::load_gray;
use crate::dataset::manifest::{CorpusManifest, NORMAL};
use crate::dataset::split::stratified;
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, Objective};
use crate::model::{argmax, PatchClassifier};
use crate::nn::{Mode, Module};
use crate::optim::Optimizer;
use crate::patches::{PatchSet, Split};
use crate::report::{report, EvaluationReport, ReportInput};
use crate::schedule::{lr_at, ScheduleSpec};

/// How manifest classes map onto a setting's labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingSpec {
    pub setting: Setting,
    pub class_names: Vec<String>,
    pub normal_class: Option<usize>,
    /// Setting label of every manifest class; `None` drops the class.
    pub label_map: Vec<Option<usize>>,
}

impl SettingSpec {
    pub fn from_manifest(setting: Setting, manifest: &CorpusManifest) -> Result<Self> {
        let n = manifest.classes.len();
        let normal = manifest.normal_class();
        let spec = match setting {
            Setting::IDet => {
                if normal != Some(0) || n < 2 {
                    return Err(Error::InvalidConfig(
                        "i-det needs a manifest with a normal class and at least one distress class".into(),
                    ));
                }
                Self {
                    setting,
                    class_names: vec![NORMAL.into(), "distressed".into()],
                    normal_class: Some(0),
                    label_map: (0..n).map(|k| Some((k != 0) as usize)).collect(),
                }
            }
            Setting::IRec => {
                if n < 2 {
                    return Err(Error::InvalidConfig("i-rec needs at least two classes".into()));
                }
                Self {
                    setting,
                    class_names: manifest.classes.clone(),
                    normal_class: normal,
                    label_map: (0..n).map(Some).collect(),
                }
            }
            Setting::IIRecI => {
                if manifest.entries.iter().any(|e| e.class == NORMAL) {
                    return Err(Error::InvalidConfig(
                        "ii-rec-i manifests must not contain normal entries".into(),
                    ));
                }
                let offset = normal.is_some() as usize;
                if n - offset < 2 {
                    return Err(Error::InvalidConfig("ii-rec-i needs at least two distress classes".into()));
                }
                Self {
                    setting,
                    class_names: manifest.classes[offset..].to_vec(),
                    normal_class: None,
                    label_map: (0..n).map(|k| k.checked_sub(offset)).collect(),
                }
            }
            Setting::IIRecN => {
                return Err(Error::InvalidConfig(
                    "ii-rec-n chains an i-det detector and a ii-rec-i recognizer; train those instead".into(),
                ))
            }
        };
        Ok(spec)
    }

    /// Checks that a model was built for this label space.
    pub fn check_model(&self, config: &PipelineConfig) -> Result<()> {
        if config.setting != self.setting
            || config.class_names != self.class_names
            || config.normal_class != self.normal_class
        {
            return Err(Error::Checkpoint(format!(
                "model was trained for {} over {:?}, manifest gives {} over {:?}",
                config.setting, config.class_names, self.setting, self.class_names
            )));
        }
        Ok(())
    }
}

/// An image path with its setting label.
#[derive(Clone, Debug)]
pub struct LabeledPath {
    pub path: PathBuf,
    pub label: usize,
}

/// Entries of `split` (all splits for `None`) with setting labels.
pub fn labeled_paths(manifest: &CorpusManifest, spec: &SettingSpec, split: Option<Split>) -> Vec<LabeledPath> {
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .filter_map(|e| {
            let class = manifest.class_index(&e.class)?;
            spec.label_map[class].map(|label| LabeledPath {
                path: manifest.resolve(e),
                label,
            })
        })
        .collect()
}

/// Per-epoch record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_auc: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Run directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Fraction of the train split held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Torchvision-style EfficientNet weights for the backbone.
    pub pretrained: Option<PathBuf>,
    /// Evaluate the selected model on the test split.
    pub evaluate_test: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            validation_fraction: 0.1,
            pretrained: None,
            evaluate_test: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The checkpoint selected on validation, or the last one without
    /// validation data.
    pub model: PatchClassifier,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test_report: Option<EvaluationReport>,
}

/// Cached training inputs: patches when the pipeline is deterministic,
/// decoded images when every epoch re-augments.
enum Inputs {
    Patches(Vec<PatchSet>),
    Images(Vec<GrayImage>),
}

fn load_patches(model: &PatchClassifier, items: &[LabeledPath]) -> Result<Vec<PatchSet>> {
    items.iter().map(|it| model.extract(&load_gray(&it.path)?)).collect()
}

/// Writes `metrics.tsv` and `validation.tsv`.
fn write_logs(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut metrics = String::from("epoch\tlr\tclassification\tsparsity\ttotal\n");
    let mut val = String::from("epoch\tauc\tmacro_f1\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
    for r in history {
        let _ = writeln!(
            metrics,
            "{}\t{}\t{}\t{}\t{}",
            r.epoch, r.lr, r.loss.classification, r.loss.sparsity, r.loss.total
        );
        let _ = writeln!(val, "{}\t{}\t{}", r.epoch, opt(r.val_auc), opt(r.val_macro_f1));
    }
    std::fs::write(dir.join("metrics.tsv"), metrics)?;
    std::fs::write(dir.join("validation.tsv"), val)?;
    Ok(())
}

/// Optimizes the weighted objective over the train split of `manifest`.
///
/// Class names and the normal index come from the manifest under
/// `config.setting`; the model seed comes from `schedule.seed`.
pub fn train(
    manifest: &CorpusManifest,
    mut config: PipelineConfig,
    schedule: &ScheduleSpec,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let spec = SettingSpec::from_manifest(config.setting, manifest)?;
    config.class_names = spec.class_names.clone();
    config.normal_class = spec.normal_class;
    config.seed = schedule.seed;
    config.validate()?;
    if !(0.0..1.0).contains(&options.validation_fraction) {
        return Err(Error::InvalidConfig("validation fraction must lie in [0, 1)".into()));
    }

    let train_items = labeled_paths(manifest, &spec, Some(Split::Train));
    if train_items.is_empty() {
        return Err(Error::InvalidConfig("the train split is empty".into()));
    }
    let mut by_class = vec![Vec::new(); spec.class_names.len()];
    for (i, it) in train_items.iter().enumerate() {
        by_class[it.label].push(i);
    }
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for (i, split) in stratified(&by_class, 1.0 - options.validation_fraction, schedule.seed) {
        match split {
            Split::Train => fit.push(train_items[i].clone()),
            Split::Test => held.push(train_items[i].clone()),
        }
    }
    if fit.is_empty() {
        return Err(Error::InvalidConfig("no training images left after holding out validation".into()));
    }

    let mut model = PatchClassifier::new(config.clone())?;
    if let Some(path) = &options.pretrained {
        let n = checkpoint::load_pretrained_backbone(&mut model, path)?;
        log::info!("loaded {n} pretrained tensors from {}", path.display());
    }
    let run_dir = options.out_dir.clone();
    if let Some(dir) = &run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), model.config.to_canonical_json() + "\n")?;
        std::fs::write(
            dir.join("schedule.json"),
            serde_json::to_string_pretty(schedule).expect("schedule serializes") + "\n",
        )?;
    }

    let inputs = match &model.config.augment {
        None => Inputs::Patches(load_patches(&model, &fit)?),
        Some(_) => Inputs::Images(fit.iter().map(|it| load_gray(&it.path)).collect::<Result<_>>()?),
    };
    let val_sets = load_patches(&model, &held)?;
    let val_labels: Vec<usize> = held.iter().map(|it| it.label).collect();

    let objective = Objective::new(model.config.lambda, model.config.normal_class)?;
    let mut optimizer = Optimizer::new(schedule.adam, schedule.lookahead);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let steps_per_epoch = fit.len().div_ceil(schedule.batch_size);
    let total_steps = steps_per_epoch * schedule.total_epochs;
    let classes = spec.class_names.len();
    let m = model.patches_per_image();

    let mut history = Vec::new();
    let mut best: Option<((f64, f64), usize, PatchClassifier)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=schedule.total_epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = lr_at(step, total_steps, schedule);
        let (mut lc, mut ls, mut lt) = (0.0, 0.0, 0.0);
        for batch in order.chunks(schedule.batch_size) {
            let augmented: Vec<PatchSet>;
            let sets: Vec<&PatchSet> = match (&inputs, &model.config.augment) {
                (Inputs::Patches(p), _) => batch.iter().map(|&i| &p[i]).collect(),
                (Inputs::Images(imgs), Some(aug)) => {
                    augmented = batch
                        .iter()
                        .map(|&i| {
                            let seed = schedule.seed ^ ((epoch as u64) << 40) ^ i as u64;
                            model.extract(&augment(&imgs[i], aug, seed))
                        })
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
                (Inputs::Images(_), None) => unreachable!("images are cached only when augmenting"),
            };
            let x = model.stack(&sets)?;
            let labels = Array2::from_shape_fn((batch.len(), classes), |(b, c)| (fit[batch[b]].label == c) as u8 as f64);
            let out = model.forward_batch(&x, Mode::Train)?;
            let obj = objective.evaluate(out.probs.view(), labels.view(), out.confidences.view(), m)?;
            if !obj.loss.is_finite() {
                let last_good = run_dir
                    .as_ref()
                    .map(|d| d.join("last.safetensors"))
                    .filter(|p| p.is_file());
                if let Some(dir) = &run_dir {
                    write_logs(dir, &history)?;
                }
                return Err(Error::Divergence { epoch, step, last_good });
            }
            model.zero_grad();
            model.backward_batch(&obj.grad_probs, obj.grad_confidences.view());
            optimizer.step(&mut model, lr_at(step, total_steps, schedule));
            step += 1;
            lc += obj.loss.classification;
            ls += obj.loss.sparsity;
            lt += obj.loss.total;
        }
        let nb = steps_per_epoch as f64;
        let mut loss = LossBreakdown::new(lc / nb, ls / nb, model.config.lambda);
        loss.total = lt / nb;

        let (val_auc, val_macro_f1) = if val_sets.is_empty() {
            (None, None)
        } else {
            let p = predict_sets(&mut model, &val_sets)?;
            let r = p.report(&model.config, &val_labels)?;
            (r.auc(), r.macro_f1().or(r.detection.as_ref().map(|d| d.f1)))
        };
        let record = EpochRecord {
            epoch,
            lr: epoch_lr,
            loss,
            val_auc,
            val_macro_f1,
        };
        log::info!(
            "epoch {epoch}: lr {:.3e} L_c {:.4} L_s {:.2} total {:.4} val auc {:?} f1 {:?}",
            epoch_lr,
            loss.classification,
            loss.sparsity,
            loss.total,
            val_auc,
            val_macro_f1
        );
        history.push(record);
        if let Some(dir) = &run_dir {
            checkpoint::save(&model, &dir.join("last.safetensors"))?;
            write_logs(dir, &history)?;
        }
        if !val_sets.is_empty() {
            let key = (val_auc.unwrap_or(f64::NEG_INFINITY), val_macro_f1.unwrap_or(f64::NEG_INFINITY));
            if best.as_ref().is_none_or(|(k, _, _)| key >= *k) {
                if let Some(dir) = &run_dir {
                    checkpoint::save(&model, &dir.join("best.safetensors"))?;
                }
                best = Some((key, epoch, model.clone()));
            }
        }
    }

    let (best_epoch, mut model) = match best {
        Some((_, e, m)) => (e, m),
        None => {
            if let Some(dir) = &run_dir {
                checkpoint::save(&model, &dir.join("best.safetensors"))?;
            }
            (schedule.total_epochs, model)
        }
    };
    let test_report = if options.evaluate_test && manifest.split(Split::Test).next().is_some() {
        let r = evaluate(&mut model, manifest, Split::Test)?;
        if let Some(dir) = &run_dir {
            r.write_to(dir)?;
        }
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        test_report,
    })
}

/// Per-image outputs of a model over a list of images.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    /// Mean absolute confidence entry per image.
    pub mean_abs_confidence: Vec<f64>,
}

impl Predictions {
    /// Distressed score per image: probability mass off the normal class.
    pub fn scores(&self, normal_class: Option<usize>) -> Option<Vec<f64>> {
        let n = normal_class?;
        Some(
            self.probs
                .iter()
                .map(|p| {
                    let s: f64 = p.iter().enumerate().filter(|&(k, _)| k != n).map(|(_, v)| v).sum();
                    s.clamp(0.0, 1.0)
                })
                .collect(),
        )
    }

    pub fn report(&self, config: &PipelineConfig, labels: &[usize]) -> Result<EvaluationReport> {
        let scores = self.scores(config.normal_class);
        report(ReportInput {
            setting: config.setting,
            class_names: &config.class_names,
            normal_class: config.normal_class,
            predictions: &self.predictions,
            scores: scores.as_deref(),
            labels,
        })
    }
}

const EVAL_BATCH: usize = 8;

fn predict_sets(model: &mut PatchClassifier, sets: &[PatchSet]) -> Result<Predictions> {
    let mut out = Predictions::default();
    let m = model.patches_per_image();
    for chunk in sets.chunks(EVAL_BATCH) {
        let refs: Vec<&PatchSet> = chunk.iter().collect();
        let x = model.stack(&refs)?;
        let o = model.forward_batch(&x, Mode::Eval)?;
        for (b, row) in o.probs.rows().into_iter().enumerate() {
            let p = row.to_vec();
            out.predictions.push(argmax(&p));
            out.probs.push(p);
            let s = o.confidence_matrix(b, m);
            out.mean_abs_confidence.push(s.l1() / (s.patches() * s.classes()) as f64);
        }
    }
    Ok(out)
}

/// Runs `model` over image files, loading them in small batches.
pub fn predict_paths(model: &mut PatchClassifier, paths: &[PathBuf]) -> Result<Predictions> {
    let mut out = Predictions::default();
    for chunk in paths.chunks(EVAL_BATCH) {
        let sets = chunk
            .iter()
            .map(|p| model.extract(&load_gray(p)?))
            .collect::<Result<Vec<_>>>()?;
        let p = predict_sets(model, &sets)?;
        out.predictions.extend(p.predictions);
        out.probs.extend(p.probs);
        out.mean_abs_confidence.extend(p.mean_abs_confidence);
    }
    Ok(out)
}

/// Outputs and setting labels for one split.
pub fn predict_split(
    model: &mut PatchClassifier,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<(Predictions, Vec<usize>)> {
    let spec = SettingSpec::from_manifest(model.config.setting, manifest)?;
    spec.check_model(&model.config)?;
    let items = labeled_paths(manifest, &spec, Some(split));
    let paths: Vec<PathBuf> = items.iter().map(|it| it.path.clone()).collect();
    let labels = items.iter().map(|it| it.label).collect();
    Ok((predict_paths(model, &paths)?, labels))
}

pub fn evaluate(model: &mut PatchClassifier, manifest: &CorpusManifest, split: Split) -> Result<EvaluationReport> {
    let (p, labels) = predict_split(model, manifest, split)?;
    p.report(&model.config, &labels)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub report: EvaluationReport,
    /// Images the detector passed on to the recognizer.
    pub recognizer_calls: usize,
}

/// Detector-then-recognizer evaluation over every image of `split`. Images
/// the detector calls normal keep that label; the rest take the
/// recognizer's label.
pub fn evaluate_two_stage(
    detector: &mut PatchClassifier,
    recognizer: &mut PatchClassifier,
    manifest: &CorpusManifest,
    split: Split,
) -> Result<TwoStageOutcome> {
    if detector.config.setting != Setting::IDet {
        return Err(Error::Checkpoint(format!(
            "first stage must be an i-det model, got {}",
            detector.config.setting
        )));
    }
    if recognizer.config.setting != Setting::IIRecI {
        return Err(Error::Checkpoint(format!(
            "second stage must be a ii-rec-i model, got {}",
            recognizer.config.setting
        )));
    }
    let mut names = vec![NORMAL.to_string()];
    names.extend(recognizer.config.class_names.iter().cloned());
    if manifest.classes != names {
        return Err(Error::Checkpoint(format!(
            "manifest classes {:?} do not match the chained label space {names:?}",
            manifest.classes
        )));
    }
    let entries: Vec<_> = manifest.split(split).collect();
    let labels: Vec<usize> = entries
        .iter()
        .map(|e| manifest.class_index(&e.class).expect("validated class"))
        .collect();
    let paths: Vec<PathBuf> = entries.iter().map(|e| manifest.resolve(e)).collect();
    let det = predict_paths(detector, &paths)?;
    let passed: Vec<usize> = (0..paths.len()).filter(|&i| det.predictions[i] != 0).collect();
    let rec_paths: Vec<PathBuf> = passed.iter().map(|&i| paths[i].clone()).collect();
    let rec = predict_paths(recognizer, &rec_paths)?;
    let mut final_labels = vec![0usize; paths.len()];
    for (&i, &r) in passed.iter().zip(&rec.predictions) {
        final_labels[i] = r + 1;
    }
    let report = report(ReportInput {
        setting: Setting::IIRecN,
        class_names: &names,
        normal_class: Some(0),
        predictions: &final_labels,
        scores: None,
        labels: &labels,
    })?;
    Ok(TwoStageOutcome {
        report,
        recognizer_calls: passed.len(),
    })
}
