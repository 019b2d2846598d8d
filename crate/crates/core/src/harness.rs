//! Training, cross-validation, ensemble evaluation and heatmap export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::{s, Array3, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tensor};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::data_model::{assign_sampling_group, load_manifest, patient_level_folds, ClassLabel, Manifest, SamplingGroup};
use crate::error::{Error, Result};
use crate::explain::explainer_registry;
use crate::metrics::{auc, confusion_metrics, paired_t_test, EvaluationReport, MetricReport, ScanPrediction, DEFAULT_THRESHOLD};
use crate::net::{build_graph, init_model, soft_mask, ModelState, Mode, NetworkConfig};
use crate::objectives::{classification_loss, record_batch_loss, DEFAULT_LAMBDA};
use crate::optim::{step_lr, Adam, AdamConfig};
use crate::samplers::{group_frequencies, sampler_registry};
use crate::synth::derive_seed;
use crate::volume::{write_nifti, Volume};
use crate::volume_prep::{preprocess_cached, PrepParams, CANONICAL_SHAPE, TARGET_SPACING};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CV_REPORT: &str = "cv_report.json";
const EVAL_BATCH: usize = 4;

/// Largest f32 below one; exported attention maps stay inside (0, 1).
const F32_BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    /// Validation set for `train`; the training set itself when absent.
    pub validation_manifest: Option<PathBuf>,
    pub network: NetworkConfig,
    /// Network input grid `[D, H, W]`.
    pub input_shape: [usize; 3],
    pub lr: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub sampling_strategy: String,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::new(),
            validation_manifest: None,
            network: NetworkConfig::default(),
            input_shape: CANONICAL_SHAPE,
            lr: 2e-4,
            lr_step_epochs: 5,
            lr_gamma: 0.1,
            optimizer: AdamConfig::default(),
            batch_size: 20,
            epochs: 20,
            lambda: DEFAULT_LAMBDA,
            sampling_strategy: "US".into(),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            cache_dir: None,
        }
    }
}

impl TrainConfig {
    /// Reads a JSON config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.checkpoint_dir);
        if let Some(p) = cfg.validation_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.cache_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let positive = [self.lr, self.lr_gamma, self.optimizer.eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.lr_gamma > 1.0 {
            return Err(Error::invalid("lr, lr_gamma and eps must be positive, lr_gamma at most 1"));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::invalid("optimizer betas must be in [0, 1)"));
        }
        if self.optimizer.weight_decay < 0.0 || !(self.lambda >= 0.0) {
            return Err(Error::invalid("weight decay and lambda must be nonnegative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_step_epochs == 0 {
            return Err(Error::invalid("batch_size, epochs and lr_step_epochs must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("input_shape dims must be positive"));
        }
        sampler_registry().create(&self.sampling_strategy)?;
        Ok(())
    }

    pub fn prep_params(&self) -> PrepParams {
        PrepParams {
            target_spacing: TARGET_SPACING,
            target_shape: self.input_shape,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.lr, self.lr_gamma, self.lr_step_epochs, epoch)
    }
}

/// One preprocessed scan held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scan_id: String,
    pub label: ClassLabel,
    pub ratio: f64,
    pub spacing: [f64; 3],
    pub image: Array3<f32>,
    pub infection: Array3<f32>,
}

impl Sample {
    pub fn sampling_group(&self) -> SamplingGroup {
        assign_sampling_group(self.label, self.ratio)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Arc<Sample>>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, params: &PrepParams, cache_dir: Option<&Path>) -> Result<Self> {
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                let p = preprocess_cached(manifest, r, params, cache_dir)?;
                Ok(Arc::new(Sample {
                    scan_id: p.scan_id,
                    label: p.label,
                    ratio: p.ratio,
                    spacing: p.image.spacing,
                    image: p.image.data,
                    infection: p.infection_mask.data,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    /// The samples whose scan ids appear in `manifest`, in manifest order.
    pub fn select(&self, manifest: &Manifest) -> Result<Dataset> {
        let by_id: BTreeMap<&str, &Arc<Sample>> = self.samples.iter().map(|s| (s.scan_id.as_str(), s)).collect();
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(r.scan_id.as_str())
                    .map(|s| Arc::clone(s))
                    .ok_or_else(|| Error::invalid(format!("scan `{}` not loaded", r.scan_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.ratio).collect()
    }

    pub fn groups(&self) -> Vec<SamplingGroup> {
        self.samples.iter().map(|s| s.sampling_group()).collect()
    }

    fn batch_input(&self, idx: &[usize]) -> Result<Tensor> {
        let first = self.samples[idx[0]].image.dim();
        let mut data = Vec::with_capacity(idx.len() * first.0 * first.1 * first.2);
        for &i in idx {
            let img = &self.samples[i].image;
            if img.dim() != first {
                return Err(Error::ShapeMismatch(format!("sample grids {:?} vs {:?}", img.dim(), first)));
            }
            data.extend(img.iter().map(|v| *v as f64));
        }
        Ok(Tensor::from_shape_vec(IxDyn(&[idx.len(), 1, first.0, first.1, first.2]), data).expect("batch"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_l_c: f64,
    pub mean_l_ex: Option<f64>,
    pub val_auc: Option<f64>,
    /// Mean validation BCE.
    pub val_loss: f64,
    /// Mean Dice of `T(A) > 0.5` against the infection masks of the COVID validation scans.
    pub val_attention_dice: Option<f64>,
    pub group_frequencies: BTreeMap<String, f64>,
    pub validation: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sampling_strategy: String,
    pub epochs: Vec<EpochLog>,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

/// Sigmoid probabilities of the positive class, evaluated in inference mode.
pub fn predict(state: &ModelState, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    Ok(score(state, data, batch_size, false)?.0.into_iter().map(sigmoid).collect())
}

pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mean Dice between `T(A) > 0.5` and the infection mask over the COVID samples.
pub fn attention_dice(state: &ModelState, data: &Dataset, batch_size: usize) -> Result<Option<f64>> {
    Ok(score(state, data, batch_size, true)?.1)
}

/// One inference pass: logits for every sample and, when `with_dice`, the
/// mean attention Dice over the COVID samples.
fn score(state: &ModelState, data: &Dataset, batch_size: usize, with_dice: bool) -> Result<(Vec<f64>, Option<f64>)> {
    let mut logits = Vec::with_capacity(data.len());
    let (mut dice_sum, mut n_covid) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let g = build_graph(state, data.batch_input(chunk)?, Mode::Eval)?;
        logits.extend(g.tape.value(g.logits).iter().copied());
        if !with_dice {
            continue;
        }
        let a = g.tape.value(g.raw_attention);
        for (row, &i) in chunk.iter().enumerate() {
            let s = &data.samples[i];
            if !s.label.is_positive() {
                continue;
            }
            let (d, h, w) = s.image.dim();
            let ai = a.index_axis(Axis(0), row).into_dimensionality::<ndarray::Ix3>().expect("3D");
            let t = soft_mask(ai, [d, h, w], state.config.alpha, state.config.beta);
            let pred: Vec<bool> = t.values.iter().map(|v| *v > 0.5).collect();
            let truth: Vec<bool> = s.infection.iter().map(|v| *v > 0.5).collect();
            dice_sum += dice(&pred, &truth);
            n_covid += 1;
        }
    }
    Ok((logits, (n_covid > 0).then(|| dice_sum / n_covid as f64)))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Checkpoint selection: higher validation AUC wins; equal AUC is broken by
/// lower validation BCE, then by the earlier epoch.
fn improves(auc: Option<f64>, loss: f64, best: Option<(Option<f64>, f64)>) -> bool {
    let Some((best_auc, best_loss)) = best else {
        return true;
    };
    match (auc, best_auc) {
        (Some(a), Some(b)) => a > b || (a == b && loss < best_loss),
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => loss < best_loss,
    }
}

/// Trains one model on `train`, validating on `val` after every epoch, and
/// keeps the best checkpoint by [`improves`].
pub fn train_run(cfg: &TrainConfig, train: &Dataset, val: &Dataset, run_dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let sampler = sampler_registry().create(&cfg.sampling_strategy)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(EPOCH_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let best_path = run_dir.join(BEST_CHECKPOINT);

    let mut state = init_model(&cfg.network, cfg.seed)?;
    let mut opt = Adam::new(cfg.optimizer, state.params());
    let groups = train.groups();
    let val_labels = val.labels();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Option<f64>, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = sampler.epoch(&groups, derive_seed(cfg.seed, epoch as u64))?;
        let freqs = group_frequencies(&order, &groups);
        let (mut sum_c, mut sum_ex, mut n_ex, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = build_graph(&state, train.batch_input(batch)?, Mode::Train)?;
            let labels: Vec<ClassLabel> = batch.iter().map(|&i| train.samples[i].label).collect();
            let has_covid = labels.iter().any(|l| l.is_positive());
            let attention = (cfg.lambda > 0.0 && has_covid).then(|| g.attention_map(cfg.input_shape));
            let masks: Vec<Tensor> = batch
                .iter()
                .map(|&i| train.samples[i].infection.mapv(|v| v as f64).into_dyn())
                .collect();
            let mask_refs: Vec<&Tensor> = masks.iter().collect();
            let loss = record_batch_loss(&mut g.tape, g.logits, attention, &labels, &mask_refs, cfg.lambda)?;
            let (mc, mex) = loss.means(&g.tape);
            sum_c += mc * batch.len() as f64;
            if let Some(e) = mex {
                sum_ex += e * loss.covid_rows.len() as f64;
                n_ex += loss.covid_rows.len();
            }
            let grads = g.tape.backward(loss.total, &[]);
            let param_grads: Vec<Option<&Tensor>> = g.param_vars.iter().map(|v| grads.get(*v)).collect();
            opt.step(state.params_mut(), &param_grads, lr)?;
            state.update_running_stats(&g.bn_updates);
            steps += 1;
        }

        let (logits, val_dice) = score(&state, val, cfg.batch_size, true)?;
        let probs: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
        let val_loss = logits.iter().zip(&val_labels).map(|(z, l)| classification_loss(*z, *l)).sum::<f64>() / val.len() as f64;
        let validation = confusion_metrics(&probs, &val_labels, DEFAULT_THRESHOLD)?;
        let val_auc = auc(&probs, &val_labels).ok();
        if improves(val_auc, val_loss, best.map(|(_, a, l)| (a, l))) {
            best = Some((epoch, val_auc, val_loss));
            let meta = CheckpointMeta {
                network: cfg.network.clone(),
                epoch,
                val_auc,
                seed: cfg.seed,
                sampling_strategy: cfg.sampling_strategy.clone(),
                lambda: cfg.lambda,
                input_shape: cfg.input_shape,
            };
            save_checkpoint(&best_path, &state, &meta)?;
        }
        let entry = EpochLog {
            epoch,
            lr,
            steps,
            mean_l_c: sum_c / order.len() as f64,
            mean_l_ex: (n_ex > 0).then(|| sum_ex / n_ex as f64),
            val_auc,
            val_loss,
            val_attention_dice: val_dice,
            group_frequencies: SamplingGroup::ALL.iter().map(|g| (g.name().to_string(), freqs[g.index()])).collect(),
            validation,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.1e} l_c {:.4} l_ex {:?} val_auc {:?}",
            cfg.sampling_strategy,
            entry.mean_l_c,
            entry.mean_l_ex,
            val_auc
        );
        write_jsonl(&mut log, &log_path, &entry)?;
        epochs.push(entry);
    }
    let (best_epoch, best_val_auc, _) = best.expect("at least one epoch");
    Ok(RunResult {
        sampling_strategy: cfg.sampling_strategy.clone(),
        epochs,
        best_checkpoint: best_path,
        best_epoch,
        best_val_auc,
    })
}

/// Loads the manifests named in `cfg` and trains one model into `cfg.checkpoint_dir`.
pub fn train(cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let params = cfg.prep_params();
    let cache = cfg.cache_dir.as_deref();
    let train_set = Dataset::load(&manifest, &params, cache)?;
    let val_set = match &cfg.validation_manifest {
        Some(p) => Dataset::load(&load_manifest(p)?, &params, cache)?,
        None => train_set.clone(),
    };
    train_run(cfg, &train_set, &val_set, &cfg.checkpoint_dir)
}

fn predictions_for(us: &ModelState, ss: &ModelState, data: &Dataset, batch: usize) -> Result<Vec<ScanPrediction>> {
    let p_us = predict(us, data, batch)?;
    let p_ss = predict(ss, data, batch)?;
    data.samples
        .iter()
        .zip(p_us.iter().zip(&p_ss))
        .map(|(s, (a, b))| ScanPrediction::new(s.scan_id.clone(), *a, *b, s.label, s.ratio))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_scans: Vec<String>,
    pub val_scans: Vec<String>,
    pub us: RunResult,
    pub ss: RunResult,
    pub report: EvaluationReport,
    pub attention_dice_us: Option<f64>,
    pub attention_dice_ss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    /// Per-fold validation AUC, US vs SS.
    pub auc_us_vs_ss: Option<f64>,
    /// Per-fold validation AUC, DS vs US.
    pub auc_ds_vs_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Validation predictions of all folds pooled.
    pub combined: EvaluationReport,
    pub paired_t_tests: PairedTests,
}

/// The fold splits `cross_validate` uses for `cfg.seed`.
pub fn fold_splits(cfg: &TrainConfig, manifest: &Manifest, k: usize) -> Result<Vec<(Manifest, Manifest)>> {
    patient_level_folds(manifest, k, cfg.seed)
}

/// Per-fold seed derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    derive_seed(master, 1_000 + fold as u64)
}

/// Patient-level k-fold cross-validation over a preloaded dataset: one US and
/// one SS model per fold, fused on each fold's validation scans.
pub fn cross_validate_dataset(cfg: &TrainConfig, manifest: &Manifest, data: &Dataset, k: usize) -> Result<CrossValidation> {
    cfg.validate()?;
    let mut folds = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(data.len());
    for (fold, (train_m, val_m)) in fold_splits(cfg, manifest, k)?.into_iter().enumerate() {
        let train_set = data.select(&train_m)?;
        let val_set = data.select(&val_m)?;
        let seed = fold_seed(cfg.seed, fold);
        let fold_dir = cfg.checkpoint_dir.join(format!("fold{fold}"));
        let mut runs = Vec::with_capacity(2);
        for strategy in ["US", "SS"] {
            let run_cfg = TrainConfig {
                sampling_strategy: strategy.into(),
                seed,
                ..cfg.clone()
            };
            log::info!("fold {fold}: training {strategy} on {} scans", train_set.len());
            runs.push(train_run(&run_cfg, &train_set, &val_set, &fold_dir.join(strategy))?);
        }
        let ss = runs.pop().expect("SS run");
        let us = runs.pop().expect("US run");
        let (us_state, _) = load_checkpoint(&us.best_checkpoint)?;
        let (ss_state, _) = load_checkpoint(&ss.best_checkpoint)?;
        let preds = predictions_for(&us_state, &ss_state, &val_set, cfg.batch_size)?;
        pooled.extend(preds.iter().cloned());
        folds.push(FoldResult {
            fold,
            seed,
            train_scans: train_m.records.iter().map(|r| r.scan_id.clone()).collect(),
            val_scans: val_m.records.iter().map(|r| r.scan_id.clone()).collect(),
            attention_dice_us: attention_dice(&us_state, &val_set, cfg.batch_size)?,
            attention_dice_ss: attention_dice(&ss_state, &val_set, cfg.batch_size)?,
            report: EvaluationReport::from_predictions(preds)?,
            us,
            ss,
        });
    }
    let per_fold = |f: fn(&EvaluationReport) -> Option<f64>| folds.iter().map(|x| f(&x.report)).collect::<Option<Vec<f64>>>();
    let us_auc = per_fold(|r| r.us.overall.auc);
    let ss_auc = per_fold(|r| r.ss.overall.auc);
    let ds_auc = per_fold(|r| r.ds.overall.auc);
    let test = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| match (a, b) {
        (Some(a), Some(b)) if a.len() >= 2 => paired_t_test(a, b).ok(),
        _ => None,
    };
    let cv = CrossValidation {
        paired_t_tests: PairedTests {
            auc_us_vs_ss: test(&us_auc, &ss_auc),
            auc_ds_vs_us: test(&ds_auc, &us_auc),
        },
        combined: EvaluationReport::from_predictions(pooled)?,
        folds,
    };
    let report_path = cfg.checkpoint_dir.join(CV_REPORT);
    std::fs::write(&report_path, serde_json::to_vec_pretty(&cv)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(cv)
}

pub fn cross_validate(cfg: &TrainConfig, k: usize) -> Result<CrossValidation> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest)?;
    let data = Dataset::load(&manifest, &cfg.prep_params(), cfg.cache_dir.as_deref())?;
    cross_validate_dataset(cfg, &manifest, &data, k)
}

/// Fuses a US and an SS checkpoint on every scan of `manifest_path`.
pub fn evaluate(us_checkpoint: &Path, ss_checkpoint: &Path, manifest_path: &Path, cache_dir: Option<&Path>) -> Result<EvaluationReport> {
    let (us, us_meta) = load_checkpoint(us_checkpoint)?;
    let (ss, ss_meta) = load_checkpoint(ss_checkpoint)?;
    if us_meta.input_shape != ss_meta.input_shape {
        return Err(Error::Checkpoint(format!(
            "US model expects input {:?}, SS model {:?}",
            us_meta.input_shape, ss_meta.input_shape
        )));
    }
    let manifest = load_manifest(manifest_path)?;
    let params = PrepParams {
        target_spacing: TARGET_SPACING,
        target_shape: us_meta.input_shape,
    };
    let data = Dataset::load(&manifest, &params, cache_dir)?;
    EvaluationReport::from_predictions(predictions_for(&us, &ss, &data, EVAL_BATCH)?)
}

fn overlay(image: ArrayView2<'_, f32>, heat: ArrayView2<'_, f64>) -> RgbImage {
    let (h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        // Flip rows so the first array row is at the bottom of the picture.
        let (r, c) = (h - 1 - y as usize, x as usize);
        let g = (image[[r, c]].clamp(0.0, 1.0) * 255.0) as f64;
        let a = 0.6 * heat[[r, c]].clamp(0.0, 1.0);
        Rgb([((1.0 - a) * g + a * 255.0) as u8, ((1.0 - a) * g) as u8, ((1.0 - a) * g) as u8])
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(Error::from)
}

/// Writes, per scan and explainer, the heatmap as NIfTI plus axial and
/// coronal mid-slice overlays. The attention map is always written; Grad-CAM
/// only when `with_grad_cam` is set. Returns the written paths.
pub fn export_attention(
    checkpoint: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    with_grad_cam: bool,
    cache_dir: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let (state, meta) = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    let params = PrepParams {
        target_spacing: TARGET_SPACING,
        target_shape: meta.input_shape,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let registry = explainer_registry();
    let mut names = vec!["attention"];
    if with_grad_cam {
        names.push("grad-cam");
    }
    let mut written = Vec::new();
    for record in &manifest.records {
        let p = preprocess_cached(&manifest, record, &params, cache_dir)?;
        let image = p.image.data.mapv(|v| v as f64);
        for name in &names {
            let heat = registry.create(name)?.explain(&state, image.view())?;
            let stem = format!("{}_{}", record.scan_id, name.replace('-', ""));
            let data = heat.mapv(|v| {
                let v = v as f32;
                if *name == "attention" {
                    v.min(F32_BELOW_ONE)
                } else {
                    v
                }
            });
            let nii = out_dir.join(format!("{stem}.nii"));
            write_nifti(&nii, &Volume::new(data, p.image.spacing)?)?;
            written.push(nii);
            let (d, h, _) = heat.dim();
            let axial = out_dir.join(format!("{stem}_axial.png"));
            save_png(&overlay(p.image.data.slice(s![d / 2, .., ..]), heat.slice(s![d / 2, .., ..])), &axial)?;
            written.push(axial);
            let coronal = out_dir.join(format!("{stem}_coronal.png"));
            save_png(&overlay(p.image.data.slice(s![.., h / 2, ..]), heat.slice(s![.., h / 2, ..])), &coronal)?;
            written.push(coronal);
        }
    }
    Ok(written)
}
