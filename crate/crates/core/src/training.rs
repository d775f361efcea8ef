//! Training, evaluation, ablations, and the inference benchmark.
//!
//! A run is pinned by (dataset, model seed, shuffle seed, hyperparameters):
//! batches are gathered in seeded Fisher-Yates order, every kernel is
//! bit-deterministic, and Adam updates parameters in a fixed order, so two
//! runs with the same inputs produce identical checkpoints on any machine
//! and thread count.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, load_split_recropped, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, save_checkpoint, DecoderModel, Head, ModelConfig, Target};
use crate::optics::{CropSpec, NamedRegion};
use crate::tensor::{Scalar, Tensor};

// ── Hyperparameters ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplier applied to the learning rate for the tail of the run.
    pub lr_decay: f64,
    /// Fraction of epochs after which the decay kicks in.
    pub lr_decay_at: f64,
    pub model_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 30,
            lr_decay: 0.1,
            lr_decay_at: 0.8,
            model_seed: 1,
            shuffle_seed: 2,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument("lr_decay must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::InvalidArgument("lr_decay_at must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hp: &Hyperparams, param_sizes: &[usize]) -> Self {
        Adam {
            lr: T::from_f64(hp.learning_rate),
            beta1: T::from_f64(hp.beta1),
            beta2: T::from_f64(hp.beta2),
            eps: T::from_f64(hp.epsilon),
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64(lr);
    }

    /// One update over all parameters; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i].data;
            let p = &mut params[i].data;
            debug_assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcomeStats {
    pub epochs: usize,
    pub epoch_mean_loss: Vec<f64>,
    pub final_train_loss: f64,
}

pub struct TrainOutcome {
    pub model: DecoderModel<f32>,
    pub stats: TrainOutcomeStats,
}

/// Model shape matching a dataset's frames and the requested head.
pub fn model_config_for(ds: &Dataset, head: Head, seed: u64) -> ModelConfig {
    ModelConfig {
        input_hw: ds.hw,
        conv_channels: [16, 32, 64],
        fc_dim: 256,
        head,
        seed,
        class_names: None,
    }
}

/// Train a fresh model on `ds`. Non-finite loss aborts with a `Numeric`
/// error rather than writing a poisoned checkpoint.
pub fn train(
    ds: &Dataset,
    head: Head,
    hp: &Hyperparams,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let labels: Option<Vec<usize>> = match head {
        Head::Classifier { classes } => {
            let l = ds.labels()?;
            if let Some(&bad) = l.iter().find(|&&x| x >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {classes} classes"
                )));
            }
            Some(l)
        }
        Head::Regressor => None,
    };
    let forces: Option<Vec<f64>> = match head {
        Head::Regressor => Some(ds.forces()?),
        _ => None,
    };
    let config = model_config_for(ds, head, hp.model_seed);
    let mut model: DecoderModel<f32> = build_model(&config)?;
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut adam: Adam<f32> = Adam::new(hp, &sizes);
    let n = ds.len();
    let decay_from = (hp.lr_decay_at * hp.epochs as f64).floor() as usize;
    let mut epoch_mean_loss = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        if epoch == decay_from && hp.lr_decay < 1.0 {
            adam.set_lr(hp.learning_rate * hp.lr_decay);
        }
        let order = epoch_order(n, hp.shuffle_seed, epoch as u64);
        let mut loss_sum = 0.0f64;
        for (step_idx, batch) in order.chunks(hp.batch_size).enumerate() {
            let x = ds.gather(batch);
            let step = match (&labels, &forces) {
                (Some(l), _) => {
                    let batch_labels: Vec<usize> = batch.iter().map(|&i| l[i]).collect();
                    model.forward_train(&x, Target::Labels(&batch_labels))?
                }
                (_, Some(f)) => {
                    let values = Tensor::from_vec(
                        &[batch.len(), 1],
                        batch.iter().map(|&i| f[i] as f32).collect(),
                    )?;
                    model.forward_train(&x, Target::Values(&values))?
                }
                _ => unreachable!(),
            };
            let loss = step.tape.scalar(step.loss) as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, step {step_idx}; \
                     lower the learning rate or inspect the dataset for degenerate frames"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let mut grads_by_id = step.tape.backward(step.loss)?;
            let grads: Vec<Tensor<f32>> = step
                .param_ids
                .iter()
                .map(|&id| {
                    grads_by_id
                        .take(id)
                        .expect("every parameter participates in the loss")
                })
                .collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grads);
        }
        let mean = loss_sum / n as f64;
        epoch_mean_loss.push(mean);
        if let Some(cb) = progress.as_deref_mut() {
            cb(epoch, mean);
        }
    }
    let final_train_loss = *epoch_mean_loss.last().expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        stats: TrainOutcomeStats {
            epochs: hp.epochs,
            epoch_mean_loss,
            final_train_loss,
        },
    })
}

// ── Evaluation ──────────────────────────────────────────────────────────

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStat {
    pub class_id: usize,
    pub name: String,
    pub support: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassStat>,
    /// confusion[truth][predicted]
    pub confusion: Vec<Vec<usize>>,
}

/// Pure metric computation from aligned truth/prediction vectors.
pub fn classification_metrics(
    truth: &[usize],
    predicted: &[usize],
    class_names: &[String],
) -> Result<ClassificationReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} truths vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let k = class_names.len();
    if let Some(&bad) = truth.iter().chain(predicted).find(|&&c| c >= k) {
        return Err(Error::InvalidArgument(format!(
            "class {bad} out of range for {k} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = (0..k)
        .map(|c| ClassStat {
            class_id: c,
            name: class_names[c].clone(),
            support: confusion[c].iter().sum(),
            correct: confusion[c][c],
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: correct as f64 / truth.len() as f64,
        per_class,
        confusion,
    })
}

pub fn evaluate_classification(
    model: &DecoderModel<f32>,
    ds: &Dataset,
    class_names: &[String],
) -> Result<ClassificationReport> {
    let truth = ds.labels()?;
    let mut predicted = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for batch in all.chunks(EVAL_BATCH) {
        let x = ds.gather(batch);
        predicted.extend(model.predict_classes(&x)?);
    }
    classification_metrics(&truth, &predicted, class_names)
}

/// Width of one absolute-error histogram bin, in newtons.
pub const ERROR_HIST_BIN_N: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mae: f64,
    pub rmse: f64,
    /// None when the truth has zero variance (R^2 undefined).
    pub r2: Option<f64>,
    pub error_hist_bin_n: f64,
    /// error_hist[i] counts |error| in [i*bin, (i+1)*bin).
    pub error_hist: Vec<usize>,
    pub samples: usize,
}

pub fn regression_metrics(truth: &[f64], predicted: &[f64]) -> Result<RegressionReport> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} truths vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let n = truth.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut hist: Vec<usize> = Vec::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        let e = p - t;
        abs_sum += e.abs();
        sq_sum += e * e;
        let bin = (e.abs() / ERROR_HIST_BIN_N).floor() as usize;
        if bin >= hist.len() {
            hist.resize(bin + 1, 0);
        }
        hist[bin] += 1;
    }
    let mean_t = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|&t| (t - mean_t) * (t - mean_t)).sum();
    let r2 = if sst > 0.0 { Some(1.0 - sq_sum / sst) } else { None };
    Ok(RegressionReport {
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        r2,
        error_hist_bin_n: ERROR_HIST_BIN_N,
        error_hist: hist,
        samples: truth.len(),
    })
}

pub fn evaluate_regression(model: &DecoderModel<f32>, ds: &Dataset) -> Result<RegressionReport> {
    let truth = ds.forces()?;
    let predicted = predict_forces(model, ds)?;
    regression_metrics(&truth, &predicted)
}

fn predict_forces(model: &DecoderModel<f32>, ds: &Dataset) -> Result<Vec<f64>> {
    let mut predicted = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for batch in all.chunks(EVAL_BATCH) {
        let x = ds.gather(batch);
        predicted.extend(model.predict_scalars(&x)?.into_iter().map(|v| v as f64));
    }
    Ok(predicted)
}

/// Per-site regression breakdown, sorted by site name.
pub fn evaluate_regression_by_site(
    model: &DecoderModel<f32>,
    ds: &Dataset,
) -> Result<Vec<(String, RegressionReport)>> {
    let truth = ds.forces()?;
    let predicted = predict_forces(model, ds)?;
    let mut sites: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, r) in ds.records.iter().enumerate() {
        let site = r.site.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("sample {i} has no site annotation"))
        })?;
        sites.entry(site).or_default().push(i);
    }
    sites
        .into_iter()
        .map(|(name, idx)| {
            let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            let p: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
            Ok((name, regression_metrics(&t, &p)?))
        })
        .collect()
}

// ── Ablations ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropAblationRow {
    pub region: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropAblationReport {
    pub rows: Vec<CropAblationRow>,
    pub rerun_region: String,
    /// Whether retraining the rerun region reproduced the accuracy bit for
    /// bit and the final parameters byte for byte.
    pub rerun_identical: bool,
    pub spread: f64,
}

/// Retrain on each crop region of the kept raw frames. Every run reuses
/// the same seeds; only the crop differs. One region is trained twice to
/// demonstrate run-to-run determinism.
pub fn ablation_crop_regions(
    dir: &Path,
    manifest: &DatasetManifest,
    class_names: &[String],
    hp: &Hyperparams,
    mut progress: Option<&mut dyn FnMut(&str, usize, f64)>,
) -> Result<CropAblationReport> {
    let mut rows = Vec::new();
    let mut first_outcome: Option<(f64, Vec<u8>)> = None;
    let rerun_region = NamedRegion::A;
    let run = |region: NamedRegion,
                   progress: &mut Option<&mut dyn FnMut(&str, usize, f64)>|
     -> Result<(f64, Vec<u8>, usize)> {
        let crop = CropSpec::Named(region);
        let train_ds = load_split_recropped(dir, manifest, Split::Train, crop)?;
        let test_ds = load_split_recropped(dir, manifest, Split::Test, crop)?;
        let head = Head::Classifier {
            classes: class_names.len(),
        };
        let mut adapter;
        let cb: Option<&mut dyn FnMut(usize, f64)> = match progress.as_deref_mut() {
            Some(p) => {
                let name = region.as_str();
                adapter = move |epoch: usize, loss: f64| p(name, epoch, loss);
                Some(&mut adapter)
            }
            None => None,
        };
        let outcome = train(&train_ds, head, hp, cb)?;
        let report = evaluate_classification(&outcome.model, &test_ds, class_names)?;
        let mut param_bytes = Vec::new();
        for t in outcome.model.params() {
            for v in &t.data {
                param_bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok((report.accuracy, param_bytes, test_ds.len()))
    };
    for region in NamedRegion::ALL {
        let (acc, params, samples) = run(region, &mut progress)?;
        if region == rerun_region {
            first_outcome = Some((acc, params.clone()));
        }
        rows.push(CropAblationRow {
            region: region.as_str().to_string(),
            accuracy: acc,
            samples,
        });
    }
    let (acc2, params2, _) = run(rerun_region, &mut progress)?;
    let (acc1, params1) = first_outcome.expect("rerun region is in ALL");
    let rerun_identical = acc1.to_bits() == acc2.to_bits() && params1 == params2;
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max)
        - accs.iter().cloned().fold(f64::MAX, f64::min);
    Ok(CropAblationReport {
        rows,
        rerun_region: rerun_region.as_str().to_string(),
        rerun_identical,
        spread,
    })
}

pub fn crop_ablation_csv(report: &CropAblationReport) -> String {
    let mut out = String::from("region,accuracy,samples\n");
    for row in &report.rows {
        out.push_str(&format!("{},{:.6},{}\n", row.region, row.accuracy, row.samples));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSizeRow {
    pub per_class: usize,
    pub train_samples: usize,
    pub accuracy: f64,
}

/// First `per_class` training samples of each class, in record order.
/// Smaller subsets are strict prefixes of larger ones.
pub fn nested_subset_indices(labels: &[usize], per_class: usize) -> Vec<usize> {
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut out = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        let c = counts.entry(l).or_insert(0);
        if *c < per_class {
            *c += 1;
            out.push(i);
        }
    }
    out
}

/// Train at several per-class training-set sizes (nested subsets) and
/// evaluate each model on the same full test split.
pub fn ablation_train_size(
    train_ds: &Dataset,
    test_ds: &Dataset,
    class_names: &[String],
    per_class_sizes: &[usize],
    hp: &Hyperparams,
    mut progress: Option<&mut dyn FnMut(usize, usize, f64)>,
) -> Result<Vec<TrainSizeRow>> {
    let labels = train_ds.labels()?;
    let head = Head::Classifier {
        classes: class_names.len(),
    };
    let mut rows = Vec::new();
    for &size in per_class_sizes {
        let indices = nested_subset_indices(&labels, size);
        if indices.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "subset of {size} per class selects no samples"
            )));
        }
        let subset = train_ds.subset(&indices);
        let mut adapter;
        let cb: Option<&mut dyn FnMut(usize, f64)> = match progress.as_deref_mut() {
            Some(p) => {
                adapter = move |epoch: usize, loss: f64| p(size, epoch, loss);
                Some(&mut adapter)
            }
            None => None,
        };
        let outcome = train(&subset, head, hp, cb)?;
        let report = evaluate_classification(&outcome.model, test_ds, class_names)?;
        rows.push(TrainSizeRow {
            per_class: size,
            train_samples: indices.len(),
            accuracy: report.accuracy,
        });
    }
    Ok(rows)
}

pub fn train_size_csv(rows: &[TrainSizeRow]) -> String {
    let mut out = String::from("per_class,train_samples,accuracy\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{:.6}\n",
            row.per_class, row.train_samples, row.accuracy
        ));
    }
    out
}

// ── Inference benchmark ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Time single-image forward passes. Thread control is the caller's job
/// (run inside a one-thread pool for the single-core figure).
pub fn bench_inference(
    model: &DecoderModel<f32>,
    input: &Tensor<f32>,
    warmup: usize,
    trials: usize,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    for _ in 0..warmup {
        let out = model.forward_eval(input)?;
        std::hint::black_box(&out);
    }
    let mut times_ms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        let out = model.forward_eval(input)?;
        std::hint::black_box(&out);
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times_ms.iter().sum::<f64>() / trials as f64;
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    let p50 = sorted[trials / 2];
    let p95 = sorted[((trials as f64 * 0.95).ceil() as usize - 1).min(trials - 1)];
    Ok(BenchReport {
        warmup,
        trials,
        mean_ms: mean,
        p50_ms: p50,
        p95_ms: p95,
    })
}

/// Save a checkpoint next to a metrics file; convenience for the CLI.
pub fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &path)?;
    Ok(path)
}
