//! Training loops and experiment protocols: contrastive pretraining,
//! supervised fine-tuning, linear evaluation, and the four comparison
//! protocols over fold rotations.
//!
//! Every loop is a pure function of (dataset, config, seed): shuffles,
//! crops and dropout masks all come from streams derived from the run seed,
//! so two runs with the same inputs produce bitwise-identical results.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::augment::{
    center_crop, compute_modality_stats, normalize_sample, synchronized_random_crop,
    ModalityStats, RawSample, View,
};
use crate::contrastive::nt_xent_graph;
use crate::data::{make_splits, stratified_folds, LoadedDataset, SplitProtocol, Splits};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, confusion, prf1, ConfusionMatrix, MetricsReport};
use crate::model::{
    classifier_forward, commit_bn_updates, encoder_forward, projector_forward, BoundParams,
    ModelParams, TrainableSet,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
    LinearEval,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Finetune => "finetune",
            TrainMode::LinearEval => "linear_eval",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// NT-Xent temperature; pretraining only.
    pub temperature: f64,
    /// Classifier dropout; downstream only. Must match the model config.
    pub dropout_rate: f64,
}

impl TrainConfig {
    /// Desk-scale pretraining preset: small batches and crops sized for CPU
    /// minutes.
    pub fn desk_pretrain(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            crop_size: 32,
            seed,
            temperature: crate::contrastive::DEFAULT_TEMPERATURE,
            dropout_rate: 0.3,
        }
    }

    pub fn desk_downstream(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            crop_size: 32,
            seed,
            temperature: crate::contrastive::DEFAULT_TEMPERATURE,
            dropout_rate: 0.3,
        }
    }

    /// Paper-faithful pretraining hyperparameters (224 crops, batch 256,
    /// learning rate 5e-5, temperature 0.1).
    pub fn paper_pretrain(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            learning_rate: 5e-5,
            batch_size: 256,
            epochs: 100,
            crop_size: 224,
            seed,
            temperature: 0.1,
            dropout_rate: 0.3,
        }
    }

    /// Paper-faithful downstream hyperparameters (224 crops, batch 16,
    /// learning rate 1e-5, dropout 0.3).
    pub fn paper_downstream(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 50,
            crop_size: 224,
            seed,
            temperature: 0.1,
            dropout_rate: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        match self.mode {
            TrainMode::Pretrain => {
                if self.batch_size < 2 {
                    return Err(Error::Config(
                        "pretraining needs batch_size >= 2: a single pair has no negatives".into(),
                    ));
                }
                if !(self.temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "temperature {} must be positive",
                        self.temperature
                    )));
                }
            }
            TrainMode::Finetune | TrainMode::LinearEval => {
                if self.batch_size == 0 {
                    return Err(Error::Config("batch_size must be positive".into()));
                }
                if !(0.0..1.0).contains(&self.dropout_rate) {
                    return Err(Error::Config(format!(
                        "dropout_rate {} outside [0, 1)",
                        self.dropout_rate
                    )));
                }
            }
        }
        Ok(())
    }

    /// Resolved-config echo carried into run records and checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "mode = {}\nlearning_rate = {:?}\nbatch_size = {}\nepochs = {}\ncrop_size = {}\nseed = {}\ntemperature = {:?}\ndropout_rate = {:?}\n",
            self.mode,
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.crop_size,
            self.seed,
            self.temperature,
            self.dropout_rate
        )
    }
}

// ── run records ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub mode: TrainMode,
    pub seed: u64,
    pub config_text: String,
    pub epoch_loss: Vec<f64>,
    /// Validation macro F1 per epoch; empty for pretraining.
    pub epoch_val_metric: Vec<f64>,
    pub best_epoch: Option<usize>,
    /// Test metrics of the selected model; downstream runs only.
    pub final_metrics: Option<MetricsReport>,
    pub events: Vec<String>,
    /// Offending batch id when a non-finite step aborted the run.
    pub aborted: Option<String>,
}

impl RunRecord {
    fn new(cfg: &TrainConfig, extra_config: &str) -> Self {
        RunRecord {
            mode: cfg.mode,
            seed: cfg.seed,
            config_text: format!("{}{}", cfg.to_text(), extra_config),
            epoch_loss: Vec::new(),
            epoch_val_metric: Vec::new(),
            best_epoch: None,
            final_metrics: None,
            events: Vec::new(),
            aborted: None,
        }
    }

    pub fn all_losses_finite(&self) -> bool {
        self.epoch_loss.iter().all(|l| l.is_finite())
    }

    /// One epoch per line plus a summary record.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for line in self.config_text.lines() {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str("epoch\tloss\tval_metric\n");
        for (e, loss) in self.epoch_loss.iter().enumerate() {
            let val = self
                .epoch_val_metric
                .get(e)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{e}\t{loss:.6}\t{val}\n"));
        }
        for event in &self.events {
            out.push_str(&format!("# event: {event}\n"));
        }
        let best = self
            .best_epoch
            .map(|b| b.to_string())
            .unwrap_or_else(|| "-".into());
        let final_f1 = self
            .final_metrics
            .as_ref()
            .map(|m| format!("{:.6}", m.macro_f1))
            .unwrap_or_else(|| "-".into());
        let aborted = self.aborted.clone().unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "summary\tbest_epoch={best}\ttest_macro_f1={final_f1}\taborted={aborted}\n"
        ));
        out
    }
}

// ── shared mechanics ────────────────────────────────────────────────────────

/// Derives a fresh u64 sub-seed for an independent run component.
pub fn sub_seed(base: u64, domain: &str, index: u64) -> u64 {
    stream::derive(base, domain, &[index]).gen()
}

fn stack_views<S: Scalar>(views: &[View]) -> Result<Tensor<S>> {
    let first = views.first().ok_or_else(|| Error::Config("empty view batch".into()))?;
    let mut values = Vec::with_capacity(views.len() * first.numel());
    for v in views {
        if (v.channels, v.height, v.width) != (first.channels, first.height, first.width) {
            return Err(Error::shape("stack_views", "ragged view batch".to_string()));
        }
        values.extend(v.values.iter().map(|&x| S::of(x)));
    }
    Tensor::new(
        vec![views.len(), first.channels, first.height, first.width],
        values,
    )
}

/// Stitches a synchronized single-channel crop pair into the downstream
/// depth-reflectance-depth composition.
fn composed_view(pair_dep: &View, pair_ref: &View) -> View {
    let plane = pair_dep.height * pair_dep.width;
    let mut values = Vec::with_capacity(3 * plane);
    values.extend_from_slice(&pair_dep.values[..plane]);
    values.extend_from_slice(&pair_ref.values[..plane]);
    values.extend_from_slice(&pair_dep.values[..plane]);
    View {
        channels: 3,
        height: pair_dep.height,
        width: pair_dep.width,
        values,
    }
}

struct NormalizedSet {
    samples: BTreeMap<String, RawSample>,
    stats: ModalityStats,
}

fn normalize_ids(
    dataset: &LoadedDataset,
    stats_ids: &[String],
    all_ids: &[&[String]],
) -> Result<NormalizedSet> {
    let stat_samples: Vec<&RawSample> = stats_ids
        .iter()
        .map(|id| {
            dataset
                .sample(id)
                .ok_or_else(|| Error::Config(format!("id {id} not in dataset")))
        })
        .collect::<Result<_>>()?;
    let stats = compute_modality_stats(stat_samples)?;
    let mut samples = BTreeMap::new();
    for ids in all_ids {
        for id in ids.iter() {
            if samples.contains_key(id) {
                continue;
            }
            let sample = dataset
                .sample(id)
                .ok_or_else(|| Error::Config(format!("id {id} not in dataset")))?;
            samples.insert(id.clone(), normalize_sample(sample, &stats)?);
        }
    }
    Ok(NormalizedSet { samples, stats })
}

fn grads_by_name<S: Scalar>(
    bound: &BoundParams,
    mut grads: crate::tape::GradientMap<S>,
) -> BTreeMap<String, Vec<S>> {
    let mut out = BTreeMap::new();
    for (name, id) in bound.iter() {
        if let Some(g) = grads.remove(id) {
            out.insert(name.clone(), g);
        }
    }
    out
}

fn optimizer_step<S: Scalar>(
    params: &mut ModelParams<S>,
    state: &mut AdamState<S>,
    grads: &BTreeMap<String, Vec<S>>,
    lr: f64,
) -> Result<()> {
    let mut targets: Vec<(String, &mut Tensor<S>)> = params
        .named_trainable_mut()
        .into_iter()
        .filter(|(name, _)| grads.contains_key(name))
        .collect();
    adam_step(state, &mut targets, grads, lr)
}

fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let cols = logits.dim(1);
    logits
        .values()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy over logits via log-softmax and a one-hot selector.
pub fn cross_entropy_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logits: crate::tape::TensorId,
    labels: &[usize],
    num_classes: usize,
) -> Result<crate::tape::TensorId> {
    let n = labels.len();
    let mut onehot = vec![S::zero(); n * num_classes];
    for (i, &label) in labels.iter().enumerate() {
        onehot[i * num_classes + label] = S::one();
    }
    let selector = tape.constant(Tensor::new(vec![n, num_classes], onehot)?);
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.mul(log_probs, selector)?;
    let total = tape.reduce_sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

// ── evaluation ──────────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

const EVAL_BATCH: usize = 64;

/// Centre-crop eval-mode evaluation over composed three-channel inputs.
fn evaluate_normalized<S: Scalar>(
    set: &NormalizedSet,
    ids: &[String],
    params: &ModelParams<S>,
    crop: usize,
) -> Result<EvalOutcome> {
    let num_classes = params.config.classifier.num_classes;
    let mut preds = Vec::with_capacity(ids.len());
    let mut truths = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let mut views = Vec::with_capacity(chunk.len());
        for id in chunk {
            let sample = &set.samples[id];
            let pair = center_crop(sample, (crop, crop), 1)?;
            views.push(composed_view(&pair.view_dep, &pair.view_ref));
            let label = sample
                .label
                .ok_or_else(|| Error::Config(format!("sample {id} has no label")))?;
            truths.push(label.index());
        }
        let images: Tensor<S> = stack_views(&views)?;
        let h = params.embed(&images)?;
        let logits = params.classify(&h, false, 0)?;
        preds.extend(argmax_rows(&logits));
    }
    let cm = confusion(&preds, &truths, num_classes)?;
    let report = prf1(&cm);
    Ok(EvalOutcome {
        confusion: cm,
        report,
    })
}

/// Public evaluation entry: normalizes `ids` with the supplied statistics
/// and scores the classifier on centre crops.
pub fn evaluate<S: Scalar>(
    dataset: &LoadedDataset,
    ids: &[String],
    params: &ModelParams<S>,
    stats: &ModalityStats,
    crop: usize,
) -> Result<EvalOutcome> {
    let mut samples = BTreeMap::new();
    for id in ids {
        let sample = dataset
            .sample(id)
            .ok_or_else(|| Error::Config(format!("id {id} not in dataset")))?;
        samples.insert(id.clone(), normalize_sample(sample, stats)?);
    }
    let set = NormalizedSet {
        samples,
        stats: *stats,
    };
    evaluate_normalized(&set, ids, params, crop)
}

// ── pretraining ─────────────────────────────────────────────────────────────

/// Contrastive pretraining over an unlabeled pool.
///
/// Per epoch the pool is reshuffled and batched (trailing partial batches
/// dropped to keep the 2N structure exact); each sample contributes a
/// synchronized crop pair, both views pass through encoder and projector,
/// and the NT-Xent loss is minimized with Adam.
pub fn pretrain<S: Scalar>(
    dataset: &LoadedDataset,
    pool: &[String],
    params: &mut ModelParams<S>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("pretrain called with mode {}", cfg.mode)));
    }
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Config("pretraining pool is empty".into()));
    }
    params.config.encoder.validate_for_input(cfg.crop_size)?;

    let set = normalize_ids(dataset, pool, &[pool])?;
    let mut record = RunRecord::new(cfg, &set.stats.to_text());
    record
        .events
        .push(format!("pool_size = {}", pool.len()));
    if pool.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "pool of {} cannot fill one batch of {}",
            pool.len(),
            cfg.batch_size
        )));
    }

    let channels = params.config.encoder.input_channels;
    let mut adam = AdamState::new(AdamConfig::default());
    let mut padded_crops = 0usize;
    let steps_per_epoch = pool.len() / cfg.batch_size;
    record
        .events
        .push(format!("steps_per_epoch = {steps_per_epoch}"));

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut shuffle_rng = stream::derive(cfg.seed, "epoch-shuffle", &[epoch as u64]);
        stream::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for (batch_ix, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch_id = format!("epoch{epoch}/batch{batch_ix}");
            let step = (|| -> Result<f64> {
                let mut ref_views = Vec::with_capacity(batch.len());
                let mut dep_views = Vec::with_capacity(batch.len());
                for &pos in batch {
                    let id = &pool[pos];
                    let sample = &set.samples[id];
                    let stable_index =
                        dataset.sample_index(id).expect("pool ids are dataset ids") as u64;
                    let mut crop_rng =
                        stream::derive(cfg.seed, "crop", &[epoch as u64, stable_index]);
                    let pair = synchronized_random_crop(
                        sample,
                        (cfg.crop_size, cfg.crop_size),
                        channels,
                        &mut crop_rng,
                    )?;
                    if pair.padded {
                        padded_crops += 1;
                    }
                    ref_views.push(pair.view_ref);
                    dep_views.push(pair.view_dep);
                }
                let mut views = ref_views;
                views.append(&mut dep_views);
                let images: Tensor<S> = stack_views(&views)?;

                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, TrainableSet::All);
                let x = tape.constant(images);
                let h = encoder_forward(&mut tape, params, &bound, x)?;
                let (z, commits) = projector_forward(&mut tape, params, &bound, h, true)?;
                let nodes = nt_xent_graph(&mut tape, z, batch.len(), cfg.temperature)?;
                let loss = tape.tensor(nodes.loss)?.item().as_f64();
                let grads = tape.backward(nodes.loss)?;
                let named = grads_by_name(&bound, grads);
                optimizer_step(params, &mut adam, &named, cfg.learning_rate)?;
                commit_bn_updates(params, &commits);
                Ok(loss)
            })();
            match step {
                Ok(loss) => epoch_losses.push(loss),
                Err(err) => {
                    record.events.push(format!("aborted at {batch_id}: {err}"));
                    record.aborted = Some(batch_id);
                    break 'epochs;
                }
            }
        }
        if record.aborted.is_some() {
            break;
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        record.epoch_loss.push(mean);
    }

    record.events.push(format!("padded_crops = {padded_crops}"));
    Ok(record)
}

// ── downstream training ─────────────────────────────────────────────────────

fn downstream_loop<S: Scalar>(
    dataset: &LoadedDataset,
    splits: &Splits,
    params: &mut ModelParams<S>,
    cfg: &TrainConfig,
    freeze_encoder: bool,
) -> Result<RunRecord> {
    cfg.validate()?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Config("train and validation splits must be nonempty".into()));
    }
    if params.config.encoder.input_channels != 3 {
        return Err(Error::Config(
            "downstream input is the three-channel depth-reflectance-depth composition; configure input_channels = 3".into(),
        ));
    }
    if (params.config.classifier.dropout_rate - cfg.dropout_rate).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "train config dropout {} disagrees with the model's classifier dropout {}",
            cfg.dropout_rate, params.config.classifier.dropout_rate
        )));
    }
    params.config.encoder.validate_for_input(cfg.crop_size)?;

    let set = normalize_ids(
        dataset,
        &splits.train,
        &[&splits.train, &splits.val, &splits.test],
    )?;
    let mut record = RunRecord::new(cfg, &set.stats.to_text());
    record.events.push(format!(
        "splits = train {} / val {} / test {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ));
    record.events.push(format!(
        "classifier_params = {}",
        params.classifier_parameter_count()
    ));

    let encoder_before = freeze_encoder.then(|| params.encoder_bytes());
    let num_classes = params.config.classifier.num_classes;
    let trainable = if freeze_encoder {
        TrainableSet::ClassifierOnly
    } else {
        TrainableSet::EncoderAndClassifier
    };

    let mut adam = AdamState::new(AdamConfig::default());
    let mut best: Option<(f64, usize, ModelParams<S>)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        let mut shuffle_rng = stream::derive(cfg.seed, "epoch-shuffle", &[epoch as u64]);
        stream::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_losses = Vec::new();
        for (batch_ix, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_id = format!("epoch{epoch}/batch{batch_ix}");
            let step = (|| -> Result<f64> {
                let mut views = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for &pos in batch {
                    let id = &splits.train[pos];
                    let sample = &set.samples[id];
                    let stable_index =
                        dataset.sample_index(id).expect("train ids are dataset ids") as u64;
                    let mut crop_rng =
                        stream::derive(cfg.seed, "crop", &[epoch as u64, stable_index]);
                    let pair = synchronized_random_crop(
                        sample,
                        (cfg.crop_size, cfg.crop_size),
                        1,
                        &mut crop_rng,
                    )?;
                    views.push(composed_view(&pair.view_dep, &pair.view_ref));
                    labels.push(
                        sample
                            .label
                            .ok_or_else(|| Error::Config(format!("sample {id} has no label")))?
                            .index(),
                    );
                }
                let images: Tensor<S> = stack_views(&views)?;

                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, trainable);
                let x = tape.constant(images);
                let h = if freeze_encoder {
                    // The encoder runs unrecorded: its output is a leaf, so
                    // no gradient can reach encoder parameters at all.
                    tape.set_recording(false);
                    let h = encoder_forward(&mut tape, params, &bound, x)?;
                    tape.set_recording(true);
                    h
                } else {
                    encoder_forward(&mut tape, params, &bound, x)?
                };
                let dropout_seed =
                    sub_seed(cfg.seed, "dropout", (epoch * 1_000_003 + batch_ix) as u64);
                let logits =
                    classifier_forward(&mut tape, params, &bound, h, true, dropout_seed)?;
                let loss_id = cross_entropy_graph(&mut tape, logits, &labels, num_classes)?;
                let loss = tape.tensor(loss_id)?.item().as_f64();
                let grads = tape.backward(loss_id)?;
                let named = grads_by_name(&bound, grads);
                optimizer_step(params, &mut adam, &named, cfg.learning_rate)?;
                Ok(loss)
            })();
            match step {
                Ok(loss) => epoch_losses.push(loss),
                Err(err) => {
                    record.events.push(format!("aborted at {batch_id}: {err}"));
                    record.aborted = Some(batch_id);
                    break 'epochs;
                }
            }
        }
        if record.aborted.is_some() {
            break;
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        record.epoch_loss.push(mean);

        let val = evaluate_normalized(&set, &splits.val, params, cfg.crop_size)?;
        record.epoch_val_metric.push(val.report.macro_f1);
        let better = best
            .as_ref()
            .map_or(true, |(best_f1, _, _)| val.report.macro_f1 > *best_f1);
        if better {
            best = Some((val.report.macro_f1, epoch, params.clone()));
        }
    }

    // Keep the best-validation checkpoint.
    if let Some((_, epoch, best_params)) = best {
        record.best_epoch = Some(epoch);
        *params = best_params;
    }

    if let Some(before) = encoder_before {
        let unchanged = before == params.encoder_bytes();
        record.events.push(format!(
            "encoder_freeze_check = {}",
            if unchanged { "ok" } else { "VIOLATED" }
        ));
        if !unchanged {
            return Err(Error::Config(
                "linear evaluation mutated encoder parameters".into(),
            ));
        }
    }

    if record.aborted.is_none() && !splits.test.is_empty() {
        let test = evaluate_normalized(&set, &splits.test, params, cfg.crop_size)?;
        record.final_metrics = Some(test.report);
    }
    Ok(record)
}

/// End-to-end supervised training of encoder and classifier on composed
/// three-channel inputs; the projection head is untouched. The
/// best-validation-macro-F1 model is retained and scored on the test split.
pub fn finetune<S: Scalar>(
    dataset: &LoadedDataset,
    splits: &Splits,
    params: &mut ModelParams<S>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::Config(format!("finetune called with mode {}", cfg.mode)));
    }
    downstream_loop(dataset, splits, params, cfg, false)
}

/// Classifier-only training over a frozen feature extractor. Encoder
/// parameters are verified bitwise unchanged after training.
pub fn linear_eval<S: Scalar>(
    dataset: &LoadedDataset,
    splits: &Splits,
    params: &mut ModelParams<S>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    if cfg.mode != TrainMode::LinearEval {
        return Err(Error::Config(format!(
            "linear_eval called with mode {}",
            cfg.mode
        )));
    }
    downstream_loop(dataset, splits, params, cfg, true)
}

// ── protocols ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolId {
    FtFull,
    FtSemi,
    LeFull,
    LeSemi,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [
        ProtocolId::FtFull,
        ProtocolId::FtSemi,
        ProtocolId::LeFull,
        ProtocolId::LeSemi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::FtFull => "FT-full",
            ProtocolId::FtSemi => "FT-semi",
            ProtocolId::LeFull => "LE-full",
            ProtocolId::LeSemi => "LE-semi",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown protocol {name}; valid names: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn is_semi(self) -> bool {
        matches!(self, ProtocolId::FtSemi | ProtocolId::LeSemi)
    }

    pub fn downstream_mode(self) -> TrainMode {
        match self {
            ProtocolId::FtFull | ProtocolId::FtSemi => TrainMode::Finetune,
            ProtocolId::LeFull | ProtocolId::LeSemi => TrainMode::LinearEval,
        }
    }

    pub fn split_label(self) -> &'static str {
        if self.is_semi() {
            "10/10/20"
        } else {
            "60/20/20"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Pretrained,
    RandomInit,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Pretrained => "pretrained",
            Arm::RandomInit => "random-init",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_index: usize,
    pub test_fold: usize,
    pub seed: u64,
    pub record: RunRecord,
}

#[derive(Clone, Debug)]
pub struct ArmReport {
    pub arm: Arm,
    pub runs: Vec<RunSummary>,
    /// Mean ± std across runs; absent when any run aborted.
    pub aggregate: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct ProtocolReport {
    pub protocol: ProtocolId,
    pub arms: Vec<ArmReport>,
}

impl ProtocolReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn any_aborted(&self) -> bool {
        self.arms
            .iter()
            .any(|a| a.runs.iter().any(|r| r.record.aborted.is_some()))
    }

    /// Headline comparison as one printable line.
    pub fn ordering_line(&self) -> String {
        let f1 = |arm: Arm| -> Option<f64> {
            self.arm(arm).and_then(|a| a.aggregate.as_ref()).map(|m| m.macro_f1)
        };
        match (f1(Arm::Pretrained), f1(Arm::RandomInit)) {
            (Some(p), Some(r)) => format!(
                "ordering: pretrained mean macro F1 {p:.4} vs random-init {r:.4} -> pretrained {} random-init",
                if p >= r { ">=" } else { "<" }
            ),
            _ => "ordering: unavailable (an arm aborted)".into(),
        }
    }

    pub fn to_tsv(&self, class_names: Option<&[&str]>) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# protocol = {} | split = {} | input = raw-reflectance-raw\n",
            self.protocol.name(),
            self.protocol.split_label()
        ));
        out.push_str("experiment\tarm\trun\ttest_fold\tseed\ttest_macro_f1\n");
        for arm in &self.arms {
            for run in &arm.runs {
                let f1 = run
                    .record
                    .final_metrics
                    .as_ref()
                    .map(|m| format!("{:.6}", m.macro_f1))
                    .unwrap_or_else(|| "aborted".into());
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    self.protocol.name(),
                    arm.arm.name(),
                    run.run_index,
                    run.test_fold,
                    run.seed,
                    f1
                ));
            }
        }
        for arm in &self.arms {
            if let Some(agg) = &arm.aggregate {
                let spread = agg.spread.as_ref();
                out.push_str(&format!(
                    "aggregate\t{}\tmean\t\t\t{:.6}\n",
                    arm.arm.name(),
                    agg.macro_f1
                ));
                if let Some(spread) = spread {
                    out.push_str(&format!(
                        "aggregate\t{}\tstd\t\t\t{:.6}\n",
                        arm.arm.name(),
                        spread.macro_f1_std
                    ));
                }
                out.push_str(&format!("# per-class ({})\n", arm.arm.name()));
                out.push_str(&agg.to_tsv(class_names));
            }
        }
        out.push_str(&format!("# {}\n", self.ordering_line()));
        out
    }
}

/// Protocol-wide settings: templates for the two training phases (seeds are
/// overridden per run) plus the fold and base seeds.
#[derive(Clone, Debug)]
pub struct ProtocolSettings {
    pub pretrain: TrainConfig,
    pub downstream_epochs: usize,
    pub downstream_lr: f64,
    pub downstream_batch: usize,
    pub fold_seed: u64,
    pub base_seed: u64,
}

impl ProtocolSettings {
    pub fn desk(base_seed: u64) -> Self {
        ProtocolSettings {
            pretrain: TrainConfig::desk_pretrain(0),
            downstream_epochs: 50,
            downstream_lr: 1e-3,
            downstream_batch: 16,
            fold_seed: sub_seed(base_seed, "folds", 0),
            base_seed,
        }
    }

    fn downstream_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            learning_rate: self.downstream_lr,
            batch_size: self.downstream_batch,
            epochs: self.downstream_epochs,
            crop_size: self.pretrain.crop_size,
            seed,
            temperature: self.pretrain.temperature,
            dropout_rate: 0.3,
        }
    }
}

/// Runs one protocol with both arms.
///
/// Full protocols rotate the test fold over all five folds. Semi protocols
/// keep fold 0 as the fixed test fold and repeat five times with different
/// subsample and training seeds; the pretrained encoder is shared across
/// repetitions because the pool does not change.
pub fn run_protocol<S: Scalar>(
    dataset: &LoadedDataset,
    protocol: ProtocolId,
    settings: &ProtocolSettings,
) -> Result<ProtocolReport> {
    let plan = stratified_folds(&dataset.manifest, 5, settings.fold_seed)?;
    let base = settings.base_seed;
    let mode = protocol.downstream_mode();

    let mut shared_pretrained: Option<ModelParams<S>> = None;
    let mut arms = Vec::new();
    for arm in [Arm::Pretrained, Arm::RandomInit] {
        let mut runs = Vec::new();
        for rep in 0..5usize {
            let (test_fold, split_protocol) = if protocol.is_semi() {
                (
                    0usize,
                    SplitProtocol::SemiSupervised {
                        subsample_seed: sub_seed(base, "subsample", rep as u64),
                    },
                )
            } else {
                (rep, SplitProtocol::FullySupervised)
            };
            let splits = make_splits(&dataset.manifest, &plan, &split_protocol, test_fold)?;

            let init_seed = sub_seed(base, "init", rep as u64);
            let mut params: ModelParams<S> =
                crate::model::init_params(&crate::model::ModelConfig::default(), init_seed)?;
            if arm == Arm::Pretrained {
                if protocol.is_semi() {
                    // One pool for all repetitions: pretrain once, reuse.
                    if shared_pretrained.is_none() {
                        let mut cfg = settings.pretrain;
                        cfg.seed = sub_seed(base, "pretrain", 0);
                        let mut p: ModelParams<S> = crate::model::init_params(
                            &crate::model::ModelConfig::default(),
                            sub_seed(base, "init", 0),
                        )?;
                        pretrain(dataset, &splits.pretrain_pool, &mut p, &cfg)?;
                        shared_pretrained = Some(p);
                    }
                    params = shared_pretrained.clone().unwrap();
                } else {
                    let mut cfg = settings.pretrain;
                    cfg.seed = sub_seed(base, "pretrain", rep as u64);
                    pretrain(dataset, &splits.pretrain_pool, &mut params, &cfg)?;
                }
            }

            let cfg = settings.downstream_config(mode, sub_seed(base, "train", rep as u64));
            let record = match mode {
                TrainMode::Finetune => finetune(dataset, &splits, &mut params, &cfg)?,
                TrainMode::LinearEval => linear_eval(dataset, &splits, &mut params, &cfg)?,
                TrainMode::Pretrain => unreachable!("protocols are downstream tasks"),
            };
            runs.push(RunSummary {
                run_index: rep,
                test_fold,
                seed: cfg.seed,
                record,
            });
        }
        let reports: Vec<MetricsReport> = runs
            .iter()
            .filter_map(|r| r.record.final_metrics.clone())
            .collect();
        let aggregate = (reports.len() == runs.len())
            .then(|| aggregate_folds(&reports))
            .transpose()?;
        arms.push(ArmReport {
            arm,
            runs,
            aggregate,
        });
    }

    Ok(ProtocolReport { protocol, arms })
}
