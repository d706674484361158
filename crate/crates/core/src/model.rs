//! Encoder, projection head and classifier head: configuration, parameter
//! storage, deterministic initialization and forward graph construction.
//!
//! The encoder is a small configurable stack of strided convolutions with a
//! global average pool, standing in for a full-scale backbone at desk scale.
//! The projection head is used during pretraining only; downstream tasks
//! consume the pooled representation directly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stream;
use crate::tape::{BnUpdate, Tape, TensorId};
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvStage {
    /// Zero padding is fixed at (k-1)/2, keeping odd kernels centred.
    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    /// Output width after global average pooling; must equal the channel
    /// count of the final stage.
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let stages = [16, 32, 64, 128]
            .iter()
            .map(|&c| ConvStage {
                out_channels: c,
                kernel_size: 3,
                stride: 2,
            })
            .collect();
        EncoderConfig {
            input_channels: 3,
            stages,
            embedding_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Config(format!(
                "encoder input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel_size == 0 || s.stride == 0 {
                return Err(Error::Config(format!(
                    "encoder stage {i} has a zero field: {s:?}"
                )));
            }
        }
        let last = self.stages.last().unwrap().out_channels;
        if self.embedding_dim != last {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal the final stage's {last} channels",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Spatial extent after all stages, or None when some stage collapses.
    pub fn output_extent(&self, mut extent: usize) -> Option<usize> {
        for s in &self.stages {
            extent = crate::ops::conv2d_output_extent(extent, s.kernel_size, s.stride, s.padding())?;
            if extent == 0 {
                return None;
            }
        }
        Some(extent)
    }

    /// Ensures a crop of the given extent survives every stage.
    pub fn validate_for_input(&self, extent: usize) -> Result<()> {
        self.validate()?;
        if self.output_extent(extent).is_none() {
            return Err(Error::Config(format!(
                "input extent {extent} collapses to nothing through the encoder stages"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionHeadConfig {
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    /// Per-hidden-layer activation and normalization switches.
    pub relu: Vec<bool>,
    pub batch_norm: Vec<bool>,
}

impl Default for ProjectionHeadConfig {
    /// Desk-scale head: the 2048-2048-512 → 128 layout scaled by 1/16.
    fn default() -> Self {
        ProjectionHeadConfig {
            hidden_sizes: vec![128, 128, 32],
            output_dim: 8,
            relu: vec![true; 3],
            batch_norm: vec![true; 3],
        }
    }
}

impl ProjectionHeadConfig {
    /// Full-size head as used with a 256-image GPU batch regime.
    pub fn paper_scale() -> Self {
        ProjectionHeadConfig {
            hidden_sizes: vec![2048, 2048, 512],
            output_dim: 128,
            relu: vec![true; 3],
            batch_norm: vec![true; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config("projection head needs at least one hidden layer".into()));
        }
        if self.hidden_sizes.iter().any(|&s| s == 0) || self.output_dim == 0 {
            return Err(Error::Config("projection head sizes must be positive".into()));
        }
        if self.output_dim > self.hidden_sizes[0] {
            return Err(Error::Config(format!(
                "projection output_dim {} exceeds first hidden size {}",
                self.output_dim, self.hidden_sizes[0]
            )));
        }
        if self.relu.len() != self.hidden_sizes.len() || self.batch_norm.len() != self.hidden_sizes.len() {
            return Err(Error::Config(
                "projection relu/batch_norm flags must match the hidden layer count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierHeadConfig {
    pub hidden: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for ClassifierHeadConfig {
    fn default() -> Self {
        ClassifierHeadConfig {
            hidden: 512,
            dropout_rate: 0.3,
            num_classes: 7,
        }
    }
}

impl ClassifierHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("classifier hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "classifier dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectionHeadConfig,
    pub classifier: ClassifierHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            projector: ProjectionHeadConfig::default(),
            classifier: ClassifierHeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        self.classifier.validate()
    }

    /// Key-value snapshot embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self
            .encoder
            .stages
            .iter()
            .map(|s| format!("{}x{}x{}", s.out_channels, s.kernel_size, s.stride))
            .collect();
        let bools = |v: &[bool]| {
            v.iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(",")
        };
        let sizes = |v: &[usize]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "encoder.input_channels = {}\n\
             encoder.stages = {}\n\
             encoder.embedding_dim = {}\n\
             projector.hidden_sizes = {}\n\
             projector.output_dim = {}\n\
             projector.relu = {}\n\
             projector.batch_norm = {}\n\
             classifier.hidden = {}\n\
             classifier.dropout_rate = {:?}\n\
             classifier.num_classes = {}\n",
            self.encoder.input_channels,
            stages.join(","),
            self.encoder.embedding_dim,
            sizes(&self.projector.hidden_sizes),
            self.projector.output_dim,
            bools(&self.projector.relu),
            bools(&self.projector.batch_norm),
            self.classifier.hidden,
            self.classifier.dropout_rate,
            self.classifier.num_classes,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line: {line}")))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let take = |map: &mut BTreeMap<String, String>, key: &str| -> Result<String> {
            map.remove(key)
                .ok_or_else(|| Error::Config(format!("missing config key {key}")))
        };
        let parse_usize = |v: &str, key: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: bad integer {v}")))
        };
        let parse_bools = |v: &str, key: &str| -> Result<Vec<bool>> {
            v.split(',')
                .map(|s| match s.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Config(format!("{key}: bad flag {other}"))),
                })
                .collect()
        };

        let input_channels = parse_usize(&take(&mut map, "encoder.input_channels")?, "input_channels")?;
        let stages_raw = take(&mut map, "encoder.stages")?;
        let mut stages = Vec::new();
        for part in stages_raw.split(',') {
            let fields: Vec<&str> = part.trim().split('x').collect();
            if fields.len() != 3 {
                return Err(Error::Config(format!("bad stage spec {part}")));
            }
            stages.push(ConvStage {
                out_channels: parse_usize(fields[0], "stage channels")?,
                kernel_size: parse_usize(fields[1], "stage kernel")?,
                stride: parse_usize(fields[2], "stage stride")?,
            });
        }
        let embedding_dim = parse_usize(&take(&mut map, "encoder.embedding_dim")?, "embedding_dim")?;
        let hidden_sizes = take(&mut map, "projector.hidden_sizes")?
            .split(',')
            .map(|s| parse_usize(s.trim(), "hidden size"))
            .collect::<Result<Vec<_>>>()?;
        let output_dim = parse_usize(&take(&mut map, "projector.output_dim")?, "output_dim")?;
        let relu = parse_bools(&take(&mut map, "projector.relu")?, "relu")?;
        let batch_norm = parse_bools(&take(&mut map, "projector.batch_norm")?, "batch_norm")?;
        let hidden = parse_usize(&take(&mut map, "classifier.hidden")?, "classifier hidden")?;
        let dropout_raw = take(&mut map, "classifier.dropout_rate")?;
        let dropout_rate: f64 = dropout_raw
            .parse()
            .map_err(|_| Error::Config(format!("bad dropout_rate {dropout_raw}")))?;
        let num_classes = parse_usize(&take(&mut map, "classifier.num_classes")?, "num_classes")?;
        if let Some(stray) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key {stray}")));
        }

        let config = ModelConfig {
            encoder: EncoderConfig {
                input_channels,
                stages,
                embedding_dim,
            },
            projector: ProjectionHeadConfig {
                hidden_sizes,
                output_dim,
                relu,
                batch_norm,
            },
            classifier: ClassifierHeadConfig {
                hidden,
                dropout_rate,
                num_classes,
            },
        };
        config.validate()?;
        Ok(config)
    }
}

// ── parameters ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LinearParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ConvStageParams<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct BnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ProjectorLayer<S: Scalar> {
    pub linear: LinearParams<S>,
    pub bn: Option<BnParams<S>>,
}

/// Full parameter set: weights, biases and batch-norm buffers, plus the
/// configuration and seed they were initialized from.
#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub seed: u64,
    pub encoder: Vec<ConvStageParams<S>>,
    pub projector_hidden: Vec<ProjectorLayer<S>>,
    pub projector_output: LinearParams<S>,
    pub classifier_hidden: LinearParams<S>,
    pub classifier_output: LinearParams<S>,
}

/// Which parameters receive gradients when bound onto a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    All,
    EncoderAndClassifier,
    ClassifierOnly,
    None,
}

/// Tape-resident parameter ids keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn insert(&mut self, name: &str, id: TensorId) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn plain_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

fn normal_tensor<S: Scalar>(shape: Vec<usize>, std: f64, seed: u64, name: &str) -> Tensor<S> {
    let mut rng = stream::derive(seed, name, &[]);
    let numel: usize = shape.iter().product();
    let values: Vec<S> = (0..numel)
        .map(|_| S::of(stream::normal_f64(&mut rng) * std))
        .collect();
    Tensor::new(shape, values).expect("finite init draw")
}

/// Deterministic parameter initialization: fan-in-scaled normal draws for
/// convolutions and relu-preceding linear layers, plain fan-in scaling for
/// output layers, zero biases, identity batch-norm.
pub fn init_params<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    config.validate()?;
    let enc = &config.encoder;
    let mut encoder = Vec::with_capacity(enc.stages.len());
    let mut in_ch = enc.input_channels;
    for (i, stage) in enc.stages.iter().enumerate() {
        let fan_in = in_ch * stage.kernel_size * stage.kernel_size;
        encoder.push(ConvStageParams {
            kernel: normal_tensor(
                vec![stage.out_channels, in_ch, stage.kernel_size, stage.kernel_size],
                he_std(fan_in),
                seed,
                &format!("encoder.stage{i}.kernel"),
            ),
            bias: Tensor::zeros(vec![stage.out_channels]),
        });
        in_ch = stage.out_channels;
    }

    let proj = &config.projector;
    let mut projector_hidden = Vec::with_capacity(proj.hidden_sizes.len());
    let mut width = enc.embedding_dim;
    for (i, &hidden) in proj.hidden_sizes.iter().enumerate() {
        let std = if proj.relu[i] { he_std(width) } else { plain_std(width) };
        let linear = LinearParams {
            weight: normal_tensor(
                vec![width, hidden],
                std,
                seed,
                &format!("projector.hidden{i}.weight"),
            ),
            bias: Tensor::zeros(vec![hidden]),
        };
        let bn = proj.batch_norm[i].then(|| BnParams {
            gamma: Tensor::filled(vec![hidden], S::one()),
            beta: Tensor::zeros(vec![hidden]),
            running_mean: Tensor::zeros(vec![hidden]),
            running_var: Tensor::filled(vec![hidden], S::one()),
        });
        projector_hidden.push(ProjectorLayer { linear, bn });
        width = hidden;
    }
    let projector_output = LinearParams {
        weight: normal_tensor(
            vec![width, proj.output_dim],
            plain_std(width),
            seed,
            "projector.output.weight",
        ),
        bias: Tensor::zeros(vec![proj.output_dim]),
    };

    let cls = &config.classifier;
    let classifier_hidden = LinearParams {
        weight: normal_tensor(
            vec![enc.embedding_dim, cls.hidden],
            he_std(enc.embedding_dim),
            seed,
            "classifier.hidden.weight",
        ),
        bias: Tensor::zeros(vec![cls.hidden]),
    };
    let classifier_output = LinearParams {
        weight: normal_tensor(
            vec![cls.hidden, cls.num_classes],
            plain_std(cls.hidden),
            seed,
            "classifier.output.weight",
        ),
        bias: Tensor::zeros(vec![cls.num_classes]),
    };

    Ok(ModelParams {
        config: config.clone(),
        seed,
        encoder,
        projector_hidden,
        projector_output,
        classifier_hidden,
        classifier_output,
    })
}

impl<S: Scalar> ModelParams<S> {
    /// Trainable tensors in a fixed walk order.
    pub fn named_trainable(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.stage{i}.kernel"), &stage.kernel));
            out.push((format!("encoder.stage{i}.bias"), &stage.bias));
        }
        for (i, layer) in self.projector_hidden.iter().enumerate() {
            out.push((format!("projector.hidden{i}.weight"), &layer.linear.weight));
            out.push((format!("projector.hidden{i}.bias"), &layer.linear.bias));
            if let Some(bn) = &layer.bn {
                out.push((format!("projector.hidden{i}.bn.gamma"), &bn.gamma));
                out.push((format!("projector.hidden{i}.bn.beta"), &bn.beta));
            }
        }
        out.push(("projector.output.weight".into(), &self.projector_output.weight));
        out.push(("projector.output.bias".into(), &self.projector_output.bias));
        out.push(("classifier.hidden.weight".into(), &self.classifier_hidden.weight));
        out.push(("classifier.hidden.bias".into(), &self.classifier_hidden.bias));
        out.push(("classifier.output.weight".into(), &self.classifier_output.weight));
        out.push(("classifier.output.bias".into(), &self.classifier_output.bias));
        out
    }

    pub fn named_trainable_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.kernel"), &mut stage.kernel));
            out.push((format!("encoder.stage{i}.bias"), &mut stage.bias));
        }
        for (i, layer) in self.projector_hidden.iter_mut().enumerate() {
            out.push((format!("projector.hidden{i}.weight"), &mut layer.linear.weight));
            out.push((format!("projector.hidden{i}.bias"), &mut layer.linear.bias));
            if let Some(bn) = &mut layer.bn {
                out.push((format!("projector.hidden{i}.bn.gamma"), &mut bn.gamma));
                out.push((format!("projector.hidden{i}.bn.beta"), &mut bn.beta));
            }
        }
        out.push(("projector.output.weight".into(), &mut self.projector_output.weight));
        out.push(("projector.output.bias".into(), &mut self.projector_output.bias));
        out.push(("classifier.hidden.weight".into(), &mut self.classifier_hidden.weight));
        out.push(("classifier.hidden.bias".into(), &mut self.classifier_hidden.bias));
        out.push(("classifier.output.weight".into(), &mut self.classifier_output.weight));
        out.push(("classifier.output.bias".into(), &mut self.classifier_output.bias));
        out
    }

    /// Batch-norm running statistics (non-trainable state).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.projector_hidden.iter().enumerate() {
            if let Some(bn) = &layer.bn {
                out.push((format!("projector.hidden{i}.bn.running_mean"), &bn.running_mean));
                out.push((format!("projector.hidden{i}.bn.running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, layer) in self.projector_hidden.iter_mut().enumerate() {
            if let Some(bn) = &mut layer.bn {
                out.push((format!("projector.hidden{i}.bn.running_mean"), &mut bn.running_mean));
                out.push((format!("projector.hidden{i}.bn.running_var"), &mut bn.running_var));
            }
        }
        out
    }

    /// Trainables followed by buffers; the checkpoint record order.
    pub fn named_all(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.named_trainable();
        out.extend(self.named_buffers());
        out
    }

    /// Mutable access in the same order as [`named_all`](Self::named_all);
    /// one structural walk so the borrows stay disjoint.
    pub fn named_all_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.kernel"), &mut stage.kernel));
            out.push((format!("encoder.stage{i}.bias"), &mut stage.bias));
        }
        let mut buffers: Vec<(String, &mut Tensor<S>)> = Vec::new();
        for (i, layer) in self.projector_hidden.iter_mut().enumerate() {
            out.push((format!("projector.hidden{i}.weight"), &mut layer.linear.weight));
            out.push((format!("projector.hidden{i}.bias"), &mut layer.linear.bias));
            if let Some(bn) = &mut layer.bn {
                out.push((format!("projector.hidden{i}.bn.gamma"), &mut bn.gamma));
                out.push((format!("projector.hidden{i}.bn.beta"), &mut bn.beta));
                buffers.push((format!("projector.hidden{i}.bn.running_mean"), &mut bn.running_mean));
                buffers.push((format!("projector.hidden{i}.bn.running_var"), &mut bn.running_var));
            }
        }
        out.push(("projector.output.weight".into(), &mut self.projector_output.weight));
        out.push(("projector.output.bias".into(), &mut self.projector_output.bias));
        out.push(("classifier.hidden.weight".into(), &mut self.classifier_hidden.weight));
        out.push(("classifier.hidden.bias".into(), &mut self.classifier_hidden.bias));
        out.push(("classifier.output.weight".into(), &mut self.classifier_output.weight));
        out.push(("classifier.output.bias".into(), &mut self.classifier_output.bias));
        out.extend(buffers);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn classifier_parameter_count(&self) -> usize {
        self.named_trainable()
            .iter()
            .filter(|(n, _)| n.starts_with("classifier."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Bitwise image of all encoder tensors, for the freeze contract.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.named_trainable() {
            if name.starts_with("encoder.") {
                out.extend_from_slice(&t.value_bytes());
            }
        }
        out
    }

    /// Copies parameters onto a tape, flagging the requested subset as
    /// trainable.
    pub fn bind(&self, tape: &mut Tape<S>, set: TrainableSet) -> BoundParams {
        let mut bound = BoundParams::default();
        for (name, tensor) in self.named_trainable() {
            let mut t = tensor.clone();
            let trainable = match set {
                TrainableSet::All => true,
                TrainableSet::EncoderAndClassifier => {
                    name.starts_with("encoder.") || name.starts_with("classifier.")
                }
                TrainableSet::ClassifierOnly => name.starts_with("classifier."),
                TrainableSet::None => false,
            };
            t.set_requires_grad(trainable);
            let id = tape.leaf(t);
            bound.insert(&name, id);
        }
        bound
    }

    /// Eval-mode pooled representation of an image batch.
    pub fn embed(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let bound = self.bind(&mut tape, TrainableSet::None);
        let x = tape.leaf(images.clone());
        let h = encoder_forward(&mut tape, self, &bound, x)?;
        Ok(tape.tensor(h)?.clone())
    }

    /// Eval-mode projection of pooled representations.
    pub fn project(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let bound = self.bind(&mut tape, TrainableSet::None);
        let hid = tape.leaf(h.clone());
        let (z, _) = projector_forward(&mut tape, self, &bound, hid, false)?;
        Ok(tape.tensor(z)?.clone())
    }

    /// Classifier logits; dropout is active only when `training` is set.
    pub fn classify(&self, h: &Tensor<S>, training: bool, dropout_seed: u64) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let bound = self.bind(&mut tape, TrainableSet::None);
        let hid = tape.leaf(h.clone());
        let logits = classifier_forward(&mut tape, self, &bound, hid, training, dropout_seed)?;
        Ok(tape.tensor(logits)?.clone())
    }
}

// ── forward graphs ──────────────────────────────────────────────────────────

/// Conv stages with relu, then global average pooling: `[N,C,H,W] → [N,d]`.
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &BoundParams,
    images: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(images)?.to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "encoder",
            format!("expected NCHW image batch, got {shape:?}"),
        ));
    }
    let enc = &params.config.encoder;
    if shape[1] != enc.input_channels {
        return Err(Error::shape(
            "encoder",
            format!(
                "batch has {} channels, encoder is configured for {}",
                shape[1], enc.input_channels
            ),
        ));
    }
    let mut x = images;
    for (i, stage) in enc.stages.iter().enumerate() {
        let kernel = bound.id(&format!("encoder.stage{i}.kernel"));
        let bias = bound.id(&format!("encoder.stage{i}.bias"));
        x = tape.conv2d(x, kernel, stage.stride, stage.padding())?;
        x = tape.add(x, bias)?;
        x = tape.relu(x)?;
    }
    tape.global_avg_pool(x)
}

/// Running-statistic updates produced by a training-mode projector pass,
/// to be committed back into the owning [`ModelParams`].
pub struct BnCommit<S: Scalar> {
    pub layer: usize,
    pub update: BnUpdate<S>,
}

/// MLP projection head: hidden linear layers with optional relu and
/// batch-norm, then a linear map to the contrastive space.
pub fn projector_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &BoundParams,
    h: TensorId,
    training: bool,
) -> Result<(TensorId, Vec<BnCommit<S>>)> {
    let width = tape.shape(h)?.get(1).copied().unwrap_or(0);
    if width != params.config.encoder.embedding_dim {
        return Err(Error::shape(
            "projector",
            format!(
                "representation width {width} does not match embedding_dim {}",
                params.config.encoder.embedding_dim
            ),
        ));
    }
    let proj = &params.config.projector;
    let mut x = h;
    let mut commits = Vec::new();
    for (i, layer) in params.projector_hidden.iter().enumerate() {
        let w = bound.id(&format!("projector.hidden{i}.weight"));
        let b = bound.id(&format!("projector.hidden{i}.bias"));
        x = tape.matmul(x, w)?;
        x = tape.add(x, b)?;
        if proj.relu[i] {
            x = tape.relu(x)?;
        }
        if let Some(bn) = &layer.bn {
            let gamma = bound.id(&format!("projector.hidden{i}.bn.gamma"));
            let beta = bound.id(&format!("projector.hidden{i}.bn.beta"));
            let (out, update) = tape.batch_norm(
                x,
                gamma,
                beta,
                bn.running_mean.values(),
                bn.running_var.values(),
                training,
                0.1,
                1e-5,
            )?;
            x = out;
            if let Some(update) = update {
                commits.push(BnCommit { layer: i, update });
            }
        }
    }
    let w = bound.id("projector.output.weight");
    let b = bound.id("projector.output.bias");
    x = tape.matmul(x, w)?;
    x = tape.add(x, b)?;
    Ok((x, commits))
}

/// Applies projector batch-norm updates back to the parameter store.
pub fn commit_bn_updates<S: Scalar>(params: &mut ModelParams<S>, commits: &[BnCommit<S>]) {
    for commit in commits {
        let bn = params.projector_hidden[commit.layer]
            .bn
            .as_mut()
            .expect("commit targets an existing bn layer");
        bn.running_mean = Tensor::new(
            bn.running_mean.shape().to_vec(),
            commit.update.running_mean.clone(),
        )
        .expect("running mean stays finite");
        bn.running_var = Tensor::new(
            bn.running_var.shape().to_vec(),
            commit.update.running_var.clone(),
        )
        .expect("running var stays finite");
    }
}

/// Classifier head: hidden linear + relu + dropout, then the output layer.
pub fn classifier_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &BoundParams,
    h: TensorId,
    training: bool,
    dropout_seed: u64,
) -> Result<TensorId> {
    let width = tape.shape(h)?.get(1).copied().unwrap_or(0);
    if width != params.config.encoder.embedding_dim {
        return Err(Error::shape(
            "classifier",
            format!(
                "representation width {width} does not match embedding_dim {}",
                params.config.encoder.embedding_dim
            ),
        ));
    }
    let w1 = bound.id("classifier.hidden.weight");
    let b1 = bound.id("classifier.hidden.bias");
    let w2 = bound.id("classifier.output.weight");
    let b2 = bound.id("classifier.output.bias");
    let mut x = tape.matmul(h, w1)?;
    x = tape.add(x, b1)?;
    x = tape.relu(x)?;
    x = tape.dropout(x, params.config.classifier.dropout_rate, training, dropout_seed)?;
    x = tape.matmul(x, w2)?;
    tape.add(x, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckSettings};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_channels: 3,
                stages: vec![
                    ConvStage { out_channels: 8, kernel_size: 3, stride: 2 },
                    ConvStage { out_channels: 16, kernel_size: 3, stride: 2 },
                ],
                embedding_dim: 16,
            },
            projector: ProjectionHeadConfig {
                hidden_sizes: vec![16, 8],
                output_dim: 4,
                relu: vec![true, true],
                batch_norm: vec![true, false],
            },
            classifier: ClassifierHeadConfig {
                hidden: 16,
                dropout_rate: 0.3,
                num_classes: 7,
            },
        }
    }

    fn image_batch(n: usize, c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = stream::derive(seed, "model-test-images", &[]);
        let values: Vec<f64> = (0..n * c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64_slice(vec![n, c, hw, hw], &values).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a: ModelParams<f64> = init_params(&cfg, 5).unwrap();
        let b: ModelParams<f64> = init_params(&cfg, 5).unwrap();
        for ((_, ta), (_, tb)) in a.named_all().iter().zip(b.named_all().iter()) {
            assert_eq!(ta.value_bytes(), tb.value_bytes());
        }
        let c: ModelParams<f64> = init_params(&cfg, 6).unwrap();
        let differs = a
            .named_all()
            .iter()
            .zip(c.named_all().iter())
            .any(|((_, ta), (_, tc))| ta.value_bytes() != tc.value_bytes());
        assert!(differs, "different seeds must differ somewhere");
    }

    #[test]
    fn conv_init_variance_tracks_fan_in() {
        // 16-channel 3x3 kernels: target variance 2 / (3*3*16).
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_channels: 3,
                stages: vec![
                    ConvStage { out_channels: 16, kernel_size: 3, stride: 2 },
                    ConvStage { out_channels: 24, kernel_size: 3, stride: 2 },
                ],
                embedding_dim: 24,
            },
            ..tiny_config()
        };
        let target = 2.0 / (3.0 * 3.0 * 16.0);
        let mut values = Vec::new();
        for seed in 0..10u64 {
            let p: ModelParams<f64> = init_params(&cfg, seed).unwrap();
            values.extend(p.encoder[1].kernel.values().iter().map(|v| v.as_f64()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        assert!(
            (var - target).abs() / target < 0.2,
            "sample variance {var:.5} vs target {target:.5}"
        );
    }

    #[test]
    fn encoder_output_shape_contract() {
        let mut cfg = tiny_config();
        cfg.encoder.stages.push(ConvStage { out_channels: 64, kernel_size: 3, stride: 2 });
        cfg.encoder.embedding_dim = 64;
        let params: ModelParams<f64> = init_params(&cfg, 1).unwrap();
        let h = params.embed(&image_batch(4, 3, 32, 2)).unwrap();
        assert_eq!(h.shape(), &[4, 64]);
    }

    #[test]
    fn zero_input_rows_are_identical() {
        let params: ModelParams<f64> = init_params(&tiny_config(), 3).unwrap();
        let zeros = Tensor::zeros(vec![3, 3, 16, 16]);
        let h = params.embed(&zeros).unwrap();
        let d = h.dim(1);
        for r in 1..3 {
            assert_eq!(
                &h.values()[..d],
                &h.values()[r * d..(r + 1) * d],
                "all-zero inputs must map to identical rows"
            );
        }
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let params: ModelParams<f64> = init_params(&tiny_config(), 4).unwrap();
        let images = image_batch(4, 3, 16, 5);
        let h = params.embed(&images).unwrap();

        let perm = [2usize, 0, 3, 1];
        let plane = 3 * 16 * 16;
        let mut permuted = vec![0.0; images.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&images.values()[src * plane..(src + 1) * plane]);
        }
        let images_p = Tensor::from_f64_slice(vec![4, 3, 16, 16], &permuted).unwrap();
        let h_p = params.embed(&images_p).unwrap();

        let d = h.dim(1);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &h_p.values()[dst * d..(dst + 1) * d],
                &h.values()[src * d..(src + 1) * d]
            );
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let params: ModelParams<f64> = init_params(&tiny_config(), 4).unwrap();
        let err = params.embed(&image_batch(2, 1, 16, 6)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn projector_shape_and_eval_consistency() {
        let mut cfg = tiny_config();
        cfg.encoder.stages[1].out_channels = 64;
        cfg.encoder.embedding_dim = 64;
        cfg.projector = ProjectionHeadConfig {
            hidden_sizes: vec![128, 128, 32],
            output_dim: 16,
            relu: vec![true; 3],
            batch_norm: vec![true; 3],
        };
        let params: ModelParams<f64> = init_params(&cfg, 7).unwrap();

        let mut row = Vec::new();
        use rand::Rng;
        let mut rng = stream::derive(8, "proj-test", &[]);
        for _ in 0..64 {
            row.push(rng.gen_range(-1.0..1.0));
        }
        let mut values = Vec::new();
        for _ in 0..4 {
            values.extend_from_slice(&row);
        }
        let h = Tensor::from_f64_slice(vec![4, 64], &values).unwrap();
        let z = params.project(&h).unwrap();
        assert_eq!(z.shape(), &[4, 16]);
        let d = 16;
        for r in 1..4 {
            assert_eq!(
                &z.values()[..d],
                &z.values()[r * d..(r + 1) * d],
                "identical inputs give identical eval-mode outputs"
            );
        }
    }

    #[test]
    fn projector_width_mismatch_rejected() {
        let params: ModelParams<f64> = init_params(&tiny_config(), 7).unwrap();
        let h = Tensor::<f64>::zeros(vec![2, 5]);
        assert!(params.project(&h).is_err());
    }

    #[test]
    fn projector_gradient_wrt_first_weight() {
        let cfg = tiny_config();
        let params: ModelParams<f64> = init_params(&cfg, 9).unwrap();
        use rand::Rng;
        let mut rng = stream::derive(10, "proj-grad", &[]);
        let h_vals: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = Tensor::from_f64_slice(vec![4, 16], &h_vals).unwrap();

        let w0 = params.projector_hidden[0].linear.weight.clone();
        let report = grad_check(
            |tape, ids| {
                let mut bound = params.bind(tape, TrainableSet::None);
                bound.insert("projector.hidden0.weight", ids[0]);
                let hid = tape.leaf(h.clone());
                let (z, _) = projector_forward(tape, &params, &bound, hid, true)?;
                tape.reduce_mean(z)
            },
            &[("projector.hidden0.weight".to_string(), w0)],
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.all_passed(), "{}", report.to_text());
    }

    #[test]
    fn classifier_shape_and_dropout_behaviour() {
        let params: ModelParams<f64> = init_params(&tiny_config(), 11).unwrap();
        use rand::Rng;
        let mut rng = stream::derive(12, "cls-test", &[]);
        let h_vals: Vec<f64> = (0..5 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = Tensor::from_f64_slice(vec![5, 16], &h_vals).unwrap();

        let logits = params.classify(&h, false, 0).unwrap();
        assert_eq!(logits.shape(), &[5, 7]);

        let again = params.classify(&h, false, 99).unwrap();
        assert_eq!(logits.values(), again.values(), "eval mode ignores dropout");

        let t1 = params.classify(&h, true, 1).unwrap();
        let t2 = params.classify(&h, true, 2).unwrap();
        assert_ne!(t1.values(), t2.values(), "training dropout differs across stream states");
    }

    #[test]
    fn desk_default_parameter_budget() {
        let params: ModelParams<f64> = init_params(&ModelConfig::default(), 0).unwrap();
        let count = params.parameter_count();
        assert!(count < 500_000, "desk-scale default has {count} parameters");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny_config();
        let text = cfg.to_text();
        let parsed = ModelConfig::from_text(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert!(ModelConfig::from_text("nonsense = 1\n").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.encoder.input_channels = 2;
        assert!(init_params::<f64>(&cfg, 0).is_err());

        let mut cfg = tiny_config();
        cfg.projector.output_dim = 1000;
        assert!(init_params::<f64>(&cfg, 0).is_err());

        let mut cfg = tiny_config();
        cfg.classifier.dropout_rate = 1.0;
        assert!(init_params::<f64>(&cfg, 0).is_err());

        let mut cfg = tiny_config();
        cfg.encoder.embedding_dim = 999;
        assert!(init_params::<f64>(&cfg, 0).is_err());
    }
}
