//! Recorded computation tape with reverse-mode gradient propagation.
//!
//! Tensors live in an arena owned by the tape; operations append records in
//! topological order by construction. `backward` walks the records in
//! reverse and accumulates exact gradients into every grad-requiring leaf.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::stream;
use crate::tensor::Tensor;

/// Handle to a tensor stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TensorId(pub(crate) usize);

/// This-call gradients for every grad-requiring leaf, keyed by id.
pub type GradientMap<S> = BTreeMap<TensorId, Vec<S>>;

/// Updated batch-norm running statistics produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

/// The primitive set. Attributes ride along with the kind.
#[derive(Clone, Debug)]
pub enum Primitive<S: Scalar> {
    MatMul {
        transpose_rhs: bool,
    },
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Relu,
    Dropout {
        rate: f64,
        training: bool,
        seed: u64,
    },
    BatchNorm {
        training: bool,
        momentum: f64,
        epsilon: f64,
        running_mean: Vec<S>,
        running_var: Vec<S>,
    },
    GlobalAvgPool,
    Add,
    Mul,
    Scale {
        factor: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
    RowL2Normalize,
    LogSoftmax,
    ReduceMean,
    ReduceSum,
}

impl<S: Scalar> Primitive<S> {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Dropout { .. } => "dropout",
            Primitive::BatchNorm { .. } => "batch_norm",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::Reshape { .. } => "reshape",
            Primitive::RowL2Normalize => "row_l2_normalize",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::ReduceSum => "reduce_sum",
        }
    }
}

/// Forward context a backward pass needs beyond the tensors themselves.
#[derive(Clone, Debug)]
enum SavedCtx<S: Scalar> {
    None,
    Relu {
        active: Vec<bool>,
    },
    Dropout {
        mask: Vec<S>,
    },
    BatchNorm {
        normalized: Vec<S>,
        inv_std: Vec<S>,
        update: Option<BnUpdate<S>>,
    },
    RowL2 {
        inv_norms: Vec<S>,
    },
}

#[derive(Debug)]
struct Record<S: Scalar> {
    op: Primitive<S>,
    inputs: Vec<TensorId>,
    output: TensorId,
    ctx: SavedCtx<S>,
}

/// A single-writer computation tape.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    producer: Vec<Option<usize>>,
    records: Vec<Record<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            producer: Vec::new(),
            records: Vec::new(),
            recording: true,
        }
    }

    /// When recording is off, operations still compute but leave no records;
    /// their outputs become leaves that block gradient flow.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    /// Inserts a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> TensorId {
        self.push(tensor)
    }

    /// Inserts a tensor as a constant leaf (never receives gradient).
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> TensorId {
        tensor.set_requires_grad(false);
        self.push(tensor)
    }

    fn push(&mut self, tensor: Tensor<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(tensor);
        self.producer.push(None);
        id
    }

    pub fn tensor(&self, id: TensorId) -> Result<&Tensor<S>> {
        self.nodes.get(id.0).ok_or(Error::NotOnTape { id: id.0 })
    }

    pub fn values(&self, id: TensorId) -> Result<&[S]> {
        Ok(self.tensor(id)?.values())
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        Ok(self.tensor(id)?.shape())
    }

    pub fn grad(&self, id: TensorId) -> Result<Option<&[S]>> {
        Ok(self.tensor(id)?.grad())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.zero_grad();
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Activation sign patterns of every recorded relu, in record order.
    /// Used by the gradient checker to detect kink crossings.
    pub fn relu_signatures(&self) -> Vec<&[bool]> {
        self.records
            .iter()
            .filter_map(|r| match &r.ctx {
                SavedCtx::Relu { active } => Some(active.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Applies a primitive to tape-resident inputs and appends the output.
    pub fn apply(&mut self, op: Primitive<S>, inputs: &[TensorId]) -> Result<TensorId> {
        for &id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::NotOnTape { id: id.0 });
            }
        }
        let (out, ctx) = self.run_forward(&op, inputs)?;
        if !out.all_finite() {
            return Err(Error::NonFinite {
                context: format!("output of {}", op.name()),
            });
        }
        let requires = inputs.iter().any(|&i| self.nodes[i.0].requires_grad());
        let mut out = out;
        out.set_requires_grad(requires);
        let out_id = self.push(out);
        if self.recording {
            self.producer[out_id.0] = Some(self.records.len());
            self.records.push(Record {
                op,
                inputs: inputs.to_vec(),
                output: out_id,
                ctx,
            });
        }
        Ok(out_id)
    }

    fn arity(&self, op: &Primitive<S>, inputs: &[TensorId], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::shape(
                op.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    fn run_forward(&self, op: &Primitive<S>, inputs: &[TensorId]) -> Result<(Tensor<S>, SavedCtx<S>)> {
        match op {
            Primitive::MatMul { transpose_rhs } => {
                self.arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0];
                let b = &self.nodes[inputs[1].0];
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(Error::shape(
                        "matmul",
                        format!("expected rank-2 inputs, got {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k) = (a.dim(0), a.dim(1));
                let (n, inner) = if *transpose_rhs {
                    (b.dim(0), b.dim(1))
                } else {
                    (b.dim(1), b.dim(0))
                };
                if k != inner {
                    return Err(Error::shape(
                        "matmul",
                        format!(
                            "inner dimensions disagree: {:?} x {:?} (transpose_rhs={transpose_rhs})",
                            a.shape(),
                            b.shape()
                        ),
                    ));
                }
                let c = ops::matmul(a.values(), b.values(), m, k, n, *transpose_rhs);
                Ok((Tensor::new(vec![m, n], c)?, SavedCtx::None))
            }
            Primitive::Conv2d { stride, padding } => {
                self.arity(op, inputs, 2)?;
                let x = &self.nodes[inputs[0].0];
                let k = &self.nodes[inputs[1].0];
                if x.rank() != 4 || k.rank() != 4 {
                    return Err(Error::shape(
                        "conv2d",
                        format!("expected NCHW input and OIHW kernel, got {:?} and {:?}", x.shape(), k.shape()),
                    ));
                }
                if k.dim(2) != k.dim(3) {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel must be square, got {:?}", k.shape()),
                    ));
                }
                if x.dim(1) != k.dim(1) {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input channels {:?} vs kernel channels {:?}", x.shape(), k.shape()),
                    ));
                }
                if *stride == 0 {
                    return Err(Error::attr("conv2d", "stride must be >= 1"));
                }
                let oh = ops::conv2d_output_extent(x.dim(2), k.dim(2), *stride, *padding);
                let ow = ops::conv2d_output_extent(x.dim(3), k.dim(2), *stride, *padding);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(Error::shape(
                        "conv2d",
                        format!(
                            "kernel {:?} does not fit input {:?} with stride {stride}, padding {padding}",
                            k.shape(),
                            x.shape()
                        ),
                    ));
                };
                let dims = ops::Conv2dDims {
                    batch: x.dim(0),
                    in_channels: x.dim(1),
                    in_h: x.dim(2),
                    in_w: x.dim(3),
                    out_channels: k.dim(0),
                    kernel: k.dim(2),
                    stride: *stride,
                    padding: *padding,
                    out_h: oh,
                    out_w: ow,
                };
                let out = ops::conv2d_forward(x.values(), k.values(), &dims);
                Ok((
                    Tensor::new(vec![dims.batch, dims.out_channels, oh, ow], out)?,
                    SavedCtx::None,
                ))
            }
            Primitive::Relu => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let (out, active) = ops::relu_forward(x.values());
                Ok((Tensor::new(x.shape().to_vec(), out)?, SavedCtx::Relu { active }))
            }
            Primitive::Dropout { rate, training, seed } => {
                self.arity(op, inputs, 1)?;
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::attr("dropout", format!("rate {rate} outside [0, 1)")));
                }
                let x = &self.nodes[inputs[0].0];
                if !*training || *rate == 0.0 {
                    return Ok((
                        Tensor::new(x.shape().to_vec(), x.values().to_vec())?,
                        SavedCtx::None,
                    ));
                }
                // Inverted scaling: kept activations divided by (1 - rate),
                // so inference is a plain identity.
                let mut rng = stream::derive(*seed, "dropout", &[]);
                let keep_scale = S::of(1.0 / (1.0 - rate));
                let mask: Vec<S> = (0..x.numel())
                    .map(|_| {
                        if rng.gen::<f64>() >= *rate {
                            keep_scale
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                let out: Vec<S> = x.values().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, SavedCtx::Dropout { mask }))
            }
            Primitive::BatchNorm {
                training,
                momentum,
                epsilon,
                running_mean,
                running_var,
            } => {
                self.arity(op, inputs, 3)?;
                if *epsilon <= 0.0 {
                    return Err(Error::attr("batch_norm", format!("epsilon {epsilon} must be > 0")));
                }
                if !(0.0..=1.0).contains(momentum) {
                    return Err(Error::attr("batch_norm", format!("momentum {momentum} outside [0, 1]")));
                }
                let x = &self.nodes[inputs[0].0];
                let gamma = &self.nodes[inputs[1].0];
                let beta = &self.nodes[inputs[2].0];
                if x.rank() != 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("expected rank-2 input, got {:?}", x.shape()),
                    ));
                }
                let cols = x.dim(1);
                for (name, t) in [("gamma", gamma), ("beta", beta)] {
                    if t.shape() != [cols] {
                        return Err(Error::shape(
                            "batch_norm",
                            format!("{name} shape {:?} does not match {cols} features", t.shape()),
                        ));
                    }
                }
                if running_mean.len() != cols || running_var.len() != cols {
                    return Err(Error::shape(
                        "batch_norm",
                        format!(
                            "running stats of lengths {}/{} do not match {cols} features",
                            running_mean.len(),
                            running_var.len()
                        ),
                    ));
                }
                let fwd = ops::batch_norm_forward(
                    x.values(),
                    gamma.values(),
                    beta.values(),
                    running_mean,
                    running_var,
                    x.dim(0),
                    cols,
                    *training,
                    *momentum,
                    *epsilon,
                );
                let update = fwd.update.map(|(m, v)| BnUpdate {
                    running_mean: m,
                    running_var: v,
                });
                Ok((
                    Tensor::new(x.shape().to_vec(), fwd.output)?,
                    SavedCtx::BatchNorm {
                        normalized: fwd.normalized,
                        inv_std: fwd.inv_std,
                        update,
                    },
                ))
            }
            Primitive::GlobalAvgPool => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                if x.rank() != 4 {
                    return Err(Error::shape(
                        "global_avg_pool",
                        format!("expected NCHW input, got {:?}", x.shape()),
                    ));
                }
                let plane = x.dim(2) * x.dim(3);
                let out = ops::global_avg_pool_forward(x.values(), x.dim(0), x.dim(1), plane);
                Ok((Tensor::new(vec![x.dim(0), x.dim(1)], out)?, SavedCtx::None))
            }
            Primitive::Add => {
                self.arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0];
                let b = &self.nodes[inputs[1].0];
                let out = match Self::add_mode(a.shape(), b.shape()) {
                    Some(AddMode::Same) => a
                        .values()
                        .iter()
                        .zip(b.values())
                        .map(|(&x, &y)| x + y)
                        .collect::<Vec<S>>(),
                    Some(AddMode::RowBias) => {
                        let n = b.numel();
                        a.values()
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x + b.values()[i % n])
                            .collect()
                    }
                    Some(AddMode::ChannelBias) => {
                        let plane = a.dim(2) * a.dim(3);
                        let c = a.dim(1);
                        a.values()
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x + b.values()[(i / plane) % c])
                            .collect()
                    }
                    None => {
                        return Err(Error::shape(
                            "add",
                            format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
                        ))
                    }
                };
                Ok((Tensor::new(a.shape().to_vec(), out)?, SavedCtx::None))
            }
            Primitive::Mul => {
                self.arity(op, inputs, 2)?;
                let a = &self.nodes[inputs[0].0];
                let b = &self.nodes[inputs[1].0];
                if a.shape() != b.shape() {
                    return Err(Error::shape(
                        "mul",
                        format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                    ));
                }
                let out: Vec<S> = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
                Ok((Tensor::new(a.shape().to_vec(), out)?, SavedCtx::None))
            }
            Primitive::Scale { factor } => {
                self.arity(op, inputs, 1)?;
                if !factor.is_finite() {
                    return Err(Error::attr("scale", format!("factor {factor} is not finite")));
                }
                let x = &self.nodes[inputs[0].0];
                let f = S::of(*factor);
                let out: Vec<S> = x.values().iter().map(|&v| v * f).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, SavedCtx::None))
            }
            Primitive::Reshape { shape } => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let numel: usize = shape.iter().product();
                if shape.iter().any(|&d| d == 0) || numel != x.numel() {
                    return Err(Error::shape(
                        "reshape",
                        format!("cannot reshape {:?} into {:?}", x.shape(), shape),
                    ));
                }
                Ok((Tensor::new(shape.clone(), x.values().to_vec())?, SavedCtx::None))
            }
            Primitive::RowL2Normalize => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                if x.rank() != 2 {
                    return Err(Error::shape(
                        "row_l2_normalize",
                        format!("expected rank-2 input, got {:?}", x.shape()),
                    ));
                }
                let Some((out, inv_norms)) = ops::row_l2_normalize_forward(x.values(), x.dim(0), x.dim(1))
                else {
                    return Err(Error::NonFinite {
                        context: "row_l2_normalize of a zero row".into(),
                    });
                };
                Ok((
                    Tensor::new(x.shape().to_vec(), out)?,
                    SavedCtx::RowL2 { inv_norms },
                ))
            }
            Primitive::LogSoftmax => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                if x.rank() != 2 {
                    return Err(Error::shape(
                        "log_softmax",
                        format!("expected rank-2 input, got {:?}", x.shape()),
                    ));
                }
                let out = ops::log_softmax_forward(x.values(), x.dim(0), x.dim(1));
                Ok((Tensor::new(x.shape().to_vec(), out)?, SavedCtx::None))
            }
            Primitive::ReduceMean => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let inv = S::of(1.0 / x.numel() as f64);
                let total: S = x.values().iter().copied().sum();
                Ok((Tensor::scalar(total * inv), SavedCtx::None))
            }
            Primitive::ReduceSum => {
                self.arity(op, inputs, 1)?;
                let x = &self.nodes[inputs[0].0];
                let total: S = x.values().iter().copied().sum();
                Ok((Tensor::scalar(total), SavedCtx::None))
            }
        }
    }

    fn add_mode(a: &[usize], b: &[usize]) -> Option<AddMode> {
        if a == b {
            Some(AddMode::Same)
        } else if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
            Some(AddMode::RowBias)
        } else if a.len() == 4 && b.len() == 1 && b[0] == a[1] {
            Some(AddMode::ChannelBias)
        } else {
            None
        }
    }

    /// Reverse-mode pass from a scalar loss. Every grad-requiring leaf
    /// receives its exact derivative (zero when off any path to the loss),
    /// accumulated into the tensor; the same gradients are returned keyed
    /// by id. Repeated calls without `zero_grads` keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<GradientMap<S>> {
        let loss_tensor = self.tensor(loss)?;
        if loss_tensor.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: loss_tensor.numel(),
            });
        }

        // A node needs a gradient if it is a grad-requiring leaf or feeds one.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if self.producer[i].is_none() && node.requires_grad() {
                needs[i] = true;
            }
        }
        for rec in &self.records {
            if rec.inputs.iter().any(|&i| needs[i.0]) {
                needs[rec.output.0] = true;
            }
        }

        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for rec in self.records.iter().rev() {
            let Some(grad_out) = grads[rec.output.0].take() else {
                continue;
            };
            self.propagate(rec, &grad_out, &needs, &mut grads)?;
        }

        let mut map = GradientMap::new();
        for i in 0..self.nodes.len() {
            if self.producer[i].is_none() && self.nodes[i].requires_grad() {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![S::zero(); self.nodes[i].numel()]);
                self.nodes[i].accumulate_grad(&g);
                map.insert(TensorId(i), g);
            }
        }
        Ok(map)
    }

    fn grad_sink<'a>(
        grads: &'a mut [Option<Vec<S>>],
        nodes: &[Tensor<S>],
        id: usize,
    ) -> &'a mut Vec<S> {
        let numel = nodes[id].numel();
        grads[id].get_or_insert_with(|| vec![S::zero(); numel])
    }

    fn propagate(
        &self,
        rec: &Record<S>,
        grad_out: &[S],
        needs: &[bool],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<()> {
        let wants = |ix: usize| needs[rec.inputs[ix].0];
        macro_rules! sink {
            ($ix:expr) => {
                Self::grad_sink(grads, &self.nodes, rec.inputs[$ix].0)
            };
        }
        match &rec.op {
            Primitive::MatMul { transpose_rhs } => {
                let a = &self.nodes[rec.inputs[0].0];
                let b = &self.nodes[rec.inputs[1].0];
                let (m, k) = (a.dim(0), a.dim(1));
                let n = if *transpose_rhs { b.dim(0) } else { b.dim(1) };
                if wants(0) {
                    let da = sink!(0);
                    // C = A·Bᵀ → dA = G·B ; C = A·B → dA = G·Bᵀ
                    ops::gemm_acc(grad_out, b.values(), da, m, n, k, false, !*transpose_rhs);
                }
                if wants(1) {
                    let db = sink!(1);
                    if *transpose_rhs {
                        // dB = Gᵀ·A
                        ops::gemm_acc(grad_out, a.values(), db, n, m, k, true, false);
                    } else {
                        // dB = Aᵀ·G
                        ops::gemm_acc(a.values(), grad_out, db, k, m, n, true, false);
                    }
                }
            }
            Primitive::Conv2d { stride, padding } => {
                let x = &self.nodes[rec.inputs[0].0];
                let k = &self.nodes[rec.inputs[1].0];
                let out = &self.nodes[rec.output.0];
                let dims = ops::Conv2dDims {
                    batch: x.dim(0),
                    in_channels: x.dim(1),
                    in_h: x.dim(2),
                    in_w: x.dim(3),
                    out_channels: k.dim(0),
                    kernel: k.dim(2),
                    stride: *stride,
                    padding: *padding,
                    out_h: out.dim(2),
                    out_w: out.dim(3),
                };
                let want_x = wants(0);
                let want_k = wants(1);
                if !want_x && !want_k {
                    return Ok(());
                }
                // Take both sinks out of the table, run the fused kernel,
                // then put them back.
                let xi = rec.inputs[0].0;
                let ki = rec.inputs[1].0;
                let mut gx_buf = want_x.then(|| {
                    grads[xi]
                        .take()
                        .unwrap_or_else(|| vec![S::zero(); self.nodes[xi].numel()])
                });
                let mut gk_buf = want_k.then(|| {
                    grads[ki]
                        .take()
                        .unwrap_or_else(|| vec![S::zero(); self.nodes[ki].numel()])
                });
                ops::conv2d_backward(
                    x.values(),
                    k.values(),
                    grad_out,
                    &dims,
                    gx_buf.as_deref_mut(),
                    gk_buf.as_deref_mut(),
                );
                if let Some(buf) = gx_buf {
                    grads[xi] = Some(buf);
                }
                if let Some(buf) = gk_buf {
                    grads[ki] = Some(buf);
                }
            }
            Primitive::Relu => {
                if wants(0) {
                    let SavedCtx::Relu { active } = &rec.ctx else {
                        unreachable!("relu record carries its activation mask");
                    };
                    let gx = sink!(0);
                    for ((g, &a), &go) in gx.iter_mut().zip(active).zip(grad_out) {
                        if a {
                            *g = *g + go;
                        }
                    }
                }
            }
            Primitive::Dropout { .. } => {
                if wants(0) {
                    match &rec.ctx {
                        SavedCtx::Dropout { mask } => {
                            let gx = sink!(0);
                            for ((g, &m), &go) in gx.iter_mut().zip(mask).zip(grad_out) {
                                *g = *g + go * m;
                            }
                        }
                        _ => {
                            // Inference-mode identity.
                            let gx = sink!(0);
                            for (g, &go) in gx.iter_mut().zip(grad_out) {
                                *g = *g + go;
                            }
                        }
                    }
                }
            }
            Primitive::BatchNorm { training, .. } => {
                let SavedCtx::BatchNorm {
                    normalized,
                    inv_std,
                    ..
                } = &rec.ctx
                else {
                    unreachable!("batch_norm record carries its context");
                };
                let x = &self.nodes[rec.inputs[0].0];
                let gamma = &self.nodes[rec.inputs[1].0];
                let (rows, cols) = (x.dim(0), x.dim(1));
                if wants(1) {
                    let gg = sink!(1);
                    ops::batch_norm_backward(
                        normalized,
                        inv_std,
                        gamma.values(),
                        grad_out,
                        rows,
                        cols,
                        *training,
                        None,
                        Some(gg),
                        None,
                    );
                }
                if wants(2) {
                    let gb = sink!(2);
                    ops::batch_norm_backward(
                        normalized,
                        inv_std,
                        gamma.values(),
                        grad_out,
                        rows,
                        cols,
                        *training,
                        None,
                        None,
                        Some(gb),
                    );
                }
                if wants(0) {
                    let gx = sink!(0);
                    ops::batch_norm_backward(
                        normalized,
                        inv_std,
                        gamma.values(),
                        grad_out,
                        rows,
                        cols,
                        *training,
                        Some(gx),
                        None,
                        None,
                    );
                }
            }
            Primitive::GlobalAvgPool => {
                if wants(0) {
                    let x = &self.nodes[rec.inputs[0].0];
                    let plane = x.dim(2) * x.dim(3);
                    let inv = S::of(1.0 / plane as f64);
                    let gx = sink!(0);
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g = *g + grad_out[i / plane] * inv;
                    }
                }
            }
            Primitive::Add => {
                let a = &self.nodes[rec.inputs[0].0];
                let b = &self.nodes[rec.inputs[1].0];
                if wants(0) {
                    let ga = sink!(0);
                    for (g, &go) in ga.iter_mut().zip(grad_out) {
                        *g = *g + go;
                    }
                }
                if wants(1) {
                    let mode = Self::add_mode(a.shape(), b.shape()).expect("validated in forward");
                    let plane = a.dim(2) * a.dim(3);
                    let c = a.dim(1);
                    let n = b.numel();
                    let gb = sink!(1);
                    match mode {
                        AddMode::Same => {
                            for (g, &go) in gb.iter_mut().zip(grad_out) {
                                *g = *g + go;
                            }
                        }
                        AddMode::RowBias => {
                            for (i, &go) in grad_out.iter().enumerate() {
                                gb[i % n] = gb[i % n] + go;
                            }
                        }
                        AddMode::ChannelBias => {
                            for (i, &go) in grad_out.iter().enumerate() {
                                let ch = (i / plane) % c;
                                gb[ch] = gb[ch] + go;
                            }
                        }
                    }
                }
            }
            Primitive::Mul => {
                if wants(0) {
                    let b_vals = self.nodes[rec.inputs[1].0].values();
                    let ga = sink!(0);
                    for ((g, &bv), &go) in ga.iter_mut().zip(b_vals).zip(grad_out) {
                        *g = *g + go * bv;
                    }
                }
                if wants(1) {
                    let a_vals = self.nodes[rec.inputs[0].0].values();
                    let gb = sink!(1);
                    for ((g, &av), &go) in gb.iter_mut().zip(a_vals).zip(grad_out) {
                        *g = *g + go * av;
                    }
                }
            }
            Primitive::Scale { factor } => {
                if wants(0) {
                    let f = S::of(*factor);
                    let gx = sink!(0);
                    for (g, &go) in gx.iter_mut().zip(grad_out) {
                        *g = *g + go * f;
                    }
                }
            }
            Primitive::Reshape { .. } => {
                if wants(0) {
                    let gx = sink!(0);
                    for (g, &go) in gx.iter_mut().zip(grad_out) {
                        *g = *g + go;
                    }
                }
            }
            Primitive::RowL2Normalize => {
                if wants(0) {
                    let SavedCtx::RowL2 { inv_norms } = &rec.ctx else {
                        unreachable!("row_l2_normalize record carries its norms");
                    };
                    let normalized = self.nodes[rec.output.0].values();
                    let x = &self.nodes[rec.inputs[0].0];
                    let (rows, cols) = (x.dim(0), x.dim(1));
                    let gx = sink!(0);
                    ops::row_l2_normalize_backward(normalized, inv_norms, grad_out, rows, cols, gx);
                }
            }
            Primitive::LogSoftmax => {
                if wants(0) {
                    let out = self.nodes[rec.output.0].values();
                    let x = &self.nodes[rec.inputs[0].0];
                    let (rows, cols) = (x.dim(0), x.dim(1));
                    let gx = sink!(0);
                    ops::log_softmax_backward(out, grad_out, rows, cols, gx);
                }
            }
            Primitive::ReduceMean => {
                if wants(0) {
                    let x = &self.nodes[rec.inputs[0].0];
                    let share = grad_out[0] * S::of(1.0 / x.numel() as f64);
                    let gx = sink!(0);
                    for g in gx.iter_mut() {
                        *g = *g + share;
                    }
                }
            }
            Primitive::ReduceSum => {
                if wants(0) {
                    let seed = grad_out[0];
                    let gx = sink!(0);
                    for g in gx.iter_mut() {
                        *g = *g + seed;
                    }
                }
            }
        }
        Ok(())
    }

    // ── convenience wrappers ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a · bᵀ`; used for all-pairs similarity.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, stride: usize, padding: usize) -> Result<TensorId> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, kernel])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn dropout(&mut self, x: TensorId, rate: f64, training: bool, seed: u64) -> Result<TensorId> {
        self.apply(Primitive::Dropout { rate, training, seed }, &[x])
    }

    /// Returns the output id and, in training mode, the updated running
    /// statistics for the caller to commit.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        training: bool,
        momentum: f64,
        epsilon: f64,
    ) -> Result<(TensorId, Option<BnUpdate<S>>)> {
        let out = self.apply(
            Primitive::BatchNorm {
                training,
                momentum,
                epsilon,
                running_mean: running_mean.to_vec(),
                running_var: running_var.to_vec(),
            },
            &[x, gamma, beta],
        )?;
        let update = if self.recording {
            match &self.records.last().expect("just recorded").ctx {
                SavedCtx::BatchNorm { update, .. } => update.clone(),
                _ => None,
            }
        } else if training {
            // Recompute the update without a record to keep semantics equal.
            let xs = self.nodes[x.0].values();
            let cols = self.nodes[x.0].dim(1);
            let rows = self.nodes[x.0].dim(0);
            let fwd = ops::batch_norm_forward(
                xs,
                self.nodes[gamma.0].values(),
                self.nodes[beta.0].values(),
                running_mean,
                running_var,
                rows,
                cols,
                true,
                momentum,
                epsilon,
            );
            fwd.update.map(|(m, v)| BnUpdate {
                running_mean: m,
                running_var: v,
            })
        } else {
            None
        };
        Ok((out, update))
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        self.apply(Primitive::Scale { factor }, &[x])
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }

    /// `[n, d0, d1, ...]` → `[n, d0·d1·...]`.
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x)?;
        if shape.is_empty() {
            return Err(Error::shape("reshape", "cannot flatten a rank-0 tensor".to_string()));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![n, rest])
    }

    pub fn row_l2_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::RowL2Normalize, &[x])
    }

    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn reduce_mean(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::ReduceMean, &[x])
    }

    pub fn reduce_sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.apply(Primitive::ReduceSum, &[x])
    }
}

enum AddMode {
    Same,
    RowBias,
    ChannelBias,
}
