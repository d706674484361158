//! Contrastive batch construction and the normalized temperature-scaled
//! cross-entropy loss over paired views.
//!
//! A batch of N samples yields 2N embeddings: rows 0..N-1 come from
//! reflectance views, rows N..2N-1 from depth views, and row i is the
//! positive partner of row i+N. For each directed anchor the denominator
//! sums over all other 2N-1 rows; no negatives are sampled explicitly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Additive mask that removes the self-similarity term from each row's
/// log-sum-exp. Finite on purpose: exp(-1e9 - shift) underflows to exactly
/// zero while every intermediate stays representable.
const SELF_MASK: f64 = -1e9;

/// Row norms may deviate from 1 by at most this much to count as normalized.
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ContrastiveConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::attr(
                "nt_xent",
                format!("temperature {temperature} must be positive and finite"),
            ));
        }
        Ok(ContrastiveConfig { temperature })
    }
}

/// The stacked 2N×D embedding matrix with the fixed pair layout.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch<S: Scalar> {
    data: Vec<S>,
    pairs: usize,
    dim: usize,
}

impl<S: Scalar> EmbeddingBatch<S> {
    /// Stacks reflectance embeddings over depth embeddings, no reordering.
    pub fn from_views(z_ref: &Tensor<S>, z_dep: &Tensor<S>) -> Result<Self> {
        if z_ref.rank() != 2 || z_dep.rank() != 2 || z_ref.shape() != z_dep.shape() {
            return Err(Error::shape(
                "embedding_batch",
                format!(
                    "view embeddings must be equal-shape matrices, got {:?} and {:?}",
                    z_ref.shape(),
                    z_dep.shape()
                ),
            ));
        }
        let pairs = z_ref.dim(0);
        let dim = z_ref.dim(1);
        let mut data = Vec::with_capacity(2 * pairs * dim);
        data.extend_from_slice(z_ref.values());
        data.extend_from_slice(z_dep.values());
        Ok(EmbeddingBatch { data, pairs, dim })
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        2 * self.pairs
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// The positive partner of a row under the pair layout.
    pub fn positive_of(&self, row: usize) -> usize {
        (row + self.pairs) % (2 * self.pairs)
    }

    /// Recovers the two stacked blocks exactly as they went in.
    pub fn split(&self) -> (Tensor<S>, Tensor<S>) {
        let half = self.pairs * self.dim;
        let z_ref = Tensor::new(vec![self.pairs, self.dim], self.data[..half].to_vec())
            .expect("block of a valid batch");
        let z_dep = Tensor::new(vec![self.pairs, self.dim], self.data[half..].to_vec())
            .expect("block of a valid batch");
        (z_ref, z_dep)
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![2 * self.pairs, self.dim], self.data.clone()).expect("valid batch")
    }
}

/// All-pairs cosine similarities of an already row-normalized matrix.
///
/// Rejects inputs whose rows are further than 1e-6 from unit norm, reporting
/// the largest deviation.
pub fn similarity_matrix<S: Scalar>(z_normalized: &Tensor<S>) -> Result<Tensor<S>> {
    if z_normalized.rank() != 2 {
        return Err(Error::shape(
            "similarity_matrix",
            format!("expected a matrix, got {:?}", z_normalized.shape()),
        ));
    }
    let rows = z_normalized.dim(0);
    let cols = z_normalized.dim(1);
    let mut max_dev: f64 = 0.0;
    for r in 0..rows {
        let row = &z_normalized.values()[r * cols..(r + 1) * cols];
        let norm: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        max_dev = max_dev.max((norm - 1.0).abs());
    }
    if max_dev > NORM_TOLERANCE {
        return Err(Error::NotNormalized {
            max_deviation: max_dev,
        });
    }
    let values = crate::ops::matmul(
        z_normalized.values(),
        z_normalized.values(),
        rows,
        cols,
        rows,
        true,
    );
    Tensor::new(vec![rows, rows], values)
}

/// Tape node ids produced by [`nt_xent_graph`].
#[derive(Clone, Copy, Debug)]
pub struct NtXentNodes {
    /// The 2N directed per-pair losses, shape `[2N, 1]`.
    pub per_pair: TensorId,
    /// Their mean, shape `[1]`.
    pub loss: TensorId,
}

/// Builds the differentiable NT-Xent loss over a stacked `[2N, D]`
/// embedding tensor already resident on the tape. Rows are L2-normalized
/// internally, so gradient flows through the normalization.
pub fn nt_xent_graph<S: Scalar>(
    tape: &mut Tape<S>,
    embeddings: TensorId,
    pairs: usize,
    temperature: f64,
) -> Result<NtXentNodes> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::attr(
            "nt_xent",
            format!("temperature {temperature} must be positive and finite"),
        ));
    }
    if pairs == 0 {
        return Err(Error::attr("nt_xent", "at least one pair required"));
    }
    let rows = 2 * pairs;
    let shape = tape.shape(embeddings)?.to_vec();
    if shape.len() != 2 || shape[0] != rows {
        return Err(Error::shape(
            "nt_xent",
            format!("expected [{rows}, D] embeddings, got {shape:?}"),
        ));
    }

    // Self-exclusion mask and positive-pair selector as constant tensors.
    let mut mask = vec![S::zero(); rows * rows];
    let mut positives = vec![S::zero(); rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = S::of(SELF_MASK);
        let p = (i + pairs) % rows;
        positives[i * rows + p] = S::one();
    }
    let mask = tape.constant(Tensor::new(vec![rows, rows], mask)?);
    let positives = tape.constant(Tensor::new(vec![rows, rows], positives)?);
    let ones_col = tape.constant(Tensor::filled(vec![rows, 1], S::one()));

    let normalized = tape.row_l2_normalize(embeddings)?;
    let similarities = tape.matmul_nt(normalized, normalized)?;
    let scaled = tape.scale(similarities, 1.0 / temperature)?;
    let masked = tape.add(scaled, mask)?;
    let log_probs = tape.log_softmax(masked)?;
    let picked = tape.mul(log_probs, positives)?;
    let row_sums = tape.matmul(picked, ones_col)?;
    let per_pair = tape.scale(row_sums, -1.0)?;
    let loss = tape.reduce_mean(per_pair)?;
    Ok(NtXentNodes { per_pair, loss })
}

#[derive(Clone, Debug)]
pub struct NtXentOutput<S: Scalar> {
    /// Mean over all 2N directed pair losses, covering both view orders.
    pub loss: S,
    /// Directed per-pair losses in row order.
    pub per_pair: Vec<S>,
    /// True when N = 1: no negatives exist, so the loss carries no
    /// contrastive signal. Accepted for tests; the trainer enforces N >= 2.
    pub degenerate: bool,
}

/// Value-level NT-Xent loss of a batch. Runs the same graph the trainer
/// differentiates, on a scratch tape.
pub fn nt_xent_loss<S: Scalar>(
    batch: &EmbeddingBatch<S>,
    cfg: &ContrastiveConfig,
) -> Result<NtXentOutput<S>> {
    let mut tape = Tape::new();
    let z = tape.leaf(batch.to_tensor());
    let nodes = nt_xent_graph(&mut tape, z, batch.pairs(), cfg.temperature)?;
    Ok(NtXentOutput {
        loss: tape.tensor(nodes.loss)?.item(),
        per_pair: tape.values(nodes.per_pair)?.to_vec(),
        degenerate: batch.pairs() == 1,
    })
}
