//! Loss and penalty kernels for the encoder and the masking network.
//!
//! Every kernel exists in two forms: a graph builder over batched tensors
//! (`*_var`, used during training and differentiated by the tape) and a
//! scalar entry point over validated single-item types. The scalar forms
//! are thin wrappers that evaluate the graph builders in `f64`.

use seqmask_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A `[B, d]` batch of embeddings with `B >= 2` and finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T = f64> {
    vectors: Tensor<T>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        ensure!(vectors.ndim() == 2, "embeddings must be a [B, d] matrix, got {:?}", vectors.shape());
        ensure!(vectors.shape()[0] >= 2, "contrastive loss needs B >= 2, got B = {}", vectors.shape()[0]);
        ensure!(vectors.shape()[1] >= 1, "embedding dimension must be positive");
        if !vectors.is_finite() {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        Ok(Self { vectors })
    }

    pub fn batch_size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.vectors
    }
}

/// One `H x W` occlusion map with values in `[0, 1]`; 1 removes the pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, "mask must be at least 1x1");
        ensure!(
            values.len() == height * width,
            "mask has {} values, expected {height}x{width}",
            values.len()
        );
        ensure!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            "mask values must lie in [0, 1]"
        );
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// As a `[1, H, W]` batch tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [1, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

/// Regularizer weights, the budget target and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub budget_weight: f64,
    pub overlap_weight: f64,
    pub consistency_weight: f64,
    pub budget_b: f64,
    pub temperature_tau: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            budget_weight: 1.0,
            overlap_weight: 1e-4,
            consistency_weight: 1e-4,
            budget_b: 0.25,
            temperature_tau: 0.2,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.budget_b > 0.0 && self.budget_b < 1.0,
            "budget b must lie in (0, 1), got {}",
            self.budget_b
        );
        ensure!(self.temperature_tau > 0.0, "temperature must be positive");
        ensure!(
            self.budget_weight >= 0.0 && self.overlap_weight >= 0.0 && self.consistency_weight >= 0.0,
            "penalty weights must be nonnegative"
        );
        Ok(())
    }
}

/// Per-mask terms entering the adversary objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotTerms {
    pub contrastive: f64,
    pub budget: f64,
    pub overlap: f64,
    pub consistency: f64,
}

/// Averages over the N masks of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub budget: f64,
    pub overlap: f64,
    pub consistency: f64,
    pub adversary_objective: f64,
    pub encoder_objective: f64,
}

// ---------------------------------------------------------------------------
// graph builders

/// Symmetric NT-Xent over the `2B` views of `za: [B, d]` and `zb: [B, d]`.
///
/// Rows are L2-normalized first. Each anchor's positive is its paired view;
/// the normalizer runs over every other view (positive included). Returns the
/// mean over all `2B` anchors as a scalar node.
pub fn nt_xent_var<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, tau: f64) -> Var {
    let b = g.value(za).shape()[0];
    let z = g.concat_rows(&[za, zb]);
    let zn = g.l2_normalize_rows(z);
    let sim = g.matmul_nt(zn, zn);
    let logits = g.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect();
    let per_anchor = g.cross_entropy_rows(logits, &targets, true);
    g.mean(per_anchor)
}

/// Batch mean of `(mean(m_i) - b)^2` for `masks: [B, H, W]`.
pub fn budget_penalty_var<T: Scalar>(g: &mut Graph<T>, masks: Var, b: f64) -> Var {
    let means = g.mean_per_item(masks);
    let centered = g.add_scalar(means, -b);
    let sq = g.square(centered);
    g.mean(sq)
}

/// Batch mean of `(1 / HW) * sum(m_i * prior_i)`; `prior_sum` is the
/// pixelwise sum of previously generated masks. `None` means no prior masks.
pub fn overlap_penalty_var<T: Scalar>(g: &mut Graph<T>, mask: Var, prior_sum: Option<Var>) -> Var {
    match prior_sum {
        None => g.constant(Tensor::scalar(T::zero())),
        Some(prior) => {
            let prod = g.mul(mask, prior);
            let per = g.mean_per_item(prod);
            g.mean(per)
        }
    }
}

/// Batch mean of `||m_i - pool3(m_i)||^2` with valid-neighbour 3x3 average pooling.
pub fn consistency_penalty_var<T: Scalar>(g: &mut Graph<T>, masks: Var) -> Var {
    let pooled = g.avg_pool3(masks);
    let diff = g.sub(masks, pooled);
    let sq = g.square(diff);
    let per = g.sum_per_item(sq);
    g.mean(per)
}

// ---------------------------------------------------------------------------
// scalar entry points

fn check_rows_nonzero<T: Scalar>(z: &EmbeddingBatch<T>) -> Result<()> {
    let d = z.dim();
    for (i, row) in z.tensor().data().chunks(d).enumerate() {
        if row.iter().all(|v| *v == T::zero()) {
            return Err(Error::Numeric(format!("embedding row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Masked NT-Xent between the unmasked-view embeddings `za` and the
/// masked-view embeddings `zb`.
pub fn nt_xent_masked(za: &EmbeddingBatch, zb: &EmbeddingBatch, tau: f64) -> Result<f64> {
    ensure!(
        za.tensor().shape() == zb.tensor().shape(),
        "embedding batches differ in shape: {:?} vs {:?}",
        za.tensor().shape(),
        zb.tensor().shape()
    );
    ensure!(tau > 0.0, "temperature must be positive, got {tau}");
    check_rows_nonzero(za)?;
    check_rows_nonzero(zb)?;
    let mut g = Graph::new();
    let a = g.constant(za.tensor().clone());
    let b = g.constant(zb.tensor().clone());
    let loss = nt_xent_var(&mut g, a, b, tau);
    Ok(g.value(loss).item())
}

/// `(mean(m) - b)^2`.
pub fn budget_penalty(m: &Mask, b: f64) -> Result<f64> {
    ensure!(b > 0.0 && b < 1.0, "budget b must lie in (0, 1), got {b}");
    let mut g = Graph::<f64>::new();
    let mv = g.constant(m.to_tensor());
    let p = budget_penalty_var(&mut g, mv, b);
    Ok(g.value(p).item())
}

/// `(1 / HW) * <m, sum(prior)>`; zero for an empty prior.
pub fn overlap_penalty(m: &Mask, prior: &[Mask]) -> Result<f64> {
    for p in prior {
        ensure!(
            (p.height, p.width) == (m.height, m.width),
            "prior mask is {}x{}, expected {}x{}",
            p.height,
            p.width,
            m.height,
            m.width
        );
    }
    let mut g = Graph::<f64>::new();
    let mv = g.constant(m.to_tensor());
    let prior_sum = if prior.is_empty() {
        None
    } else {
        let vars: Vec<Var> = prior.iter().map(|p| g.constant(p.to_tensor())).collect();
        Some(g.add_n(&vars))
    };
    let p = overlap_penalty_var(&mut g, mv, prior_sum);
    Ok(g.value(p).item())
}

/// `||m - pool3(m)||^2`.
pub fn consistency_penalty(m: &Mask) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let mv = g.constant(m.to_tensor());
    let p = consistency_penalty_var(&mut g, mv);
    Ok(g.value(p).item())
}

/// Mean of the per-mask contrastive losses: the quantity the encoder minimizes.
pub fn encoder_objective(per_mask_losses: &[f64]) -> Result<f64> {
    ensure!(!per_mask_losses.is_empty(), "encoder objective needs at least one mask");
    Ok(per_mask_losses.iter().sum::<f64>() / per_mask_losses.len() as f64)
}

/// Compose the masker's (maximized) objective:
/// `(1/N) sum_i [c_i - wb*budget_i - wo*overlap_i - wc*consistency_i]`.
pub fn adversary_objective(per_mask: &[SlotTerms], w: &PenaltyWeights) -> Result<LossBreakdown> {
    ensure!(!per_mask.is_empty(), "adversary objective needs at least one mask");
    let n = per_mask.len() as f64;
    let avg = |f: fn(&SlotTerms) -> f64| per_mask.iter().map(f).sum::<f64>() / n;
    let adversary = per_mask
        .iter()
        .map(|t| {
            t.contrastive - w.budget_weight * t.budget - w.overlap_weight * t.overlap - w.consistency_weight * t.consistency
        })
        .sum::<f64>()
        / n;
    let contrastive = avg(|t| t.contrastive);
    Ok(LossBreakdown {
        contrastive,
        budget: avg(|t| t.budget),
        overlap: avg(|t| t.overlap),
        consistency: avg(|t| t.consistency),
        adversary_objective: adversary,
        encoder_objective: contrastive,
    })
}
