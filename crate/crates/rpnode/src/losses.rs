//! Training losses. The segmentation loss is pixel-mean cross-entropy; two
//! auxiliary terms tie the Gaussian companions to the clean episode: a cluster
//! loss pulling perturbed support features toward their clean counterparts and
//! a consistency loss holding companion query predictions to the clean ground
//! truth. Total: `ce + alpha * consistency + beta * cluster`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::protoseg::{MaskTensor, ProbabilityMap};

/// Probabilities are floored here before the log so that a fully confident
/// wrong prediction yields a large but finite loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the consistency loss.
    pub alpha: f64,
    /// Weight of the cluster loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.001, beta: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("weights.alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("weights.beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Maps ground-truth labels to probability channels. Every label must appear
/// in `class_ids`; an unknown label means the episode was assembled wrong.
fn target_channels(class_ids: &[u8], gt: &MaskTensor) -> Result<Vec<usize>> {
    gt.labels()
        .iter()
        .map(|l| {
            class_ids.iter().position(|c| c == l).ok_or_else(|| {
                Error::ClassMismatch(format!("ground-truth label {l} is not in the episode class set {class_ids:?}"))
            })
        })
        .collect()
}

/// Pixel-mean cross-entropy of a probability map var against a ground-truth
/// mask. `probs` is `[n, h, w]` aligned with `class_ids`.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, class_ids: &[u8], gt: &MaskTensor) -> Result<Var> {
    let s = tape.value(probs).shape();
    if s.len() != 3 || s[0] != class_ids.len() || s[1] != gt.height() || s[2] != gt.width() {
        return Err(Error::ShapeMismatch {
            context: "cross entropy".into(),
            expected: vec![class_ids.len(), gt.height(), gt.width()],
            got: s.to_vec(),
        });
    }
    let targets = target_channels(class_ids, gt)?;
    Ok(tape.cross_entropy_mean(probs, targets, PROB_FLOOR))
}

/// Consistency loss: cross-entropy of the Gaussian companion's prediction
/// against the clean ground truth. Identical math to [`cross_entropy_on_tape`];
/// the separate name marks which prediction it is applied to.
pub fn consistency_loss_on_tape(tape: &mut Tape, companion_probs: Var, class_ids: &[u8], gt: &MaskTensor) -> Result<Var> {
    cross_entropy_on_tape(tape, companion_probs, class_ids, gt)
}

/// Cluster loss: `1 - mean_k cos(clean_k, perturbed_k)` over flattened support
/// feature tensors. Ranges over `[0, 2]`.
pub fn cluster_loss_on_tape(tape: &mut Tape, clean: &[Var], perturbed: &[Var]) -> Result<Var> {
    if clean.len() != perturbed.len() {
        return Err(Error::ShapeMismatch {
            context: "cluster loss shots".into(),
            expected: vec![clean.len()],
            got: vec![perturbed.len()],
        });
    }
    if clean.is_empty() {
        return Err(Error::Config("cluster loss needs at least one feature pair".into()));
    }
    for (&a, &b) in clean.iter().zip(perturbed) {
        if tape.value(a).shape() != tape.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: "cluster loss pair".into(),
                expected: tape.value(a).shape().to_vec(),
                got: tape.value(b).shape().to_vec(),
            });
        }
    }
    let sims: Vec<Var> = clean.iter().zip(perturbed).map(|(&a, &b)| tape.cosine_flat(a, b)).collect();
    let mut acc = sims[0];
    for &s in &sims[1..] {
        acc = tape.add(acc, s);
    }
    let mean = tape.div_scalar(acc, sims.len() as f64);
    Ok(tape.affine(mean, -1.0, 1.0))
}

/// Weighted sum of the three terms on the tape.
pub fn total_loss_on_tape(tape: &mut Tape, ce: Var, consistency: Var, cluster: Var, weights: &LossWeights) -> Var {
    let t = tape.add_scaled(ce, consistency, weights.alpha);
    tape.add_scaled(t, cluster, weights.beta)
}

/// Value-level cross-entropy for evaluation and tests.
pub fn cross_entropy(map: &ProbabilityMap, gt: &MaskTensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(map.probs.clone());
    let ce = cross_entropy_on_tape(&mut tape, p, &map.class_ids, gt)?;
    Ok(tape.value(ce).item())
}

/// Value-level cluster loss.
pub fn cluster_loss(clean: &[Tensor], perturbed: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<Var> = clean.iter().map(|t| tape.leaf(t.clone())).collect();
    let b: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = cluster_loss_on_tape(&mut tape, &a, &b)?;
    Ok(tape.value(l).item())
}

/// Value-level total loss.
pub fn total_loss(ce: f64, consistency: f64, cluster: f64, weights: &LossWeights) -> f64 {
    ce + weights.alpha * consistency + weights.beta * cluster
}
