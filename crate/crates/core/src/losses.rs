//! Training objectives over embeddings.
//!
//! All functions append to an existing [`Graph`] so the encoder's forward
//! pass and the loss share one tape. Prototype vectors taken from a
//! [`PrototypeMemory`] enter as constants; only the embeddings carry
//! gradient.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::ClassId;
use crate::error::{contract, Result};
use crate::protomem::PrototypeMemory;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_term: f64,
    pub contrastive_term: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

/// Graph handles for the pieces of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub contrastive: Option<Var>,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

impl LossTerms {
    pub fn report(&self, g: &Graph) -> Result<LossReport> {
        Ok(LossReport {
            total: g.scalar(self.total)?,
            ce_term: g.scalar(self.ce)?,
            contrastive_term: match self.contrastive {
                Some(v) => g.scalar(v)?,
                None => 0.0,
            },
            positive_pairs: self.positive_pairs,
            negative_pairs: self.negative_pairs,
        })
    }
}

/// Mean NLL of `targets` under the softmax over negative squared distances
/// from each embedding row to the rows of `prototypes`.
pub fn prototype_nll(g: &mut Graph, emb: Var, prototypes: Var, targets: &[usize]) -> Result<Var> {
    let d = g.sq_dist(emb, prototypes)?;
    let logits = g.scale(d, -1.0)?;
    g.softmax_nll(logits, targets)
}

/// Cross-entropy against the prototypes held in `memory` (treated as constants).
pub fn proto_cross_entropy(g: &mut Graph, emb: Var, labels: &[ClassId], memory: &PrototypeMemory) -> Result<Var> {
    let (classes, protos) = memory.prototype_matrix()?;
    let targets = labels
        .iter()
        .map(|k| classes.binary_search(k).map_err(|_| contract!("label {} has no prototype in memory", k)))
        .collect::<Result<Vec<_>>>()?;
    let p = g.input(&protos)?;
    prototype_nll(g, emb, p, &targets)
}

/// Margin contrastive loss averaged over all unordered pairs of rows.
///
/// Same-label pairs contribute their squared distance, different-label
/// pairs contribute `max(0, margin - squared distance)`. Returns the loss
/// together with the positive and negative pair counts. A batch with fewer
/// than two samples has no pairs and yields a constant zero.
pub fn contrastive(g: &mut Graph, emb: Var, labels: &[ClassId], margin: f64) -> Result<(Var, usize, usize)> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(contract!("contrastive margin must be positive, got {}", margin));
    }
    let n = labels.len();
    if g.shape(emb).first().copied() != Some(n) {
        return Err(contract!("{} labels for embeddings of shape {:?}", n, g.shape(emb)));
    }
    if n < 2 {
        log::warn!("contrastive loss on a batch of {} sample(s) has no pairs; returning 0", n);
        return Ok((g.constant_scalar(0.0)?, 0, 0));
    }
    let mut pos = vec![0.0; n * n];
    let mut neg = vec![0.0; n * n];
    let (mut np, mut nn) = (0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                pos[i * n + j] = 1.0;
                np += 1;
            } else {
                neg[i * n + j] = 1.0;
                nn += 1;
            }
        }
    }
    let pairs = (np + nn) as f64;
    let d = g.sq_dist(emb, emb)?;
    let pos_mask = g.input(&Tensor::matrix(n, n, pos)?)?;
    let neg_mask = g.input(&Tensor::matrix(n, n, neg)?)?;
    let pull = g.mul(d, pos_mask)?;
    let hinge = g.hinge_below(d, margin)?;
    let push = g.mul(hinge, neg_mask)?;
    let terms = g.add(pull, push)?;
    let s = g.sum(terms)?;
    Ok((g.scale(s, 1.0 / pairs)?, np, nn))
}

/// Cross-entropy plus, when `margin` is given, the contrastive term.
pub fn combined(
    g: &mut Graph,
    emb: Var,
    labels: &[ClassId],
    memory: &PrototypeMemory,
    margin: Option<f64>,
) -> Result<LossTerms> {
    let ce = proto_cross_entropy(g, emb, labels, memory)?;
    match margin {
        None => Ok(LossTerms { total: ce, ce, contrastive: None, positive_pairs: 0, negative_pairs: 0 }),
        Some(m) => {
            let (c, np, nn) = contrastive(g, emb, labels, m)?;
            let total = g.add(ce, c)?;
            Ok(LossTerms { total, ce, contrastive: Some(c), positive_pairs: np, negative_pairs: nn })
        }
    }
}
