//! Training objective: drop-gated velocity regression plus patch-wise
//! alignment of projected hidden states to frozen features.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{arg, Result};
use crate::tensor::Matrix;

pub const DEFAULT_ALIGNMENT_WEIGHT: f64 = 0.5;

/// Which modalities contribute to the velocity loss for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMask {
    pub keep: Vec<bool>,
}

impl DropMask {
    pub fn keep_all(num_modalities: usize) -> Self {
        Self {
            keep: vec![true; num_modalities],
        }
    }

    pub fn kept(&self, m: usize) -> bool {
        self.keep[m]
    }
}

/// Non-droppable modalities are always kept; every droppable one is kept
/// independently with probability 0.5.
pub fn sample_drop_mask<R: Rng + ?Sized>(rng: &mut R, droppable: &[bool]) -> DropMask {
    DropMask {
        keep: droppable
            .iter()
            .map(|d| !d || rng.random_bool(0.5))
            .collect(),
    }
}

pub struct VelocityLoss {
    pub total: Var,
    /// Per-modality mean squared error; `None` when no sample kept it.
    pub per_modality: Vec<Option<f64>>,
    /// The per-modality terms that were summed into `total`.
    pub terms: Vec<Option<Var>>,
}

/// Sum over modalities of the MSE between prediction and target, restricted
/// to samples whose mask keeps that modality. Dropped rows are never read,
/// so they contribute exactly zero loss and gradient.
///
/// `preds[m]` and `targets[m]` are `(batch * rows_per_sample) x dim_m`.
pub fn velocity_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[Matrix],
    masks: &[DropMask],
    rows_per_sample: usize,
) -> Result<VelocityLoss> {
    if preds.len() != targets.len() {
        return arg(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        ));
    }
    let mut total = tape.constant(Matrix::scalar(0.0));
    let mut per_modality = Vec::with_capacity(preds.len());
    let mut terms = Vec::with_capacity(preds.len());
    for (m, (&pred, target)) in preds.iter().zip(targets).enumerate() {
        if tape.value(pred).shape() != target.shape() {
            return arg(format!(
                "modality {m}: prediction {:?} vs target {:?}",
                tape.value(pred).shape(),
                target.shape()
            ));
        }
        if target.rows() != masks.len() * rows_per_sample {
            return arg(format!(
                "{} rows for {} masks of {rows_per_sample} rows",
                target.rows(),
                masks.len()
            ));
        }
        let rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .filter(|(_, mask)| mask.kept(m))
            .flat_map(|(b, _)| b * rows_per_sample..(b + 1) * rows_per_sample)
            .collect();
        if rows.is_empty() {
            per_modality.push(None);
            terms.push(None);
            continue;
        }
        let term = if rows.len() == target.rows() {
            tape.mse(pred, target)
        } else {
            let kept = tape.gather_rows(pred, &rows);
            let mut sub = Vec::with_capacity(rows.len() * target.cols());
            for &r in &rows {
                sub.extend_from_slice(target.row(r));
            }
            let sub = Matrix::from_vec(rows.len(), target.cols(), sub);
            tape.mse(kept, &sub)
        };
        per_modality.push(Some(tape.value(term).item()));
        terms.push(Some(term));
        total = tape.add(total, term);
    }
    Ok(VelocityLoss {
        total,
        per_modality,
        terms,
    })
}

pub struct AlignmentLoss {
    pub loss: Var,
    /// Rows where either vector had zero norm (scored as similarity 0).
    pub degenerate_rows: usize,
}

/// Negative mean cosine similarity between projected hidden states and the
/// provider's features, patch by patch.
pub fn alignment_loss(tape: &mut Tape, projected: Var, features: &Matrix) -> Result<AlignmentLoss> {
    if tape.value(projected).shape() != features.shape() {
        return arg(format!(
            "projection {:?} vs features {:?}",
            tape.value(projected).shape(),
            features.shape()
        ));
    }
    let out = tape.neg_cosine_mean(projected, features);
    Ok(AlignmentLoss {
        loss: out.loss,
        degenerate_rows: out.degenerate_rows,
    })
}

/// `l_v + lambda * l_reg`.
pub fn total_loss(tape: &mut Tape, l_v: Var, l_reg: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return arg(format!("alignment weight {lambda} must be non-negative"));
    }
    if lambda == 0.0 {
        return Ok(l_v);
    }
    let reg = tape.scale(l_reg, lambda);
    Ok(tape.add(l_v, reg))
}
