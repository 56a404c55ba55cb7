//! Visibility-masked heatmap loss and its multi-stage average.

use crate::error::{mismatch, Result};
use crate::exec::Exec;
use crate::ops;
use crate::tensor::Tensor;

/// `1/(2K) · mean_n Σ_k ω_nk ‖pred_nk − gt_nk‖²` with `vis[n*K + k] = ω_nk`.
pub fn heatmap_mse_loss(pred: &Tensor, gt: &Tensor, vis: &[bool]) -> Result<f32> {
    ops::heatmap_mse(pred, gt, vis)
}

/// Arithmetic mean of per-stage losses, accumulated in f64.
pub fn mean_stage_loss(per_stage: &[f32]) -> f32 {
    (per_stage.iter().map(|&l| l as f64).sum::<f64>() / per_stage.len() as f64) as f32
}

/// Every stage against the same target and mask; returns `(total, per_stage)`.
pub fn multistage_loss(stage_preds: &[Tensor], gt: &Tensor, vis: &[bool]) -> Result<(f32, Vec<f32>)> {
    if stage_preds.is_empty() {
        return Err(mismatch("multistage_loss", "no stages"));
    }
    let per_stage = stage_preds
        .iter()
        .map(|p| heatmap_mse_loss(p, gt, vis))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean_stage_loss(&per_stage), per_stage))
}

/// Executor form of [`multistage_loss`], used for training graphs.
pub fn multistage_loss_exec<E: Exec>(
    ex: &mut E,
    stage_preds: &[E::V],
    gt: &Tensor,
    vis: &[bool],
) -> Result<(E::V, Vec<E::V>)> {
    if stage_preds.is_empty() {
        return Err(mismatch("multistage_loss", "no stages"));
    }
    let per_stage = stage_preds
        .iter()
        .map(|p| ex.heatmap_mse(p, gt, vis))
        .collect::<Result<Vec<_>>>()?;
    let mut total = per_stage[0].clone();
    for l in &per_stage[1..] {
        total = ex.add(&total, l)?;
    }
    let total = ex.scale(&total, 1.0 / per_stage.len() as f32);
    Ok((total, per_stage))
}
