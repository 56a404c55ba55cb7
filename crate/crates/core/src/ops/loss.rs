//! Visibility-masked heatmap MSE.

use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

fn check(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(mismatch(
            "heatmap_mse",
            format!("{:?} vs {:?}", pred.dims(), target.dims()),
        ));
    }
    let [n, k, _, _] = pred.dims();
    if mask.len() != n * k {
        return Err(mismatch(
            "heatmap_mse",
            format!("mask has {} entries for {n}x{k} maps", mask.len()),
        ));
    }
    Ok(())
}

/// `1/(2K) · mean_n Σ_k ω_nk ‖pred_nk − target_nk‖²`, with `mask[n*K + k] = ω_nk`.
pub fn heatmap_mse(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f32> {
    check(pred, target, mask)?;
    let [n, k, _, _] = pred.dims();
    let mut total = 0.0f64;
    for b in 0..n {
        for j in 0..k {
            if !mask[b * k + j] {
                continue;
            }
            total += pred
                .plane(b, j)
                .iter()
                .zip(target.plane(b, j))
                .map(|(&p, &t)| ((p - t) as f64).powi(2))
                .sum::<f64>();
        }
    }
    Ok((total / (2.0 * k as f64 * n as f64)) as f32)
}

pub fn heatmap_mse_backward(pred: &Tensor, target: &Tensor, mask: &[bool], gout: f32) -> Tensor {
    let [n, k, h, w] = pred.dims();
    let coef = gout / (k * n) as f32;
    let mut g = vec![0.0f32; pred.numel()];
    for b in 0..n {
        for j in 0..k {
            if !mask[b * k + j] {
                continue;
            }
            let off = (b * k + j) * h * w;
            for i in off..off + h * w {
                g[i] = coef * (pred.data()[i] - target.data()[i]);
            }
        }
    }
    Tensor::from_parts(pred.dims(), g)
}
