//! Keypoint prediction with optional flip test, heatmap shift and quarter offset.

use serde::{Deserialize, Serialize};

use super::{TrainError, TrainSample};
use crate::annotations::PoseAnnotation;
use crate::codec::{decode_heatmaps, flip_merge, mirror_width};
use crate::metrics::{pckh, PckhReport};
use crate::model::Model;
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 32;

/// Post-processing switches; all off gives a single plain forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub flip_test: bool,
    /// Moves the flipped heatmaps one pixel toward +x before averaging.
    pub heatmap_shift: bool,
    pub quarter_offset: bool,
}

impl EvalOptions {
    pub fn all() -> Self {
        Self {
            flip_test: true,
            heatmap_shift: true,
            quarter_offset: true,
        }
    }
}

/// Final-stage heatmaps for a batch, merged with the flipped pass if requested.
pub fn predict_heatmaps(
    model: &Model,
    images: &Tensor,
    flip_pairs: &[(usize, usize)],
    opts: EvalOptions,
) -> Result<Tensor, TrainError> {
    let hm = model.predict(images)?.pop().expect("at least one stage");
    if !opts.flip_test {
        return Ok(hm);
    }
    let flipped = model.predict(&mirror_width(images))?.pop().expect("at least one stage");
    let shift = usize::from(opts.heatmap_shift);
    Ok(flip_merge(&hm, &flipped, flip_pairs, shift)?)
}

/// Predicted poses in input pixels. Each joint's score is its peak value and
/// the pose score is their mean.
pub fn predict_poses(
    model: &Model,
    samples: &[TrainSample],
    flip_pairs: &[(usize, usize)],
    opts: EvalOptions,
) -> Result<Vec<PoseAnnotation>, TrainError> {
    let [in_h, in_w] = model.config.input_hw;
    let [hm_h, hm_w] = model.config.heatmap_hw();
    let (sx, sy) = (in_w as f32 / hm_w as f32, in_h as f32 / hm_h as f32);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let batch = Tensor::stack(&images)?;
        let hm = predict_heatmaps(model, &batch, flip_pairs, opts)?;
        for (pose, s) in decode_heatmaps(&hm, opts.quarter_offset).into_iter().zip(chunk) {
            let score = pose.iter().map(|j| j[2]).sum::<f32>() / pose.len() as f32;
            let joints = pose.iter().map(|j| [j[0] * sx, j[1] * sy, j[2]]).collect();
            let mut p = PoseAnnotation::new(joints, s.annotation.norm);
            p.score = Some(score);
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub pckh: PckhReport,
    #[serde(skip)]
    pub predictions: Vec<PoseAnnotation>,
}

/// PCKh@0.5 of the model on `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[TrainSample],
    flip_pairs: &[(usize, usize)],
    opts: EvalOptions,
) -> Result<EvalReport, TrainError> {
    let predictions = predict_poses(model, samples, flip_pairs, opts)?;
    let gts: Vec<PoseAnnotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    Ok(EvalReport {
        options: opts,
        pckh: pckh(&predictions, &gts, 0.5)?,
        predictions,
    })
}
