//! PCKh and OKS-based average precision.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::annotations::{AnnotationSet, PoseAnnotation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("keypoint count mismatch: {pred} predicted vs {gt} annotated")]
    KeypointCount { pred: usize, gt: usize },
    #[error("{0} predictions for {1} annotations")]
    PoseCount(usize, usize),
    #[error("OKS is undefined without annotated joints")]
    NoAnnotatedJoints,
    #[error("{0} OKS constants for {1} joints")]
    ConstantCount(usize, usize),
}

/// OKS thresholds 0.50, 0.55, …, 0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Per-keypoint σ of the 17-keypoint COCO person skeleton.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089,
    0.089,
];

/// Per-keypoint falloff constants `k_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OksConstants(pub Vec<f64>);

impl OksConstants {
    /// COCO constants, `k_i = 2σ_i`.
    pub fn coco() -> Self {
        Self(COCO_SIGMAS.iter().map(|s| 2.0 * s).collect())
    }

    pub fn uniform(k: usize, value: f64) -> Self {
        Self(vec![value; k])
    }

    /// COCO constants for 17 joints, otherwise a uniform 0.1.
    pub fn for_keypoints(k: usize) -> Self {
        if k == COCO_SIGMAS.len() {
            Self::coco()
        } else {
            Self::uniform(k, 0.1)
        }
    }
}

/// Percentages over annotated joints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PckhReport {
    /// `None` for joints never annotated.
    pub per_joint: Vec<Option<f64>>,
    pub correct: Vec<usize>,
    pub annotated: Vec<usize>,
    /// All correct joints over all annotated joints.
    pub total: f64,
}

impl PckhReport {
    /// Pooled percentage of a group of joint indices.
    pub fn group(&self, joints: &[usize]) -> Option<f64> {
        let (c, a) = joints
            .iter()
            .fold((0, 0), |(c, a), &j| (c + self.correct[j], a + self.annotated[j]));
        (a > 0).then(|| 100.0 * c as f64 / a as f64)
    }
}

fn dist(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    (dx * dx + dy * dy).sqrt()
}

/// A joint is correct when annotated and `‖pred − gt‖ < threshold · norm`.
pub fn pckh(preds: &[PoseAnnotation], gts: &[PoseAnnotation], threshold: f64) -> Result<PckhReport, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::PoseCount(preds.len(), gts.len()));
    }
    let k = gts.first().map_or(0, |g| g.joints.len());
    let mut correct = vec![0usize; k];
    let mut annotated = vec![0usize; k];
    for (p, g) in preds.iter().zip(gts) {
        if p.joints.len() != g.joints.len() || g.joints.len() != k {
            return Err(MetricError::KeypointCount {
                pred: p.joints.len(),
                gt: g.joints.len(),
            });
        }
        let limit = threshold * g.norm as f64;
        for j in 0..k {
            if !g.visible(j) {
                continue;
            }
            annotated[j] += 1;
            if dist(p.joints[j], g.joints[j]) < limit {
                correct[j] += 1;
            }
        }
    }
    let per_joint = correct
        .iter()
        .zip(&annotated)
        .map(|(&c, &a)| (a > 0).then(|| 100.0 * c as f64 / a as f64))
        .collect();
    let (c, a): (usize, usize) = (correct.iter().sum(), annotated.iter().sum());
    Ok(PckhReport {
        per_joint,
        correct,
        annotated,
        total: if a > 0 { 100.0 * c as f64 / a as f64 } else { 0.0 },
    })
}

/// `Σ_{v_i>0} exp(−d_i² / (2 s² k_i²)) / #{v_i > 0}` with `s = gt.norm`.
pub fn oks(pred: &PoseAnnotation, gt: &PoseAnnotation, consts: &OksConstants) -> Result<f64, MetricError> {
    let k = gt.joints.len();
    if pred.joints.len() != k {
        return Err(MetricError::KeypointCount {
            pred: pred.joints.len(),
            gt: k,
        });
    }
    if consts.0.len() != k {
        return Err(MetricError::ConstantCount(consts.0.len(), k));
    }
    let s2 = (gt.norm as f64).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..k {
        if !gt.visible(j) {
            continue;
        }
        let d = dist(pred.joints[j], gt.joints[j]);
        sum += (-(d * d) / (2.0 * s2 * consts.0[j].powi(2))).exp();
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::NoAnnotatedJoints);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: f64,
    pub ar: f64,
    pub per_threshold: Vec<ThresholdResult>,
}

/// 101-point interpolated precision of a score-sorted TP/FP sequence.
fn interpolated_ap(tps: &[bool], num_gt: usize) -> (f64, f64) {
    if num_gt == 0 {
        return (0.0, 0.0);
    }
    let mut precision = Vec::with_capacity(tps.len());
    let mut recall = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (i, &t) in tps.iter().enumerate() {
        tp += t as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at any equal or higher recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < level {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

/// Average precision over the ten OKS thresholds.
///
/// Within each image, predictions are taken by descending score and each one
/// claims the unmatched ground truth with the highest OKS, if that OKS reaches
/// the threshold. Ground truths without annotated joints are ignored.
pub fn ap_over_oks(preds: &AnnotationSet, gts: &AnnotationSet, consts: &OksConstants) -> Result<ApReport, MetricError> {
    let empty = Vec::new();
    // (score, image order, pred order, OKS against each gt of the image)
    let mut dets: Vec<(f64, usize, usize, Vec<f64>)> = Vec::new();
    let mut num_gt = 0usize;
    let images: BTreeMap<&String, ()> = preds.0.keys().chain(gts.0.keys()).map(|k| (k, ())).collect();
    let mut gt_counts = Vec::new();
    for (ii, image) in images.keys().enumerate() {
        let g: Vec<&PoseAnnotation> = gts
            .0
            .get(*image)
            .unwrap_or(&empty)
            .iter()
            .filter(|a| a.visible_count() > 0)
            .collect();
        num_gt += g.len();
        gt_counts.push(g.len());
        for (pi, p) in preds.0.get(*image).unwrap_or(&empty).iter().enumerate() {
            let o = g.iter().map(|gt| oks(p, gt, consts)).collect::<Result<Vec<_>, _>>()?;
            dets.push((p.score.unwrap_or(1.0) as f64, ii, pi, o));
        }
    }
    // Stable descending score order; ties keep image then prediction order.
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut per_threshold = Vec::with_capacity(OKS_THRESHOLDS.len());
    for &t in &OKS_THRESHOLDS {
        let mut taken: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
        let mut tps = Vec::with_capacity(dets.len());
        for (_, ii, _, o) in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, &v) in o.iter().enumerate() {
                if taken[*ii][gi] || v < t {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[*ii][gi] = true;
            }
            tps.push(best.is_some());
        }
        let (ap, recall) = interpolated_ap(&tps, num_gt);
        per_threshold.push(ThresholdResult {
            threshold: t,
            ap,
            recall,
        });
    }
    let n = per_threshold.len() as f64;
    Ok(ApReport {
        ap: per_threshold.iter().map(|r| r.ap).sum::<f64>() / n,
        ar: per_threshold.iter().map(|r| r.recall).sum::<f64>() / n,
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(joints: &[[f32; 3]], norm: f32) -> PoseAnnotation {
        PoseAnnotation::new(joints.to_vec(), norm)
    }

    #[test]
    fn pckh_threshold_straddle() {
        let gt = pose(&[[10.0, 10.0, 1.0]], 10.0);
        let far = pose(&[[16.0, 10.0, 1.0]], 10.0);
        let near = pose(&[[14.0, 10.0, 1.0]], 10.0);
        assert_eq!(pckh(&[far], std::slice::from_ref(&gt), 0.5).unwrap().total, 0.0);
        assert_eq!(pckh(&[near], std::slice::from_ref(&gt), 0.5).unwrap().total, 100.0);
        let exact = pose(&[[15.0, 10.0, 1.0]], 10.0);
        assert_eq!(pckh(&[exact], &[gt], 0.5).unwrap().total, 0.0);
    }

    #[test]
    fn pckh_total_is_pooled() {
        let gts = vec![
            pose(&[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], 1.0),
            pose(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]], 1.0),
            pose(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]], 1.0),
        ];
        let mut preds = gts.clone();
        preds[0].joints[1] = [9.0, 9.0, 1.0];
        let r = pckh(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.per_joint, vec![Some(100.0), Some(0.0)]);
        assert_eq!(r.total, 75.0);
        assert_eq!(r.group(&[0, 1]), Some(75.0));
    }

    #[test]
    fn oks_closed_form() {
        let k = OksConstants(vec![0.1, 0.1]);
        let gt = pose(&[[0.0, 0.0, 1.0], [5.0, 5.0, 0.0]], 10.0);
        assert_eq!(oks(&gt, &gt, &k).unwrap(), 1.0);
        // d² = 2·s²·k² = 2
        let p = pose(&[[2f32.sqrt(), 0.0, 1.0], [100.0, 0.0, 1.0]], 10.0);
        assert!((oks(&p, &gt, &k).unwrap() - (-1f64).exp()).abs() < 1e-6);
        let none = pose(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 1.0);
        assert_eq!(oks(&none, &none, &k), Err(MetricError::NoAnnotatedJoints));
    }

    #[test]
    fn perfect_predictions() {
        let mut gts = AnnotationSet::default();
        gts.0.insert(
            "a".into(),
            vec![pose(&[[1.0, 2.0, 1.0]], 5.0), pose(&[[9.0, 9.0, 1.0]], 5.0)],
        );
        gts.0.insert("b".into(), vec![pose(&[[3.0, 3.0, 1.0]], 5.0)]);
        let r = ap_over_oks(&gts, &gts, &OksConstants::uniform(1, 0.1)).unwrap();
        assert_eq!((r.ap, r.ar), (1.0, 1.0));
    }

    #[test]
    fn single_match_at_oks_point_seven_two() {
        let k = OksConstants::uniform(1, 0.1);
        let gt = pose(&[[0.0, 0.0, 1.0]], 10.0);
        // exp(−d²/2) = 0.72
        let d = (-2.0 * 0.72f64.ln()).sqrt() as f32;
        let mut p = pose(&[[d, 0.0, 1.0]], 10.0);
        p.score = Some(0.9);
        assert!((oks(&p, &gt, &k).unwrap() - 0.72).abs() < 1e-6);
        let mut gts = AnnotationSet::default();
        gts.0.insert("x".into(), vec![gt]);
        let mut preds = AnnotationSet::default();
        preds.0.insert("x".into(), vec![p]);
        let r = ap_over_oks(&preds, &gts, &k).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interpolation_envelope() {
        // TP, FP, TP with 2 gts: precisions 1, .5, .667; recalls .5, .5, 1.
        let (ap, rec) = interpolated_ap(&[true, false, true], 2);
        let expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - expected).abs() < 1e-12);
        assert_eq!(rec, 1.0);
    }
}
