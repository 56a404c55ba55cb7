//! Heatmap targets, peak decoding and flip-test merging.

use thiserror::Error;

use crate::annotations::PoseAnnotation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("heatmap dims {a:?} and {b:?} differ")]
    DimMismatch { a: [usize; 4], b: [usize; 4] },
    #[error("flip pair ({0}, {1}) out of range")]
    FlipPair(usize, usize),
}

/// True when `(x, y)` lies inside `[0, w-1] × [0, h-1]`.
pub fn in_bounds(x: f32, y: f32, hw: [usize; 2]) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (hw[1] - 1) as f32 && y <= (hw[0] - 1) as f32
}

/// Gaussian target maps `(1, K, h, w)` in heatmap pixels, plus the visibility mask.
///
/// Each map is normalized so its nearest-integer pixel is exactly 1. Joints with
/// `v = 0` or outside the map get an all-zero map and `false` in the mask.
pub fn encode_heatmaps(ann: &PoseAnnotation, hw: [usize; 2], sigma: f32) -> (Tensor, Vec<bool>) {
    let [h, w] = hw;
    let k = ann.joints.len();
    let mut maps = vec![0.0f32; k * h * w];
    let mut mask = vec![false; k];
    let denom = 2.0 * sigma * sigma;
    for (j, &[x, y, v]) in ann.joints.iter().enumerate() {
        if v <= 0.0 || !in_bounds(x, y, hw) {
            continue;
        }
        mask[j] = true;
        let near = (x - x.round()).powi(2) + (y - y.round()).powi(2);
        let plane = &mut maps[j * h * w..(j + 1) * h * w];
        for r in 0..h {
            let dy = (r as f32 - y).powi(2);
            for c in 0..w {
                let d = (c as f32 - x).powi(2) + dy;
                plane[r * w + c] = (-(d - near) / denom).exp();
            }
        }
    }
    (Tensor::from_parts([1, k, h, w], maps), mask)
}

/// Batch form of [`encode_heatmaps`]: `(N, K, h, w)` and an `N·K` mask.
pub fn encode_batch(anns: &[&PoseAnnotation], hw: [usize; 2], sigma: f32) -> (Tensor, Vec<bool>) {
    let mut data = Vec::new();
    let mut mask = Vec::new();
    let k = anns.first().map_or(0, |a| a.joints.len());
    for a in anns {
        let (t, m) = encode_heatmaps(a, hw, sigma);
        data.extend_from_slice(t.data());
        mask.extend(m);
    }
    (Tensor::from_parts([anns.len(), k, hw[0], hw[1]], data), mask)
}

/// Offset of the quarter-pixel refinement along one axis.
fn quarter_shift(prev: f32, next: f32) -> f32 {
    if next > prev {
        0.25
    } else if prev > next {
        -0.25
    } else {
        0.0
    }
}

/// Per sample, per keypoint `[x, y, score]`: first-occurrence argmax, score is the peak.
///
/// With `quarter_offset` the location moves 0.25 px toward the strictly larger
/// neighbour on each axis; ties and border peaks are left in place.
pub fn decode_heatmaps(maps: &Tensor, quarter_offset: bool) -> Vec<Vec<[f32; 3]>> {
    let [n, k, h, w] = maps.dims();
    (0..n)
        .map(|b| {
            (0..k)
                .map(|j| {
                    let p = maps.plane(b, j);
                    let mut best = 0;
                    for (i, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = i;
                        }
                    }
                    let (r, c) = (best / w, best % w);
                    let mut x = c as f32;
                    let mut y = r as f32;
                    if quarter_offset {
                        let at = |r: usize, c: usize| p[r * w + c];
                        if c > 0 && c + 1 < w {
                            x += quarter_shift(at(r, c - 1), at(r, c + 1));
                        }
                        if r > 0 && r + 1 < h {
                            y += quarter_shift(at(r - 1, c), at(r + 1, c));
                        }
                    }
                    [x, y, p[best]]
                })
                .collect()
        })
        .collect()
}

/// Mirrors every plane along the width axis.
pub fn mirror_width(t: &Tensor) -> Tensor {
    let [n, c, _, w] = t.dims();
    let mut out = Vec::with_capacity(t.numel());
    for b in 0..n {
        for ch in 0..c {
            for row in t.plane(b, ch).chunks_exact(w) {
                out.extend(row.iter().rev());
            }
        }
    }
    Tensor::from_parts(t.dims(), out)
}

/// Averages `hm` with the heatmaps of a horizontally flipped input.
///
/// The flipped maps are mirrored back, their left/right channels swapped, and
/// translated `shift_px` columns toward +x with the first column replicated.
pub fn flip_merge(
    hm: &Tensor,
    hm_flipped_input: &Tensor,
    flip_pairs: &[(usize, usize)],
    shift_px: usize,
) -> Result<Tensor, CodecError> {
    if hm.dims() != hm_flipped_input.dims() {
        return Err(CodecError::DimMismatch {
            a: hm.dims(),
            b: hm_flipped_input.dims(),
        });
    }
    let [n, k, h, w] = hm.dims();
    let mut perm: Vec<usize> = (0..k).collect();
    for &(a, b) in flip_pairs {
        if a >= k || b >= k {
            return Err(CodecError::FlipPair(a, b));
        }
        perm.swap(a, b);
    }
    let back = mirror_width(hm_flipped_input);
    let mut out = Vec::with_capacity(hm.numel());
    for b in 0..n {
        for (j, &src) in perm.iter().enumerate() {
            let f = back.plane(b, src);
            let o = hm.plane(b, j);
            for r in 0..h {
                for c in 0..w {
                    let sc = c.saturating_sub(shift_px);
                    out.push((o[r * w + c] + f[r * w + sc]) * 0.5);
                }
            }
        }
    }
    Ok(Tensor::from_parts(hm.dims(), out))
}
