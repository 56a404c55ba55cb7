//! Direct-loop references, written without the library's kernels.

use std::collections::BTreeMap;

use lapx::annotations::{AnnotationSet, PoseAnnotation};
use lapx::metrics::OKS_THRESHOLDS;
use lapx::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cross-correlation by definition, accumulated in f64. Returns dims and values.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: [usize; 2],
    groups: usize,
) -> ([usize; 4], Vec<f64>) {
    let [n, _, h, wd] = x.dims();
    let [cout, cin_g, kh, kw] = w.dims();
    let ho = (h + 2 * pad[0] - kh) / stride + 1;
    let wo = (wd + 2 * pad[1] - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[co] as f64);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad[0] as isize;
                                let ix = (ox * stride + kx) as isize - pad[1] as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.at(b, c, iy as usize, ix as usize) as f64;
                                let wv = w.at(co, ci, ky, kx) as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    ([n, cout, ho, wo], out)
}

pub fn maxpool2x2(x: &Tensor) -> ([usize; 4], Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let vals = [
                        x.at(b, ch, 2 * oy, 2 * ox),
                        x.at(b, ch, 2 * oy, 2 * ox + 1),
                        x.at(b, ch, 2 * oy + 1, 2 * ox),
                        x.at(b, ch, 2 * oy + 1, 2 * ox + 1),
                    ];
                    out.push(vals.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64);
                }
            }
        }
    }
    ([n, c, h / 2, w / 2], out)
}

/// Channel gate from a shared 1-D kernel over the pooled descriptors.
pub fn eca(x: &Tensor, kernel: &[f32]) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let half = kernel.len() as isize / 2;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        let avg: Vec<f64> = (0..c)
            .map(|ch| x.plane(b, ch).iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
            .collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| x.plane(b, ch).iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64)
            .collect();
        for ch in 0..c {
            let mut s = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let src = ch as isize + j as isize - half;
                if src >= 0 && (src as usize) < c {
                    s += k as f64 * (avg[src as usize] + max[src as usize]);
                }
            }
            let gate = sigmoid(s);
            for y in 0..h {
                for xx in 0..w {
                    out[x.index(b, ch, y, xx)] = x.at(b, ch, y, xx) as f64 * gate;
                }
            }
        }
    }
    out
}

/// Spatial gate from a `(1, 2, k, k)` kernel over channel mean and max.
pub fn cbam_spatial(x: &Tensor, weight: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let k = weight.dims()[2];
    let half = (k / 2) as isize;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        let mut maps = [vec![0.0f64; h * w], vec![f64::NEG_INFINITY; h * w]];
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let v = x.at(b, ch, y, xx) as f64;
                    maps[0][y * w + xx] += v / c as f64;
                    maps[1][y * w + xx] = maps[1][y * w + xx].max(v);
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for (m, map) in maps.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - half;
                            let ix = xx as isize + kx as isize - half;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += weight.at(0, m, ky, kx) as f64 * map[iy as usize * w + ix as usize];
                        }
                    }
                }
                let gate = sigmoid(s);
                for ch in 0..c {
                    out[x.index(b, ch, y, xx)] = x.at(b, ch, y, xx) as f64 * gate;
                }
            }
        }
    }
    out
}

/// `1×1` projection matrix `[out][in]` of a conv weight.
fn matrix(w: &Tensor) -> Vec<Vec<f64>> {
    let [o, i, _, _] = w.dims();
    (0..o)
        .map(|r| (0..i).map(|c| w.at(r, c, 0, 0) as f64).collect())
        .collect()
}

fn project(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// All-pairs embedded-Gaussian attention, one position pair at a time.
pub fn nonlocal(x: &Tensor, theta: &Tensor, phi: &Tensor, g: &Tensor, wz: &Tensor, gamma: f32) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let (mt, mp, mg, mz) = (matrix(theta), matrix(phi), matrix(g), matrix(wz));
    let positions = h * w;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        let feat = |p: usize| -> Vec<f64> { (0..c).map(|ch| x.at(b, ch, p / w, p % w) as f64).collect() };
        let th: Vec<Vec<f64>> = (0..positions).map(|p| project(&mt, &feat(p))).collect();
        let ph: Vec<Vec<f64>> = (0..positions).map(|p| project(&mp, &feat(p))).collect();
        let gv: Vec<Vec<f64>> = (0..positions).map(|p| project(&mg, &feat(p))).collect();
        for i in 0..positions {
            let logits: Vec<f64> = (0..positions)
                .map(|j| th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let denom: f64 = e.iter().sum();
            let mut y = vec![0.0; gv[0].len()];
            for j in 0..positions {
                for (yk, gk) in y.iter_mut().zip(&gv[j]) {
                    *yk += e[j] / denom * gk;
                }
            }
            let z = project(&mz, &y);
            for ch in 0..c {
                let idx = x.index(b, ch, i / w, i % w);
                out[idx] = x.data()[idx] as f64 + gamma as f64 * z[ch];
            }
        }
    }
    out
}

/// `(correct, annotated)` per joint, by definition.
pub fn pckh_counts(preds: &[PoseAnnotation], gts: &[PoseAnnotation], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let k = gts[0].joints.len();
    let mut correct = vec![0; k];
    let mut annotated = vec![0; k];
    for (p, g) in preds.iter().zip(gts) {
        for j in 0..k {
            if g.joints[j][2] <= 0.0 {
                continue;
            }
            annotated[j] += 1;
            let dx = p.joints[j][0] as f64 - g.joints[j][0] as f64;
            let dy = p.joints[j][1] as f64 - g.joints[j][1] as f64;
            if dx.hypot(dy) < threshold * g.norm as f64 {
                correct[j] += 1;
            }
        }
    }
    (correct, annotated)
}

pub fn oks(pred: &PoseAnnotation, gt: &PoseAnnotation, k: &[f64]) -> f64 {
    let s = gt.norm as f64;
    let terms: Vec<f64> = (0..gt.joints.len())
        .filter(|&j| gt.joints[j][2] > 0.0)
        .map(|j| {
            let dx = pred.joints[j][0] as f64 - gt.joints[j][0] as f64;
            let dy = pred.joints[j][1] as f64 - gt.joints[j][1] as f64;
            (-(dx * dx + dy * dy) / (2.0 * s * s * k[j] * k[j])).exp()
        })
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Mean over thresholds of 101-point interpolated AP, with precision at each
/// recall level taken as the best precision reached at or beyond it.
pub fn ap(preds: &AnnotationSet, gts: &AnnotationSet, k: &[f64]) -> f64 {
    let mut images: BTreeMap<&str, (Vec<&PoseAnnotation>, Vec<&PoseAnnotation>)> = BTreeMap::new();
    for (id, list) in &gts.0 {
        images.entry(id).or_default().1 = list.iter().filter(|g| g.joints.iter().any(|j| j[2] > 0.0)).collect();
    }
    for (id, list) in &preds.0 {
        images.entry(id).or_default().0 = list.iter().collect();
    }
    let num_gt: usize = images.values().map(|(_, g)| g.len()).sum();
    // (score, image, pred index) in image-key order, then a stable sort by score.
    let mut order: Vec<(f32, &str, usize)> = Vec::new();
    for (id, (p, _)) in &images {
        for (i, pose) in p.iter().enumerate() {
            order.push((pose.score.unwrap_or(1.0), id, i));
        }
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut total = 0.0;
    for &t in &OKS_THRESHOLDS {
        let mut used: BTreeMap<&str, Vec<bool>> =
            images.iter().map(|(id, (_, g))| (*id, vec![false; g.len()])).collect();
        let mut hits = 0usize;
        let mut curve = Vec::new();
        for (rank, &(_, id, i)) in order.iter().enumerate() {
            let (p, g) = &images[id];
            let mut pick: Option<(usize, f64)> = None;
            for (gi, gt) in g.iter().enumerate() {
                let o = oks(p[i], gt, k);
                if used[id][gi] || o < t {
                    continue;
                }
                if pick.is_none_or(|(_, best)| o > best) {
                    pick = Some((gi, o));
                }
            }
            if let Some((gi, _)) = pick {
                used.get_mut(id).unwrap()[gi] = true;
                hits += 1;
            }
            curve.push((hits as f64 / num_gt as f64, hits as f64 / (rank + 1) as f64));
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            sum += curve
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, prec)| *prec)
                .fold(0.0, f64::max);
        }
        total += sum / 101.0;
    }
    total / OKS_THRESHOLDS.len() as f64
}
