//! Random scale, rotation and horizontal flip of training samples.

use rand::Rng;

use super::TrainSample;
use crate::codec::in_bounds;
use crate::tensor::Tensor;

pub const SCALE_RANGE: (f32, f32) = (0.75, 1.25);
pub const MAX_ROTATION_DEG: f32 = 40.0;
pub const FLIP_PROBABILITY: f64 = 0.5;

/// One realization of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: f32,
    pub angle_deg: f32,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle_deg: 0.0,
            flip: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            flip: rng.random_bool(FLIP_PROBABILITY),
        }
    }
}

/// `p' = A p + t` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    a: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    /// Scale and rotate about the image centre, then mirror `x → W−1−x` if flipping.
    pub fn for_draw(draw: &AugmentDraw, hw: [usize; 2]) -> Self {
        let cx = (hw[1] as f64 - 1.0) / 2.0;
        let cy = (hw[0] as f64 - 1.0) / 2.0;
        let th = (draw.angle_deg as f64).to_radians();
        let s = draw.scale as f64;
        let (sin, cos) = th.sin_cos();
        let mut a = [[s * cos, -s * sin], [s * sin, s * cos]];
        let mut t = [cx - a[0][0] * cx - a[0][1] * cy, cy - a[1][0] * cx - a[1][1] * cy];
        if draw.flip {
            let w1 = hw[1] as f64 - 1.0;
            a[0] = [-a[0][0], -a[0][1]];
            t[0] = w1 - t[0];
        }
        Self { a, t }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.t[0],
            self.a[1][0] * x + self.a[1][1] * y + self.t[1],
        )
    }

    pub fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Self { a: inv, t }
    }
}

/// Bilinear warp of a `(1, C, H, W)` image; samples outside the source read 0.
fn warp(image: &Tensor, tf: &Affine) -> Tensor {
    let [n, c, h, w] = image.dims();
    let inv = tf.inverse();
    let mut out = Tensor::zeros([n, c, h, w]);
    let src_at = |plane: &[f32], r: i64, col: i64| -> f32 {
        if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
            0.0
        } else {
            plane[r as usize * w + col as usize]
        }
    };
    let mut coords = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            coords.push(inv.apply(col as f64, r as f64));
        }
    }
    for b in 0..n {
        for ch in 0..c {
            let plane = image.plane(b, ch);
            let mut vals = Vec::with_capacity(h * w);
            for &(sx, sy) in &coords {
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let mut v = src_at(plane, y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx > 0.0 {
                    v += src_at(plane, y0, x0 + 1) * fx * (1.0 - fy);
                }
                if fy > 0.0 {
                    v += src_at(plane, y0 + 1, x0) * (1.0 - fx) * fy;
                    if fx > 0.0 {
                        v += src_at(plane, y0 + 1, x0 + 1) * fx * fy;
                    }
                }
                vals.push(v);
            }
            let off = (b * c + ch) * h * w;
            out.data_mut()[off..off + h * w].copy_from_slice(&vals);
        }
    }
    out
}

/// Applies `draw` to the image and joints. Flipped samples exchange the
/// joints of every pair; joints leaving the frame become unannotated.
pub fn augment_with(sample: &TrainSample, draw: &AugmentDraw, flip_pairs: &[(usize, usize)]) -> TrainSample {
    if *draw == AugmentDraw::identity() {
        return sample.clone();
    }
    let [_, _, h, w] = sample.image.dims();
    let tf = Affine::for_draw(draw, [h, w]);
    let mut ann = sample.annotation.clone();
    for j in ann.joints.iter_mut() {
        let (x, y) = tf.apply(j[0] as f64, j[1] as f64);
        j[0] = x as f32;
        j[1] = y as f32;
        if !in_bounds(j[0], j[1], [h, w]) {
            j[2] = 0.0;
        }
    }
    if draw.flip {
        for &(a, b) in flip_pairs {
            ann.joints.swap(a, b);
        }
    }
    ann.norm *= draw.scale;
    TrainSample {
        image: warp(&sample.image, &tf),
        annotation: ann,
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &TrainSample, rng: &mut R, flip_pairs: &[(usize, usize)]) -> TrainSample {
    augment_with(sample, &AugmentDraw::sample(rng), flip_pairs)
}
