//! Procedural stick figures on textured backgrounds.
//!
//! Joints follow a fixed priority order so any `K ≥ 4` prefix keeps the head
//! segment. Left and right are assigned as for a person facing the camera:
//! the figure's right side is on the image left of the torso axis, so a
//! mirrored image with swapped labels is again a valid sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainSample;
use crate::annotations::PoseAnnotation;
use crate::codec::in_bounds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum J {
    HeadTop,
    Neck,
    RShoulder,
    LShoulder,
    RHip,
    LHip,
    RElbow,
    LElbow,
    RKnee,
    LKnee,
    RWrist,
    LWrist,
    RAnkle,
    LAnkle,
    Thorax,
    Pelvis,
}

const ORDER: [J; 16] = [
    J::HeadTop,
    J::Neck,
    J::RShoulder,
    J::LShoulder,
    J::RHip,
    J::LHip,
    J::RElbow,
    J::LElbow,
    J::RKnee,
    J::LKnee,
    J::RWrist,
    J::LWrist,
    J::RAnkle,
    J::LAnkle,
    J::Thorax,
    J::Pelvis,
];

pub const MAX_KEYPOINTS: usize = ORDER.len();

pub const JOINT_NAMES: [&str; 16] = [
    "head_top",
    "upper_neck",
    "r_shoulder",
    "l_shoulder",
    "r_hip",
    "l_hip",
    "r_elbow",
    "l_elbow",
    "r_knee",
    "l_knee",
    "r_wrist",
    "l_wrist",
    "r_ankle",
    "l_ankle",
    "thorax",
    "pelvis",
];

/// Probability that a joint is hidden under an occluding patch.
pub const OCCLUSION_RATE: f64 = 0.1;

/// Left/right pairs among the first `k` joints.
pub fn synth_flip_pairs(k: usize) -> Vec<(usize, usize)> {
    (2..k.min(14))
        .step_by(2)
        .filter(|&a| a + 1 < k)
        .map(|a| (a, a + 1))
        .collect()
}

/// Joint groups for reporting: head, shoulders, elbows, wrists, hips, knees, ankles.
pub fn synth_joint_groups(k: usize) -> Vec<(&'static str, Vec<usize>)> {
    [
        ("head", vec![0, 1]),
        ("shoulder", vec![2, 3]),
        ("hip", vec![4, 5]),
        ("elbow", vec![6, 7]),
        ("knee", vec![8, 9]),
        ("wrist", vec![10, 11]),
        ("ankle", vec![12, 13]),
        ("torso", vec![14, 15]),
    ]
    .into_iter()
    .map(|(n, js)| (n, js.into_iter().filter(|&j| j < k).collect::<Vec<_>>()))
    .filter(|(_, js)| !js.is_empty())
    .collect()
}

type P = [f64; 2];

fn add(a: P, b: P, s: f64) -> P {
    [a[0] + b[0] * s, a[1] + b[1] * s]
}

struct Figure {
    joints: [P; 16],
    limb_radius: f64,
    torso_radius: f64,
    head_radius: f64,
}

impl Figure {
    fn at(&self, j: J) -> P {
        self.joints[ORDER.iter().position(|&o| o == j).expect("joint in order")]
    }

    fn random(rng: &mut ChaCha8Rng, hw: [usize; 2]) -> Self {
        let u = hw[0].min(hw[1]) as f64 / 64.0;
        let len = rng.random_range(12.0..15.0) * u;
        let tilt = rng.random_range(-25.0f64..25.0).to_radians();
        let center = [
            hw[1] as f64 / 2.0 + rng.random_range(-4.0..4.0) * u,
            hw[0] as f64 / 2.0 + rng.random_range(-2.0..4.0) * u,
        ];
        // `up` points from pelvis to head; `side` is the image-right direction of the torso.
        let up = [tilt.sin(), -tilt.cos()];
        let side = [tilt.cos(), tilt.sin()];
        let down = [-up[0], -up[1]];
        let thorax = add(center, up, len / 2.0);
        let pelvis = add(center, up, -len / 2.0);
        let neck = add(thorax, up, 0.2 * len);
        let head_top = add(neck, up, rng.random_range(0.7..0.85) * len);
        let shoulder_w = rng.random_range(0.3..0.42) * len;
        let hip_w = rng.random_range(0.2..0.28) * len;
        let mut j = [[0.0; 2]; 16];
        let mut set = |which: J, p: P| j[ORDER.iter().position(|&o| o == which).expect("joint")] = p;
        set(J::HeadTop, head_top);
        set(J::Neck, neck);
        set(J::Thorax, thorax);
        set(J::Pelvis, pelvis);
        // Unit vector rotated `a` radians from `down` toward `out`.
        let dir = |a: f64, out: P| {
            [
                down[0] * a.cos() + out[0] * a.sin(),
                down[1] * a.cos() + out[1] * a.sin(),
            ]
        };
        for (sign, sh, el, wr, hp, kn, an) in [
            (-1.0, J::RShoulder, J::RElbow, J::RWrist, J::RHip, J::RKnee, J::RAnkle),
            (1.0, J::LShoulder, J::LElbow, J::LWrist, J::LHip, J::LKnee, J::LAnkle),
        ] {
            let out = [side[0] * sign, side[1] * sign];
            let shoulder = add(thorax, out, shoulder_w);
            let a1 = rng.random_range(10.0f64..140.0).to_radians();
            let elbow = add(shoulder, dir(a1, out), rng.random_range(0.5..0.65) * len);
            let a2 = a1 + rng.random_range(-70.0f64..70.0).to_radians();
            let wrist = add(elbow, dir(a2, out), rng.random_range(0.45..0.6) * len);
            let hip = add(pelvis, out, hip_w);
            let a3 = rng.random_range(-5.0f64..30.0).to_radians();
            let knee = add(hip, dir(a3, out), rng.random_range(0.55..0.7) * len);
            let a4 = a3 + rng.random_range(-30.0f64..30.0).to_radians();
            let ankle = add(knee, dir(a4, out), rng.random_range(0.5..0.65) * len);
            set(sh, shoulder);
            set(el, elbow);
            set(wr, wrist);
            set(hp, hip);
            set(kn, knee);
            set(an, ankle);
        }
        let head_len = ((head_top[0] - neck[0]).powi(2) + (head_top[1] - neck[1]).powi(2)).sqrt();
        Self {
            joints: j,
            limb_radius: rng.random_range(1.1..1.6) * u,
            torso_radius: rng.random_range(1.8..2.6) * u,
            head_radius: 0.42 * head_len,
        }
    }

    /// `(from, to, radius)` for every stroke of the figure.
    fn strokes(&self) -> Vec<(P, P, f64)> {
        use J::*;
        let limb = [
            (RShoulder, RElbow),
            (RElbow, RWrist),
            (LShoulder, LElbow),
            (LElbow, LWrist),
            (RHip, RKnee),
            (RKnee, RAnkle),
            (LHip, LKnee),
            (LKnee, LAnkle),
            (Thorax, Neck),
        ];
        let torso = [(Thorax, Pelvis), (RShoulder, LShoulder), (RHip, LHip)];
        let mut s: Vec<(P, P, f64)> = limb
            .iter()
            .map(|&(a, b)| (self.at(a), self.at(b), self.limb_radius))
            .collect();
        s.extend(torso.iter().map(|&(a, b)| (self.at(a), self.at(b), self.torso_radius)));
        // Joint markers make every endpoint visible even where strokes are thin.
        s.extend(self.joints.iter().map(|&p| (p, p, self.limb_radius + 0.6)));
        let (top, neck) = (self.at(HeadTop), self.at(Neck));
        let mid = [(top[0] + neck[0]) / 2.0, (top[1] + neck[1]) / 2.0];
        s.push((mid, mid, self.head_radius));
        s
    }
}

fn segment_distance(p: P, a: P, b: P) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = add(a, ab, t);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

struct Texture {
    base: [f32; 3],
    waves: Vec<(f64, f64, f64, f32, usize)>,
    noise: f32,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Self {
        let base = [0; 3].map(|_| rng.random_range(lo..hi));
        let waves = (0..3)
            .map(|_| {
                let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let freq: f64 = rng.random_range(0.08..0.5);
                (
                    th.cos() * freq,
                    th.sin() * freq,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.02..0.08),
                    rng.random_range(0..3),
                )
            })
            .collect();
        Self {
            base,
            waves,
            noise: 0.04,
        }
    }

    fn color(&self, x: f64, y: f64, rng: &mut ChaCha8Rng) -> [f32; 3] {
        let mut c = self.base;
        for &(fx, fy, ph, amp, ch) in &self.waves {
            let v = amp * (fx * x + fy * y + ph).sin() as f32;
            c[ch] += v;
        }
        c.map(|v| (v + rng.random_range(-self.noise..self.noise)).clamp(0.0, 1.0))
    }
}

/// A rendered figure with its foreground coverage map.
pub struct Rendered {
    pub sample: TrainSample,
    /// Per-pixel foreground flag, row-major `(H, W)`.
    pub foreground: Vec<bool>,
}

fn render(rng: &mut ChaCha8Rng, hw: [usize; 2], k: usize) -> Rendered {
    let [h, w] = hw;
    let fig = Figure::random(rng, hw);
    let background = Texture::random(rng, 0.0, 0.45);
    let fg_color = [0; 3].map(|_| rng.random_range(0.6f32..1.0));
    let strokes = fig.strokes();
    let mut pixels = vec![[0.0f32; 3]; h * w];
    let mut foreground = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = [c as f64, r as f64];
            let cover = strokes
                .iter()
                .map(|&(a, b, rad)| (rad + 0.5 - segment_distance(p, a, b)).clamp(0.0, 1.0))
                .fold(0.0f64, f64::max) as f32;
            let bg = background.color(p[0], p[1], rng);
            let i = r * w + c;
            for ch in 0..3 {
                pixels[i][ch] = bg[ch] * (1.0 - cover) + fg_color[ch] * cover;
            }
            foreground[i] = cover >= 0.5;
        }
    }
    let mut joints: Vec<[f32; 3]> = fig.joints[..k]
        .iter()
        .map(|p| {
            let v = if in_bounds(p[0] as f32, p[1] as f32, hw) {
                1.0
            } else {
                0.0
            };
            [p[0] as f32, p[1] as f32, v]
        })
        .collect();
    let u = h.min(w) as f64 / 64.0;
    for j in 0..k {
        if !rng.random_bool(OCCLUSION_RATE) {
            continue;
        }
        let half = rng.random_range(2.5..4.0) * u;
        let [x, y, _] = joints[j];
        let (x0, x1) = (x as f64 - half, x as f64 + half);
        let (y0, y1) = (y as f64 - half, y as f64 + half);
        let patch = Texture::random(rng, 0.0, 0.45);
        for r in (y0.floor().max(0.0) as usize)..=(y1.ceil().min(h as f64 - 1.0).max(0.0) as usize) {
            for c in (x0.floor().max(0.0) as usize)..=(x1.ceil().min(w as f64 - 1.0).max(0.0) as usize) {
                let i = r * w + c;
                pixels[i] = patch.color(c as f64, r as f64, rng);
                foreground[i] = false;
            }
        }
        // Anything under the patch, plus a one-pixel margin, is hidden.
        for q in joints.iter_mut() {
            let (qx, qy) = (q[0] as f64, q[1] as f64);
            if qx >= x0 - 1.0 && qx <= x1 + 1.0 && qy >= y0 - 1.0 && qy <= y1 + 1.0 {
                q[2] = 0.0;
            }
        }
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in pixels.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch];
        }
    }
    let (top, neck) = (fig.at(J::HeadTop), fig.at(J::Neck));
    let norm = ((top[0] - neck[0]).powi(2) + (top[1] - neck[1]).powi(2)).sqrt() as f32;
    Rendered {
        sample: TrainSample {
            image: Tensor::from_parts([1, 3, h, w], data),
            annotation: PoseAnnotation::new(joints, norm),
        },
        foreground,
    }
}

/// Whether every visible joint has foreground within one pixel.
pub fn joints_on_foreground(r: &Rendered) -> bool {
    let [_, _, h, w] = r.sample.image.dims();
    r.sample.annotation.joints.iter().filter(|j| j[2] > 0.0).all(|j| {
        let (cx, cy) = (j[0].round() as i64, j[1].round() as i64);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (x, y) = (cx + dx, cy + dy);
                x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && r.foreground[y as usize * w + x as usize]
            })
        })
    })
}

/// `n` rendered figures with their foreground maps; deterministic in `seed`.
pub fn synth_rendered(n: usize, hw: [usize; 2], num_keypoints: usize, seed: u64) -> Vec<Rendered> {
    assert!(
        (4..=MAX_KEYPOINTS).contains(&num_keypoints),
        "synthetic figures have 4..=16 keypoints"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| render(&mut rng, hw, num_keypoints)).collect()
}

/// `n` training samples; each joint is occluded with probability 0.1.
pub fn synth_dataset(n: usize, hw: [usize; 2], num_keypoints: usize, seed: u64) -> Vec<TrainSample> {
    synth_rendered(n, hw, num_keypoints, seed)
        .into_iter()
        .map(|r| r.sample)
        .collect()
}
