//! Per-channel batch normalization over (N, H, W).

use crate::error::{mismatch, Result};
use crate::tensor::{Dims, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Saved state of a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Batch mean and biased batch variance per channel.
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

fn check_params(x: Dims, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<()> {
    let c = x[1];
    if gamma.numel() != c || beta.numel() != c {
        return Err(mismatch(
            "batchnorm",
            format!("{c} channels but affine params of {} / {}", gamma.numel(), beta.numel()),
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(mismatch("batchnorm", "eps must be non-negative"));
    }
    Ok(())
}

/// Two-pass per-channel mean and biased variance.
pub fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = x.dims();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x.plane(b, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            ss += x.plane(b, ch).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / count) as f32;
    }
    (mean, var)
}

fn affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for ch in 0..c {
            let (s, t) = (scale[ch], shift[ch]);
            out.extend(x.plane(b, ch).iter().map(|&v| v * s + t));
        }
    }
    let _ = (h, w);
    Tensor::from_parts(x.dims(), out)
}

/// Normalizes with batch statistics. Returns the output and the cache needed for backward.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, BnCache)> {
    check_params(x.dims(), gamma, beta, eps)?;
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let [n, c, _, _] = x.dims();
    let mut xhat = Vec::with_capacity(x.numel());
    for b in 0..n {
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            xhat.extend(x.plane(b, ch).iter().map(|&v| (v - m) * is));
        }
    }
    let xhat_t = Tensor::from_parts(x.dims(), xhat);
    let out = affine(&xhat_t, gamma.data(), beta.data());
    Ok((
        out,
        BnCache {
            xhat: xhat_t.into_data(),
            inv_std,
            mean,
            var,
        },
    ))
}

/// Normalizes with running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    check_params(x.dims(), gamma, beta, eps)?;
    let (scale, shift) = eval_affine(gamma, beta, running_mean, running_var, eps);
    Ok(affine(x, &scale, &shift))
}

fn eval_affine(
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> (Vec<f32>, Vec<f32>) {
    let scale: Vec<f32> = gamma
        .data()
        .iter()
        .zip(running_var.data())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(running_mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

/// Running-stat update: `new = (1 - momentum)·old + momentum·batch`, with the
/// unbiased batch variance feeding the running variance.
pub fn update_running(running_mean: &mut [f32], running_var: &mut [f32], cache: &BnCache, count: usize, momentum: f32) {
    let unbias = if count > 1 {
        count as f32 / (count - 1) as f32
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * cache.mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * cache.var[ch] * unbias;
    }
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_train_backward(gout: &Tensor, gamma: &Tensor, cache: &BnCache) -> BnGrads {
    let [n, c, h, w] = gout.dims();
    let m = (n * h * w) as f32;
    let hw = h * w;
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let g = &gout.data()[off..off + hw];
            let xh = &cache.xhat[off..off + hw];
            gbeta[ch] += g.iter().sum::<f32>();
            ggamma[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
        }
    }
    let mut gx = vec![0.0f32; gout.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            let (sb, sg) = (gbeta[ch], ggamma[ch]);
            for i in off..off + hw {
                gx[i] = k * (m * gout.data()[i] - sb - cache.xhat[i] * sg);
            }
        }
    }
    BnGrads {
        input: Tensor::from_parts(gout.dims(), gx),
        gamma: Tensor::from_parts([1, c, 1, 1], ggamma),
        beta: Tensor::from_parts([1, c, 1, 1], gbeta),
    }
}

pub fn batchnorm_eval_backward(
    gout: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> BnGrads {
    let [n, c, h, w] = gout.dims();
    let hw = h * w;
    let inv_std: Vec<f32> = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    let mut gx = vec![0.0f32; gout.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (m, is, gm) = (running_mean.data()[ch], inv_std[ch], gamma.data()[ch]);
            for i in off..off + hw {
                let g = gout.data()[i];
                gbeta[ch] += g;
                ggamma[ch] += g * (x.data()[i] - m) * is;
                gx[i] = g * gm * is;
            }
        }
    }
    BnGrads {
        input: Tensor::from_parts(gout.dims(), gx),
        gamma: Tensor::from_parts([1, c, 1, 1], ggamma),
        beta: Tensor::from_parts([1, c, 1, 1], gbeta),
    }
}
