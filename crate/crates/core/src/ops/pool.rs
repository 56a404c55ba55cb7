//! Pooling, resampling and channel reductions.

use crate::error::{mismatch, Result, TensorError};
use crate::tensor::{Dims, Tensor};

pub fn maxpool2x2_dims(x: Dims) -> Result<Dims> {
    let [n, c, h, w] = x;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddExtent { op: "maxpool2x2", h, w });
    }
    Ok([n, c, h / 2, w / 2])
}

/// 2×2 max pooling with stride 2. The returned indices are flat offsets into
/// `x.data()` of each window's maximum; ties keep the first element in
/// row-major window order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let out_dims = maxpool2x2_dims(x.dims())?;
    let [n, c, h, w] = x.dims();
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for off in [1, w, w + 1] {
                    let cand = base + 2 * oy * w + 2 * ox + off;
                    if xs[cand] > xs[best] {
                        best = cand;
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(out_dims, out), idx))
}

/// Scatters output gradients back to the recorded argmax positions.
pub fn scatter_to_indices(input_dims: Dims, idx: &[usize], gout: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_dims);
    let gd = gx.data_mut();
    for (&i, &g) in idx.iter().zip(gout.data()) {
        gd[i] += g;
    }
    gx
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                let v = src[y * w + xx];
                let top = 2 * y * wo + 2 * xx;
                dst[top] = v;
                dst[top + 1] = v;
                dst[top + wo] = v;
                dst[top + wo + 1] = v;
            }
        }
    }
    Tensor::from_parts([n, c, ho, wo], out)
}

/// Sums each 2×2 block of the upsampled gradient.
pub fn upsample_nearest2x_backward(gout: &Tensor) -> Tensor {
    let [n, c, ho, wo] = gout.dims();
    let (h, w) = (ho / 2, wo / 2);
    let mut gx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = gout.plane(plane / c, plane % c);
        for y in 0..h {
            for xx in 0..w {
                let top = 2 * y * wo + 2 * xx;
                gx[plane * h * w + y * w + xx] = src[top] + src[top + 1] + src[top + wo] + src[top + wo + 1];
            }
        }
    }
    Tensor::from_parts([n, c, h, w], gx)
}

/// Mean over (H, W) per channel: (N,C,H,W) -> (N,C,1,1).
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let inv = 1.0 / (h * w) as f32;
    let data = (0..n * c)
        .map(|p| x.plane(p / c, p % c).iter().sum::<f32>() * inv)
        .collect();
    Tensor::from_parts([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_dims: Dims, gout: &Tensor) -> Tensor {
    let [n, c, h, w] = input_dims;
    let inv = 1.0 / (h * w) as f32;
    let mut gx = Vec::with_capacity(n * c * h * w);
    for &g in gout.data() {
        gx.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_parts(input_dims, gx)
}

/// Max over (H, W) per channel with first-occurrence argmax.
pub fn global_max_pool(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::with_capacity(n * c);
    let mut idx = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let plane = x.plane(p / c, p % c);
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        idx.push(p * h * w + best);
    }
    (Tensor::from_parts([n, c, 1, 1], out), idx)
}

/// Mean over channels: (N,C,H,W) -> (N,1,H,W).
pub fn channel_mean(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let inv = 1.0 / c as f32;
    let mut out = vec![0.0f32; n * h * w];
    for b in 0..n {
        let dst = &mut out[b * h * w..(b + 1) * h * w];
        for ch in 0..c {
            for (d, &v) in dst.iter_mut().zip(x.plane(b, ch)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Tensor::from_parts([n, 1, h, w], out)
}

pub fn channel_mean_backward(input_dims: Dims, gout: &Tensor) -> Tensor {
    let [n, c, h, w] = input_dims;
    let inv = 1.0 / c as f32;
    let mut gx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        let g = gout.plane(b, 0);
        for _ in 0..c {
            gx.extend(g.iter().map(|&v| v * inv));
        }
    }
    Tensor::from_parts(input_dims, gx)
}

/// Max over channels with first-occurrence argmax: (N,C,H,W) -> (N,1,H,W).
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.dims();
    let xs = x.data();
    let mut out = Vec::with_capacity(n * h * w);
    let mut idx = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = b * c * h * w + p;
            for ch in 1..c {
                let cand = (b * c + ch) * h * w + p;
                if xs[cand] > xs[best] {
                    best = cand;
                }
            }
            out.push(xs[best]);
            idx.push(best);
        }
    }
    (Tensor::from_parts([n, 1, h, w], out), idx)
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| mismatch("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let [pn, _, ph, pw] = p.dims();
        if (pn, ph, pw) != (n, h, w) {
            return Err(mismatch(
                "concat_channels",
                format!("{:?} vs {:?}", p.dims(), first.dims()),
            ));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.dims()[1]).sum();
    let mut out = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for p in parts {
            out.extend_from_slice(p.sample(b));
        }
    }
    Ok(Tensor::from_parts([n, c_total, h, w], out))
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(gout: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let [n, _, h, w] = gout.dims();
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&c| Vec::with_capacity(n * c * h * w)).collect();
    for b in 0..n {
        let mut off = 0;
        let sample = gout.sample(b);
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&sample[off..off + c * h * w]);
            off += c * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_parts([n, c, h, w], d))
        .collect()
}
