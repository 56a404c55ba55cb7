//! Grouped 2-D cross-correlation.

use rayon::prelude::*;

use crate::error::{mismatch, Result};
use crate::tensor::{numel, Dims, Tensor};

/// Stride, per-axis zero padding `[pad_h, pad_w]` and group count of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: [usize; 2],
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad: [pad, pad],
            groups,
        }
    }

    pub fn with_pad(stride: usize, pad: [usize; 2], groups: usize) -> Self {
        Self { stride, pad, groups }
    }
}

/// Output extents of a convolution, validating every precondition.
pub fn conv2d_dims(x: Dims, w: Dims, bias_len: Option<usize>, g: ConvGeom) -> Result<Dims> {
    let [n, cin, h, wd] = x;
    let [cout, cin_g, kh, kw] = w;
    if g.stride == 0 || g.groups == 0 {
        return Err(mismatch("conv2d", "stride and groups must be positive"));
    }
    if cin % g.groups != 0 || cout % g.groups != 0 {
        return Err(mismatch(
            "conv2d",
            format!("channels {cin}->{cout} not divisible by groups {}", g.groups),
        ));
    }
    if cin / g.groups != cin_g {
        return Err(mismatch(
            "conv2d",
            format!(
                "weight expects {cin_g} input channels per group, input has {}",
                cin / g.groups
            ),
        ));
    }
    let (hp, wp) = (h + 2 * g.pad[0], wd + 2 * g.pad[1]);
    if hp < kh || wp < kw {
        return Err(mismatch(
            "conv2d",
            format!("padded extent {hp}x{wp} smaller than kernel {kh}x{kw}"),
        ));
    }
    if let Some(len) = bias_len {
        if len != cout {
            return Err(mismatch(
                "conv2d",
                format!("bias has {len} entries for {cout} output channels"),
            ));
        }
    }
    Ok([n, cout, (hp - kh) / g.stride + 1, (wp - kw) / g.stride + 1])
}

/// Half-open range of output positions whose tap `k` lands inside the input.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct PlaneGeom {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

/// `out += wv * shifted(inp)` for kernel tap (kh, kw).
#[inline]
fn axpy_tap(out: &mut [f32], inp: &[f32], wv: f32, kh: usize, kw: usize, p: &PlaneGeom) {
    let (oh_lo, oh_hi) = valid_range(kh, p.ph, p.stride, p.h, p.ho);
    let (ow_lo, ow_hi) = valid_range(kw, p.pw, p.stride, p.w, p.wo);
    if ow_lo >= ow_hi {
        return;
    }
    for oh in oh_lo..oh_hi {
        let ih = oh * p.stride + kh - p.ph;
        let orow = &mut out[oh * p.wo + ow_lo..oh * p.wo + ow_hi];
        let iw0 = ow_lo * p.stride + kw - p.pw;
        if p.stride == 1 {
            let irow = &inp[ih * p.w + iw0..ih * p.w + iw0 + orow.len()];
            for (o, &i) in orow.iter_mut().zip(irow) {
                *o += wv * i;
            }
        } else {
            let irow = &inp[ih * p.w..(ih + 1) * p.w];
            for (j, o) in orow.iter_mut().enumerate() {
                *o += wv * irow[iw0 + j * p.stride];
            }
        }
    }
}

/// Returns Σ gout·shifted(inp) and adds `wv * gout` into `gin` at the shifted positions.
#[inline]
fn tap_backward(gout: &[f32], inp: &[f32], gin: &mut [f32], wv: f32, kh: usize, kw: usize, p: &PlaneGeom) -> f32 {
    let (oh_lo, oh_hi) = valid_range(kh, p.ph, p.stride, p.h, p.ho);
    let (ow_lo, ow_hi) = valid_range(kw, p.pw, p.stride, p.w, p.wo);
    if ow_lo >= ow_hi {
        return 0.0;
    }
    let mut acc = 0.0f32;
    for oh in oh_lo..oh_hi {
        let ih = oh * p.stride + kh - p.ph;
        let grow = &gout[oh * p.wo + ow_lo..oh * p.wo + ow_hi];
        let iw0 = ow_lo * p.stride + kw - p.pw;
        if p.stride == 1 {
            let span = ih * p.w + iw0..ih * p.w + iw0 + grow.len();
            let irow = &inp[span.clone()];
            let girow = &mut gin[span];
            for ((&g, &i), gi) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                acc += g * i;
                *gi += wv * g;
            }
        } else {
            for (j, &g) in grow.iter().enumerate() {
                let idx = ih * p.w + iw0 + j * p.stride;
                acc += g * inp[idx];
                gin[idx] += wv * g;
            }
        }
    }
    acc
}

fn for_each_plane<F>(out: &mut [f32], plane: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if rayon::current_num_threads() > 1 && out.len() >= 1 << 14 {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Cross-correlation (no kernel flip) with optional per-output-channel bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let out_dims = conv2d_dims(x.dims(), w.dims(), b.map(|b| b.numel()), g)?;
    let [_, cin, h, wd] = x.dims();
    let [_, cout, ho, wo] = out_dims;
    let [_, cin_g, kh, kw] = w.dims();
    let cout_g = cout / g.groups;
    let p = PlaneGeom {
        h,
        w: wd,
        ho,
        wo,
        stride: g.stride,
        ph: g.pad[0],
        pw: g.pad[1],
    };
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0f32; numel(out_dims)];
    for_each_plane(&mut out, ho * wo, |idx, oplane| {
        let (n, co) = (idx / cout, idx % cout);
        if let Some(b) = b {
            oplane.fill(b.data()[co]);
        }
        let grp = co / cout_g;
        for cig in 0..cin_g {
            let ci = grp * cin_g + cig;
            let iplane = &xs[(n * cin + ci) * h * wd..(n * cin + ci + 1) * h * wd];
            let wbase = (co * cin_g + cig) * kh * kw;
            if kh == 1 && kw == 1 && g.stride == 1 && g.pad == [0, 0] {
                let wv = ws[wbase];
                for (o, &i) in oplane.iter_mut().zip(iplane) {
                    *o += wv * i;
                }
                continue;
            }
            for a in 0..kh {
                for c in 0..kw {
                    axpy_tap(oplane, iplane, ws[wbase + a * kw + c], a, c, &p);
                }
            }
        }
    });
    Ok(Tensor::from_parts(out_dims, out))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, has_bias: bool, g: ConvGeom, gout: &Tensor) -> Result<ConvGrads> {
    let out_dims = conv2d_dims(x.dims(), w.dims(), None, g)?;
    if gout.dims() != out_dims {
        return Err(mismatch("conv2d_backward", "gradient dims differ from output"));
    }
    let [n_batch, cin, h, wd] = x.dims();
    let [_, cout, ho, wo] = out_dims;
    let [_, cin_g, kh, kw] = w.dims();
    let cout_g = cout / g.groups;
    let p = PlaneGeom {
        h,
        w: wd,
        ho,
        wo,
        stride: g.stride,
        ph: g.pad[0],
        pw: g.pad[1],
    };
    let xs = x.data();
    let ws = w.data();
    let gs = gout.data();
    let mut gx = vec![0.0f32; x.numel()];
    let mut gw = vec![0.0f32; w.numel()];
    for n in 0..n_batch {
        for co in 0..cout {
            let gplane = &gs[(n * cout + co) * ho * wo..(n * cout + co + 1) * ho * wo];
            let grp = co / cout_g;
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let range = (n * cin + ci) * h * wd..(n * cin + ci + 1) * h * wd;
                let iplane = &xs[range.clone()];
                let giplane = &mut gx[range];
                let wbase = (co * cin_g + cig) * kh * kw;
                for a in 0..kh {
                    for c in 0..kw {
                        let widx = wbase + a * kw + c;
                        gw[widx] += tap_backward(gplane, iplane, giplane, ws[widx], a, c, &p);
                    }
                }
            }
        }
    }
    let bias = has_bias.then(|| {
        let mut gb = vec![0.0f32; cout];
        for n in 0..n_batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gout.plane(n, co).iter().sum::<f32>();
            }
        }
        Tensor::from_parts([1, cout, 1, 1], gb)
    });
    Ok(ConvGrads {
        input: Tensor::from_parts(x.dims(), gx),
        weight: Tensor::from_parts(w.dims(), gw),
        bias,
    })
}

/// Multiply-accumulate count of a convolution producing `out`.
pub fn conv2d_macs(out: Dims, w: Dims) -> u64 {
    let [n, cout, ho, wo] = out;
    let [_, cin_g, kh, kw] = w;
    (n * cout * ho * wo * cin_g * kh * kw) as u64
}
