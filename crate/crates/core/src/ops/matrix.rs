//! Batched matrix products and row softmax over the trailing (H, W) axes.
//!
//! A "matrix" here is any tensor; its last two extents are rows × columns and
//! the leading (N, C) extents are batch axes.

use crate::error::{mismatch, Result};
use crate::tensor::{Dims, Tensor};

pub fn matmul_dims(a: Dims, b: Dims) -> Result<Dims> {
    if a[0] != b[0] || a[1] != b[1] {
        return Err(mismatch("matmul", format!("batch extents {a:?} vs {b:?}")));
    }
    if a[3] != b[2] {
        return Err(mismatch(
            "matmul",
            format!("inner extents {} and {} differ", a[3], b[2]),
        ));
    }
    Ok([a[0], a[1], a[2], b[3]])
}

/// Row-by-row product accumulated in f64; the attention logits feed a softmax
/// that amplifies rounding in its inputs.
fn gemm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a[i * k + kk] as f64;
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in acc.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv as f64;
            }
        }
        for (o, v) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let od = matmul_dims(a.dims(), b.dims())?;
    let [bn, bc, m, p] = od;
    let k = a.dims()[3];
    let mut out = vec![0.0f32; bn * bc * m * p];
    for batch in 0..bn * bc {
        gemm(
            &a.data()[batch * m * k..(batch + 1) * m * k],
            &b.data()[batch * k * p..(batch + 1) * k * p],
            &mut out[batch * m * p..(batch + 1) * m * p],
            m,
            k,
            p,
        );
    }
    Ok(Tensor::from_parts(od, out))
}

pub fn transpose_hw(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let mut out = vec![0.0f32; x.numel()];
    for batch in 0..n * c {
        let src = &x.data()[batch * h * w..(batch + 1) * h * w];
        let dst = &mut out[batch * h * w..(batch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[j * h + i] = src[i * w + j];
            }
        }
    }
    Tensor::from_parts([n, c, w, h], out)
}

/// Gradients of `a·b`: (g·bᵀ, aᵀ·g).
pub fn matmul_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let ga = matmul(gout, &transpose_hw(b)).expect("validated in forward");
    let gb = matmul(&transpose_hw(a), gout).expect("validated in forward");
    (ga, gb)
}

/// Softmax over the last axis, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let w = x.dims()[3];
    let mut out = Vec::with_capacity(x.numel());
    let mut e = vec![0.0f64; w];
    for row in x.data().chunks(w) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        for (ev, &v) in e.iter_mut().zip(row) {
            *ev = (v as f64 - m).exp();
        }
        let sum: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / sum) as f32));
    }
    Tensor::from_parts(x.dims(), out)
}

/// Row-softmax gradient from its output `y`: y ⊙ (g − Σ g·y).
pub fn softmax_rows_backward(y: &Tensor, gout: &Tensor) -> Tensor {
    let w = y.dims()[3];
    let mut gx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(w).zip(gout.data().chunks(w)) {
        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        gx.extend(yr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
    }
    Tensor::from_parts(y.dims(), gx)
}
