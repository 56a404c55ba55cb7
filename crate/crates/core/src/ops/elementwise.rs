//! Element-wise activations and broadcast arithmetic.

use crate::error::{mismatch, Result};
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => x.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
    };
    Tensor::from_parts(x.dims(), data)
}

/// Gradient through an activation given its input `x` and output `y`.
pub fn activation_backward(kind: Activation, x: &Tensor, y: &Tensor, gout: &Tensor) -> Tensor {
    let data = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(gout.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(gout.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    };
    Tensor::from_parts(x.dims(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(mismatch("add", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.dims(), data))
}

pub fn scale(x: &Tensor, c: f32) -> Tensor {
    Tensor::from_parts(x.dims(), x.data().iter().map(|&v| v * c).collect())
}

/// True when every extent of `b` equals the matching extent of `a` or is 1.
pub fn broadcastable(a: Dims, b: Dims) -> bool {
    a.iter().zip(&b).all(|(&x, &y)| y == x || y == 1)
}

#[inline]
fn bcast_index(i: usize, a: Dims, b: Dims) -> usize {
    let w = i % a[3];
    let h = (i / a[3]) % a[2];
    let c = (i / (a[3] * a[2])) % a[1];
    let n = i / (a[3] * a[2] * a[1]);
    let pick = |v: usize, ext: usize| if ext == 1 { 0 } else { v };
    ((pick(n, b[0]) * b[1] + pick(c, b[1])) * b[2] + pick(h, b[2])) * b[3] + pick(w, b[3])
}

/// `a ⊙ broadcast(b)`; output has the dims of `a`.
pub fn mul_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    if !broadcastable(ad, bd) {
        return Err(mismatch("mul", format!("{bd:?} does not broadcast to {ad:?}")));
    }
    if ad == bd {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Ok(Tensor::from_parts(ad, data));
    }
    let bs = b.data();
    // Fast paths for the gate shapes used by the attention modules.
    let [n, c, h, w] = ad;
    let mut out = Vec::with_capacity(a.numel());
    if bd == [n, c, 1, 1] || bd == [1, c, 1, 1] || bd == [1, 1, 1, 1] {
        for nb in 0..n {
            for ch in 0..c {
                let s = bs[bcast_index((nb * c + ch) * h * w, ad, bd)];
                out.extend(a.plane(nb, ch).iter().map(|&v| v * s));
            }
        }
    } else if bd == [n, 1, h, w] {
        for nb in 0..n {
            let m = &bs[nb * h * w..(nb + 1) * h * w];
            for ch in 0..c {
                out.extend(a.plane(nb, ch).iter().zip(m).map(|(&v, &s)| v * s));
            }
        }
    } else {
        out.extend(
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * bs[bcast_index(i, ad, bd)]),
        );
    }
    Ok(Tensor::from_parts(ad, out))
}

/// Gradients of `a ⊙ broadcast(b)` with respect to `a` and `b`.
pub fn mul_broadcast_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (ad, bd) = (a.dims(), b.dims());
    let ga = mul_broadcast(gout, b).expect("dims validated in forward");
    let mut gb = vec![0.0f32; b.numel()];
    if ad == bd {
        for ((g, &x), &gv) in gb.iter_mut().zip(a.data()).zip(gout.data()) {
            *g = x * gv;
        }
    } else {
        for (i, (&x, &gv)) in a.data().iter().zip(gout.data()).enumerate() {
            gb[bcast_index(i, ad, bd)] += x * gv;
        }
    }
    (ga, Tensor::from_parts(bd, gb))
}

/// Sums a broadcast-expanded gradient back down to `target` extents.
pub fn reduce_to(g: &Tensor, target: Dims) -> Tensor {
    if g.dims() == target {
        return g.clone();
    }
    let mut out = vec![0.0f32; target.iter().product()];
    for (i, &v) in g.data().iter().enumerate() {
        out[bcast_index(i, g.dims(), target)] += v;
    }
    Tensor::from_parts(target, out)
}
