//! Channel and spatial attention blocks.

use crate::error::{mismatch, Result};
use crate::exec::Exec;
use crate::init::Initializer;
use crate::ops::ConvGeom;
use crate::params::ParamId;

/// Kernel size of the ECA 1-D convolution.
pub const ECA_KERNEL: usize = 7;
/// Kernel size of the CBAM spatial convolution.
pub const SPATIAL_KERNEL: usize = 7;

/// Shared 1-D kernel across channels, stored as a `(1, 1, 1, k)` convolution.
#[derive(Debug, Clone, Copy)]
pub struct EcaParams {
    pub weight: ParamId,
}

impl EcaParams {
    pub fn new(init: &mut Initializer, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: init.conv_weight(&format!("{prefix}.eca.weight"), [1, 1, 1, ECA_KERNEL], 1)?,
        })
    }
}

/// `(1, 2, 7, 7)` kernel over the stacked channel-mean and channel-max maps.
#[derive(Debug, Clone, Copy)]
pub struct CbamSpatialParams {
    pub weight: ParamId,
}

impl CbamSpatialParams {
    pub fn new(init: &mut Initializer, prefix: &str) -> Result<Self> {
        let k = SPATIAL_KERNEL;
        Ok(Self {
            weight: init.conv_weight(&format!("{prefix}.spatial.weight"), [1, 2, k, k], 1)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NonLocalParams {
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub wz: ParamId,
    /// Residual scale, initialized to zero.
    pub gamma: ParamId,
}

impl NonLocalParams {
    pub fn new(init: &mut Initializer, prefix: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(8) {
            return Err(mismatch(
                "NonLocalParams::new",
                format!("channels {channels} not divisible by 8"),
            ));
        }
        let r = channels / 8;
        Ok(Self {
            theta: init.conv_weight(&format!("{prefix}.theta.weight"), [r, channels, 1, 1], 1)?,
            phi: init.conv_weight(&format!("{prefix}.phi.weight"), [r, channels, 1, 1], 1)?,
            g: init.conv_weight(&format!("{prefix}.g.weight"), [r, channels, 1, 1], 1)?,
            wz: init.conv_weight(&format!("{prefix}.wz.weight"), [channels, r, 1, 1], 1)?,
            gamma: init.scalar(&format!("{prefix}.gamma"), 0.0)?,
        })
    }

    /// The projection weights, without γ.
    pub fn projections(&self) -> [ParamId; 4] {
        [self.theta, self.phi, self.g, self.wz]
    }
}

/// `x ⊙ σ(conv1d(GAP(x)) + conv1d(GMP(x)))`, the gate broadcast over (H, W).
pub fn eca_channel<E: Exec>(ex: &mut E, x: &E::V, p: &EcaParams) -> Result<E::V> {
    let [n, c, _, _] = ex.dims(x);
    let w = ex.param(p.weight);
    let geom = ConvGeom::with_pad(1, [0, ECA_KERNEL / 2], 1);
    let branch = |ex: &mut E, d: E::V| -> Result<E::V> {
        let row = ex.reshape(&d, [n, 1, 1, c])?;
        ex.conv2d(&row, &w, None, geom)
    };
    let avg = ex.global_avg_pool(x);
    let a = branch(ex, avg)?;
    let max = ex.global_max_pool(x);
    let m = branch(ex, max)?;
    let s = ex.add(&a, &m)?;
    let gate = ex.sigmoid(&s);
    let gate = ex.reshape(&gate, [n, c, 1, 1])?;
    ex.mul(x, &gate)
}

/// `x ⊙ σ(conv7x7([mean_c(x); max_c(x)]))`, the gate broadcast over C.
pub fn cbam_spatial<E: Exec>(ex: &mut E, x: &E::V, p: &CbamSpatialParams) -> Result<E::V> {
    let mean = ex.channel_mean(x);
    let max = ex.channel_max(x);
    let stacked = ex.concat_channels(&[mean, max])?;
    let w = ex.param(p.weight);
    let logits = ex.conv2d(&stacked, &w, None, ConvGeom::new(1, SPATIAL_KERNEL / 2, 1))?;
    let gate = ex.sigmoid(&logits);
    ex.mul(x, &gate)
}

pub fn eca_cbam<E: Exec>(ex: &mut E, x: &E::V, eca: &EcaParams, sp: &CbamSpatialParams) -> Result<E::V> {
    let y = eca_channel(ex, x, eca)?;
    cbam_spatial(ex, &y, sp)
}

/// Embedded-Gaussian all-pairs attention over spatial positions: `x + γ·wz(softmax(θᵀφ)·gᵀ)`.
pub fn nonlocal_spatial<E: Exec>(ex: &mut E, x: &E::V, p: &NonLocalParams) -> Result<E::V> {
    let [n, c, h, w] = ex.dims(x);
    if c % 8 != 0 {
        return Err(mismatch("nonlocal_spatial", format!("channels {c} not divisible by 8")));
    }
    let (r, hw) = (c / 8, h * w);
    let one = ConvGeom::new(1, 0, 1);
    let project = |ex: &mut E, id: ParamId| -> Result<E::V> {
        let wt = ex.param(id);
        let y = ex.conv2d(x, &wt, None, one)?;
        ex.reshape(&y, [n, 1, r, hw])
    };
    let theta = project(ex, p.theta)?;
    let theta = ex.transpose_hw(&theta);
    let phi = project(ex, p.phi)?;
    let g = project(ex, p.g)?;
    let g = ex.transpose_hw(&g);
    let sim = ex.matmul(&theta, &phi)?;
    let attn = ex.softmax_rows(&sim);
    let y = ex.matmul(&attn, &g)?;
    let y = ex.transpose_hw(&y);
    let y = ex.reshape(&y, [n, r, h, w])?;
    let wz = ex.param(p.wz);
    let z = ex.conv2d(&y, &wz, None, one)?;
    let gamma = ex.param(p.gamma);
    let z = ex.mul(&z, &gamma)?;
    ex.add(x, &z)
}

pub fn eca_nonlocal<E: Exec>(ex: &mut E, x: &E::V, eca: &EcaParams, nl: &NonLocalParams) -> Result<E::V> {
    let y = eca_channel(ex, x, eca)?;
    nonlocal_spatial(ex, &y, nl)
}
