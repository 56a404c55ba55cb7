//! The multi-stage hourglass network.

mod config;
mod weights;

pub use config::{ConfigError, ModelConfig, DEFAULT_PRESET, PRESET_NAMES};
pub use weights::{write_atomic, NamedTensor, TensorFile, WeightsError};

use thiserror::Error;

use crate::attention::{self, CbamSpatialParams, EcaParams, NonLocalParams};
use crate::error::TensorError;
use crate::exec::{BnRefs, Eager, Exec};
use crate::init::Initializer;
use crate::ops::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input dims {actual:?} do not match the configured {expected:?}")]
    InputShape { expected: Dims, actual: Dims },
    #[error("stage {index} out of range 1..={stages}")]
    StageIndex { index: usize, stages: usize },
}

/// Heatmap heads start near zero so early losses reflect the targets alone.
pub const HEAD_INIT_STD: f32 = 1e-3;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// `x + α ⊙ f`, with per-channel `α` broadcast over (N, H, W).
pub fn soft_gated_residual<E: Exec>(
    ex: &mut E,
    x: &E::V,
    block_output: &E::V,
    alpha: ParamId,
) -> Result<E::V, TensorError> {
    let a = ex.param(alpha);
    let gated = ex.mul(block_output, &a)?;
    ex.add(x, &gated)
}

/// Depthwise 3×3 → BN → ReLU → pointwise 1×1 → BN → ReLU, added back to the input.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub dw: ParamId,
    pub bn1: BnRefs,
    pub pw: ParamId,
    pub bn2: BnRefs,
    /// Soft gate; `None` gives a plain residual.
    pub alpha: Option<ParamId>,
    name: String,
}

impl ResidualBlock {
    pub fn new(init: &mut Initializer, prefix: &str, c: usize, soft_gate: bool) -> Result<Self, TensorError> {
        Ok(Self {
            dw: init.conv_weight(&format!("{prefix}.dw.weight"), [c, 1, 3, 3], c)?,
            bn1: init.batchnorm(&format!("{prefix}.bn1"), c)?,
            pw: init.conv_weight(&format!("{prefix}.pw.weight"), [c, c, 1, 1], 1)?,
            bn2: init.batchnorm(&format!("{prefix}.bn2"), c)?,
            alpha: if soft_gate {
                Some(init.channel_vec(&format!("{prefix}.alpha"), c, 1.0, true)?)
            } else {
                None
            },
            name: prefix.to_string(),
        })
    }

    /// The residual branch `F(x)`.
    pub fn branch<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V, TensorError> {
        let c = ex.dims(x)[1];
        let w = ex.param(self.dw);
        let y = ex.conv2d(x, &w, None, ConvGeom::new(1, 1, c))?;
        let y = ex.batchnorm(&y, &self.bn1)?;
        let y = ex.relu(&y);
        let w = ex.param(self.pw);
        let y = ex.conv2d(&y, &w, None, ConvGeom::new(1, 0, 1))?;
        let y = ex.batchnorm(&y, &self.bn2)?;
        Ok(ex.relu(&y))
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V, TensorError> {
        ex.push_scope(&self.name);
        let f = self.branch(ex, x)?;
        let out = match self.alpha {
            Some(a) => soft_gated_residual(ex, x, &f, a),
            None => ex.add(x, &f),
        };
        ex.pop_scope();
        out
    }
}

fn run_blocks<E: Exec>(ex: &mut E, blocks: &[ResidualBlock], x: E::V) -> Result<E::V, TensorError> {
    blocks.iter().try_fold(x, |v, b| b.forward(ex, &v))
}

#[derive(Debug, Clone, Copy)]
struct EcaCbam {
    eca: EcaParams,
    spatial: CbamSpatialParams,
}

impl EcaCbam {
    fn new(init: &mut Initializer, prefix: &str) -> Result<Self, TensorError> {
        Ok(Self {
            eca: EcaParams::new(init, prefix)?,
            spatial: CbamSpatialParams::new(init, prefix)?,
        })
    }

    fn forward<E: Exec>(&self, ex: &mut E, x: &E::V, scope: &str) -> Result<E::V, TensorError> {
        ex.push_scope(scope);
        let y = attention::eca_cbam(ex, x, &self.eca, &self.spatial);
        ex.pop_scope();
        y
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    geom: ConvGeom,
}

impl Conv {
    fn forward<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V, TensorError> {
        let w = ex.param(self.w);
        let b = self.b.map(|b| ex.param(b));
        ex.conv2d(x, &w, b.as_ref(), self.geom)
    }

    fn pointwise(init: &mut Initializer, prefix: &str, cin: usize, cout: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w: init.conv_weight(&format!("{prefix}.weight"), [cout, cin, 1, 1], 1)?,
            b: Some(init.channel_vec(&format!("{prefix}.bias"), cout, 0.0, true)?),
            geom: ConvGeom::new(1, 0, 1),
        })
    }
}

/// Quarter-resolution stem: strided 3×3 conv, then a strided depthwise-separable block.
#[derive(Debug, Clone)]
struct Stem {
    conv: ParamId,
    bn0: BnRefs,
    dw: ParamId,
    bn1: BnRefs,
    pw: ParamId,
    bn2: BnRefs,
    blocks: Vec<ResidualBlock>,
    attention: Option<EcaCbam>,
}

impl Stem {
    fn new(init: &mut Initializer, cfg: &ModelConfig) -> Result<Self, TensorError> {
        let (c, h) = (cfg.channels, cfg.channels / 2);
        Ok(Self {
            conv: init.conv_weight("stem.conv.weight", [h, 3, 3, 3], 1)?,
            bn0: init.batchnorm("stem.bn0", h)?,
            dw: init.conv_weight("stem.dw.weight", [h, 1, 3, 3], h)?,
            bn1: init.batchnorm("stem.bn1", h)?,
            pw: init.conv_weight("stem.pw.weight", [c, h, 1, 1], 1)?,
            bn2: init.batchnorm("stem.bn2", c)?,
            blocks: (0..cfg.stem_blocks)
                .map(|i| ResidualBlock::new(init, &format!("stem.block{i}"), c, cfg.use_soft_gate))
                .collect::<Result<_, _>>()?,
            attention: if cfg.use_stem_eca_cbam {
                Some(EcaCbam::new(init, "stem.att")?)
            } else {
                None
            },
        })
    }

    fn forward<E: Exec>(&self, ex: &mut E, x: &E::V) -> Result<E::V, TensorError> {
        ex.push_scope("stem");
        let w = ex.param(self.conv);
        let y = ex.conv2d(x, &w, None, ConvGeom::new(2, 1, 1))?;
        let y = ex.batchnorm(&y, &self.bn0)?;
        let y = ex.relu(&y);
        let g = ex.dims(&y)[1];
        let w = ex.param(self.dw);
        let y = ex.conv2d(&y, &w, None, ConvGeom::new(2, 1, g))?;
        let y = ex.batchnorm(&y, &self.bn1)?;
        let y = ex.relu(&y);
        let w = ex.param(self.pw);
        let y = ex.conv2d(&y, &w, None, ConvGeom::new(1, 0, 1))?;
        let y = ex.batchnorm(&y, &self.bn2)?;
        let y = ex.relu(&y);
        ex.pop_scope();
        let y = run_blocks(ex, &self.blocks, y)?;
        match &self.attention {
            Some(a) => a.forward(ex, &y, "stem.att"),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct Level {
    encoder: Vec<ResidualBlock>,
    skip: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
struct NonLocalBlock {
    eca: EcaParams,
    nl: NonLocalParams,
}

#[derive(Debug, Clone)]
struct Stage {
    index: usize,
    levels: Vec<Level>,
    neck: ResidualBlock,
    nonlocal: Option<NonLocalBlock>,
    attention: Option<EcaCbam>,
    head: Conv,
    /// 1×1 remaps of decoder output and heatmaps into the next stage's input.
    remap: Option<(Conv, Conv)>,
}

impl Stage {
    fn new(init: &mut Initializer, cfg: &ModelConfig, index: usize) -> Result<Self, TensorError> {
        let (c, k, gate) = (cfg.channels, cfg.num_keypoints, cfg.use_soft_gate);
        let p = format!("stage{index}");
        let mut levels = Vec::with_capacity(cfg.num_pool_levels);
        for l in 0..cfg.num_pool_levels {
            let encoder = (0..cfg.blocks_per_level)
                .map(|i| ResidualBlock::new(init, &format!("{p}.level{l}.enc{i}"), c, gate))
                .collect::<Result<_, _>>()?;
            let skip = (0..cfg.skip_blocks)
                .map(|i| ResidualBlock::new(init, &format!("{p}.level{l}.skip{i}"), c, gate))
                .collect::<Result<_, _>>()?;
            levels.push(Level { encoder, skip });
        }
        let neck = ResidualBlock::new(init, &format!("{p}.neck"), c, gate)?;
        let nonlocal = if cfg.has_nonlocal(index) {
            let prefix = format!("{p}.nonlocal");
            Some(NonLocalBlock {
                eca: EcaParams::new(init, &prefix)?,
                nl: NonLocalParams::new(init, &prefix, c)?,
            })
        } else {
            None
        };
        let attention = if cfg.use_eca_cbam {
            Some(EcaCbam::new(init, &format!("{p}.att"))?)
        } else {
            None
        };
        let head = Conv {
            w: init.conv_weight_std(&format!("{p}.head.weight"), [k, c, 1, 1], HEAD_INIT_STD)?,
            b: Some(init.channel_vec(&format!("{p}.head.bias"), k, 0.0, true)?),
            geom: ConvGeom::new(1, 0, 1),
        };
        let remap = if index < cfg.num_stages {
            Some((
                Conv::pointwise(init, &format!("{p}.remap_feat"), c, c)?,
                Conv::pointwise(init, &format!("{p}.remap_hm"), k, c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            index,
            levels,
            neck,
            nonlocal,
            attention,
            head,
            remap,
        })
    }

    /// Returns (features for the next stage, heatmaps). The final stage has no
    /// remap and returns its decoder output as features.
    fn forward<E: Exec>(&self, ex: &mut E, f: &E::V) -> Result<(E::V, E::V), TensorError> {
        let p = format!("stage{}", self.index);
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut cur = f.clone();
        for (l, level) in self.levels.iter().enumerate() {
            let e = run_blocks(ex, &level.encoder, cur)?;
            skips.push(run_blocks(ex, &level.skip, e.clone())?);
            ex.push_scope(&format!("{p}.level{l}.pool"));
            cur = ex.maxpool2x2(&e)?;
            ex.pop_scope();
        }
        let mut u = self.neck.forward(ex, &cur)?;
        drop(cur);
        if let Some(nb) = &self.nonlocal {
            ex.push_scope(&format!("{p}.nonlocal"));
            u = attention::eca_nonlocal(ex, &u, &nb.eca, &nb.nl)?;
            ex.pop_scope();
        }
        for l in (0..self.levels.len()).rev() {
            ex.push_scope(&format!("{p}.level{l}.up"));
            let up = ex.upsample2x(&u);
            let skip = skips.pop().expect("one skip per level");
            u = ex.add(&up, &skip)?;
            ex.pop_scope();
        }
        if let Some(a) = &self.attention {
            u = a.forward(ex, &u, &format!("{p}.att"))?;
        }
        ex.push_scope(&format!("{p}.head"));
        let hm = self.head.forward(ex, &u)?;
        ex.pop_scope();
        let feats = match &self.remap {
            Some((rf, rh)) => {
                ex.push_scope(&format!("{p}.remap"));
                let a = rf.forward(ex, &u)?;
                let b = rh.forward(ex, &hm)?;
                let s = ex.add(f, &a)?;
                let s = ex.add(&s, &b)?;
                ex.pop_scope();
                s
            }
            None => u,
        };
        Ok((feats, hm))
    }
}

/// A built network: configuration, parameters and layer structure.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    stem: Stem,
    stages: Vec<Stage>,
}

impl Model {
    /// Deterministic construction from a validated config.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, seed);
        let stem = Stem::new(&mut init, config)?;
        let stages = (1..=config.num_stages)
            .map(|s| Stage::new(&mut init, config, s))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: config.clone(),
            params,
            stem,
            stages,
        })
    }

    pub fn input_dims(&self, batch: usize) -> Dims {
        let [h, w] = self.config.input_hw;
        [batch, 3, h, w]
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let expected = self.input_dims(dims[0]);
        if dims != expected {
            return Err(ModelError::InputShape { expected, actual: dims });
        }
        Ok(())
    }

    /// Stem output: `(N, channels, H/4, W/4)`.
    pub fn stem_forward<E: Exec>(&self, ex: &mut E, images: &E::V) -> Result<E::V> {
        self.check_input(ex.dims(images))?;
        Ok(self.stem.forward(ex, images)?)
    }

    /// One hourglass stage (1-based index) applied to features `f`.
    pub fn hourglass_forward<E: Exec>(&self, ex: &mut E, f: &E::V, stage_index: usize) -> Result<(E::V, E::V)> {
        let stage = stage_index
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or(ModelError::StageIndex {
                index: stage_index,
                stages: self.stages.len(),
            })?;
        Ok(stage.forward(ex, f)?)
    }

    /// Heatmaps of every stage, in order; the last one is the prediction.
    pub fn forward<E: Exec>(&self, ex: &mut E, images: &E::V) -> Result<Vec<E::V>> {
        let mut f = self.stem_forward(ex, images)?;
        let mut heatmaps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (next, hm) = stage.forward(ex, &f)?;
            heatmaps.push(hm);
            f = next;
        }
        Ok(heatmaps)
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut ex = Eager::new(&self.params);
        let x = ex.input(images.clone());
        Ok(self.forward(&mut ex, &x)?.into_iter().map(|v| v.into_owned()).collect())
    }

    /// γ of every Non-Local block, in stage order.
    pub fn gamma_params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .filter_map(|s| s.nonlocal.as_ref().map(|nb| nb.nl.gamma))
            .collect()
    }

    /// θ, φ, g and wz of every Non-Local block.
    pub fn nonlocal_projection_params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .filter_map(|s| s.nonlocal.as_ref())
            .flat_map(|nb| nb.nl.projections())
            .collect()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}
