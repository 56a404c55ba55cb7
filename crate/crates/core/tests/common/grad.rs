//! Finite-difference cases for every differentiable primitive and composite.

use lapx::attention::{self, CbamSpatialParams, EcaParams, NonLocalParams};
use lapx::gradcheck::{GradCheck, GradCheckReport};
use lapx::init::Initializer;
use lapx::model::{soft_gated_residual, Model, ModelConfig, ModelError, ResidualBlock};
use lapx::ops::{Activation, ConvGeom};
use lapx::train::multistage_loss_exec;
use lapx::{Exec, Graph, Mode, ParamStore, Result, Tensor, TensorError, Var};
use rand::Rng;

use super::{rng, uniform};

pub type CaseFn = fn(u64) -> Result<GradCheckReport>;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", conv2d as CaseFn),
        ("conv2d_depthwise", conv2d_depthwise),
        ("maxpool2x2", maxpool),
        ("upsample2x", upsample),
        ("batchnorm_train", batchnorm_train),
        ("batchnorm_eval", batchnorm_eval),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("add", add),
        ("mul_broadcast", mul_broadcast),
        ("scale_sum", scale_sum),
        ("concat_channels", concat),
        ("channel_mean_max", channel_reductions),
        ("global_pools", global_pools),
        ("reshape_transpose_matmul", matmul),
        ("softmax_rows", softmax),
        ("heatmap_mse", heatmap_mse),
        ("eca", eca),
        ("cbam_spatial", cbam),
        ("eca_cbam", eca_cbam),
        ("nonlocal", nonlocal),
        ("eca_nonlocal", eca_nonlocal),
        ("residual_block", residual_block),
        ("soft_gated_residual", soft_gate),
        ("multistage_loss", multistage_loss),
        ("tiny_model", tiny_model),
    ]
}

fn check(seed: u64) -> GradCheck {
    GradCheck {
        seed,
        ..GradCheck::default()
    }
}

fn inputs(seed: u64, dims: &[[usize; 4]]) -> Vec<Tensor> {
    let mut r = rng(seed ^ 0xfeed);
    dims.iter().map(|&d| uniform(d, &mut r)).collect()
}

fn plain<F>(seed: u64, dims: &[[usize; 4]], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(seed).run(&ParamStore::new(), &inputs(seed, dims), f)
}

fn conv2d(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 4, 6, 5], [6, 2, 3, 3], [1, 6, 1, 1]], |g, v| {
        g.conv2d(&v[0], &v[1], Some(&v[2]), ConvGeom::new(2, 1, 2))
    })
}

fn conv2d_depthwise(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[1, 4, 5, 5], [4, 1, 3, 3]], |g, v| {
        g.conv2d(&v[0], &v[1], None, ConvGeom::with_pad(1, [0, 1], 4))
    })
}

fn maxpool(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 4, 6]], |g, v| g.maxpool2x2(&v[0]))
}

fn upsample(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[1, 3, 2, 3]], |g, v| Ok(g.upsample2x(&v[0])))
}

fn bn_store(seed: u64, c: usize) -> (ParamStore, lapx::BnRefs) {
    let mut store = ParamStore::new();
    let bn = Initializer::new(&mut store, seed).batchnorm("bn", c).unwrap();
    let mut r = rng(seed);
    for id in [bn.gamma, bn.beta, bn.running_mean] {
        for v in store.get_mut(id).tensor.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    for v in store.get_mut(bn.running_var).tensor.data_mut() {
        *v = r.random_range(0.5..2.0);
    }
    (store, bn)
}

fn batchnorm_train(seed: u64) -> Result<GradCheckReport> {
    let (store, bn) = bn_store(seed, 4);
    check(seed).run(&store, &inputs(seed, &[[3, 4, 3, 3]]), |g, v| g.batchnorm(&v[0], &bn))
}

fn batchnorm_eval(seed: u64) -> Result<GradCheckReport> {
    let (store, bn) = bn_store(seed, 4);
    let gc = GradCheck {
        mode: Mode::Eval,
        ..check(seed)
    };
    gc.run(&store, &inputs(seed, &[[2, 4, 3, 3]]), |g, v| g.batchnorm(&v[0], &bn))
}

fn relu(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 4, 4]], |g, v| Ok(g.activation(&v[0], Activation::Relu)))
}

fn sigmoid(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 4, 4]], |g, v| {
        let x = g.scale(&v[0], 4.0);
        Ok(g.activation(&x, Activation::Sigmoid))
    })
}

fn add(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 4, 4], [2, 3, 4, 4]], |g, v| g.add(&v[0], &v[1]))
}

fn mul_broadcast(seed: u64) -> Result<GradCheckReport> {
    plain(
        seed,
        &[[2, 3, 4, 5], [2, 3, 1, 1], [1, 3, 1, 1], [2, 1, 4, 5], [1, 1, 1, 1]],
        |g, v| {
            let a = g.mul(&v[0], &v[1])?;
            let b = g.mul(&a, &v[2])?;
            let c = g.mul(&b, &v[3])?;
            g.mul(&c, &v[4])
        },
    )
}

fn scale_sum(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 2, 2]], |g, v| {
        let x = g.scale(&v[0], -1.5);
        let prod = g.mul(&x, &v[0])?;
        Ok(g.sum(&prod))
    })
}

fn concat(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 1, 3, 3], [2, 3, 3, 3], [2, 2, 3, 3]], |g, v| {
        g.concat_channels(v)
    })
}

fn channel_reductions(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 5, 3, 4]], |g, v| {
        let m = g.channel_mean(&v[0]);
        let x = g.channel_max(&v[0]);
        g.concat_channels(&[m, x])
    })
}

fn global_pools(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 3, 4, 3]], |g, v| {
        let a = g.global_avg_pool(&v[0]);
        let m = g.global_max_pool(&v[0]);
        g.add(&a, &m)
    })
}

fn matmul(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 1, 12, 1], [2, 1, 4, 5]], |g, v| {
        let a = g.reshape(&v[0], [2, 1, 3, 4])?;
        let b = g.transpose_hw(&v[1]);
        let b = g.transpose_hw(&b);
        g.matmul(&a, &b)
    })
}

fn softmax(seed: u64) -> Result<GradCheckReport> {
    plain(seed, &[[2, 1, 3, 6]], |g, v| {
        let x = g.scale(&v[0], 3.0);
        Ok(g.softmax_rows(&x))
    })
}

fn heatmap_mse(seed: u64) -> Result<GradCheckReport> {
    let target = inputs(seed + 100, &[[2, 3, 4, 4]]).remove(0);
    let mask = [true, false, true, true, true, false];
    plain(seed, &[[2, 3, 4, 4]], move |g, v| g.heatmap_mse(&v[0], &target, &mask))
}

/// Parameters drawn at a scale where every gate and softmax is well away from saturation.
fn randomize(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut r = rng(seed ^ 0xabc);
    for (_, p) in store.iter_mut() {
        if p.trainable {
            for v in p.tensor.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
}

fn eca(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = EcaParams::new(&mut Initializer::new(&mut store, seed), "a")?;
    randomize(&mut store, seed, 0.5);
    check(seed).run(&store, &inputs(seed, &[[2, 9, 3, 4]]), |g, v| {
        attention::eca_channel(g, &v[0], &p)
    })
}

fn cbam(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = CbamSpatialParams::new(&mut Initializer::new(&mut store, seed), "a")?;
    randomize(&mut store, seed, 0.3);
    check(seed).run(&store, &inputs(seed, &[[2, 4, 5, 5]]), |g, v| {
        attention::cbam_spatial(g, &v[0], &p)
    })
}

fn eca_cbam(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let e = EcaParams::new(&mut init, "a")?;
    let s = CbamSpatialParams::new(&mut init, "a")?;
    randomize(&mut store, seed, 0.3);
    check(seed).run(&store, &inputs(seed, &[[2, 8, 4, 4]]), |g, v| {
        attention::eca_cbam(g, &v[0], &e, &s)
    })
}

fn nonlocal_store(seed: u64, c: usize) -> (ParamStore, NonLocalParams) {
    let mut store = ParamStore::new();
    let p = NonLocalParams::new(&mut Initializer::new(&mut store, seed), "nl", c).unwrap();
    randomize(&mut store, seed, 0.6);
    store.get_mut(p.gamma).tensor.data_mut()[0] = 0.7;
    (store, p)
}

fn nonlocal(seed: u64) -> Result<GradCheckReport> {
    let (store, p) = nonlocal_store(seed, 16);
    check(seed).run(&store, &inputs(seed, &[[2, 16, 3, 4]]), |g, v| {
        attention::nonlocal_spatial(g, &v[0], &p)
    })
}

fn eca_nonlocal(seed: u64) -> Result<GradCheckReport> {
    let (mut store, p) = nonlocal_store(seed, 8);
    let e = EcaParams::new(&mut Initializer::new(&mut store, seed), "a")?;
    randomize(&mut store, seed + 1, 0.5);
    store.get_mut(p.gamma).tensor.data_mut()[0] = -0.4;
    check(seed).run(&store, &inputs(seed, &[[1, 8, 4, 4]]), |g, v| {
        attention::eca_nonlocal(g, &v[0], &e, &p)
    })
}

fn residual_block(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let gated = ResidualBlock::new(&mut init, "r0", 6, true)?;
    let plain_block = ResidualBlock::new(&mut init, "r1", 6, false)?;
    check(seed).run(&store, &inputs(seed, &[[2, 6, 4, 4]]), |g, v| {
        let y = gated.forward(g, &v[0])?;
        plain_block.forward(g, &y)
    })
}

fn soft_gate(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let alpha = Initializer::new(&mut store, seed).channel_vec("alpha", 3, 0.5, true)?;
    randomize(&mut store, seed, 1.0);
    check(seed).run(&store, &inputs(seed, &[[2, 3, 3, 3], [2, 3, 3, 3]]), |g, v| {
        soft_gated_residual(g, &v[0], &v[1], alpha)
    })
}

fn multistage_loss(seed: u64) -> Result<GradCheckReport> {
    let target = inputs(seed + 7, &[[2, 2, 3, 3]]).remove(0);
    let mask = [true, true, false, true];
    plain(seed, &[[2, 2, 3, 3], [2, 2, 3, 3], [2, 2, 3, 3]], move |g, v| {
        Ok(multistage_loss_exec(g, v, &target, &mask)?.0)
    })
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// A complete two-stage network with every attention block, checked end to end.
fn tiny_model(seed: u64) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::toy(2, 8);
    cfg.num_keypoints = 2;
    cfg.input_hw = [16, 16];
    cfg.num_pool_levels = 1;
    cfg.nonlocal_stages = vec![1];
    let mut model = Model::build(&cfg, seed).unwrap();
    let gamma = model.gamma_params()[0];
    model.params.get_mut(gamma).tensor.data_mut()[0] = 0.3;
    let gc = GradCheck {
        max_coords: 3,
        ..check(seed)
    };
    gc.run(&model.params, &inputs(seed, &[[2, 3, 16, 16]]), |g, v| {
        let hms = model.forward(g, &v[0]).map_err(model_err)?;
        g.concat_channels(&hms)
    })
}
