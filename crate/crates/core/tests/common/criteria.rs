//! Checks shared by the ordinary integration tests and the acceptance runner.

use std::borrow::Cow;
use std::collections::BTreeMap;

use lapx::analysis::{trace_model, NodeKind};
use lapx::annotations::{AnnotationSet, PoseAnnotation};
use lapx::attention::{self, CbamSpatialParams, EcaParams, NonLocalParams};
use lapx::codec::{decode_heatmaps, encode_heatmaps, flip_merge, mirror_width};
use lapx::init::Initializer;
use lapx::metrics::{ap_over_oks, oks, pckh, OksConstants};
use lapx::model::{Model, ModelConfig, DEFAULT_PRESET};
use lapx::ops::{self, ConvGeom};
use lapx::train::{
    adam_step, heatmap_mse_loss, mean_stage_loss, synth_dataset, synth_flip_pairs, AdamState, GammaSchedule,
    TrainConfig, Trainer,
};
use lapx::{Eager, Exec, Graph, Mode, ParamStore, Tensor};
use rand::Rng;

use super::{jitter, max_err, oracle, random_pose, rng, uniform};

pub const INSTANCES: usize = 100;
pub const NUMERIC_TOL: f64 = 1e-6;
pub const DISCRETE_TOL: f64 = 1e-9;

/// Pass/fail with a one-line explanation.
#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Largest disagreement with the reference over `INSTANCES` random cases, and the tolerance.
pub struct OracleResult {
    pub name: &'static str,
    pub max_err: f64,
    pub tol: f64,
}

impl OracleResult {
    pub fn pass(&self) -> bool {
        self.max_err <= self.tol
    }
}

fn eager<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
where
    F: for<'s> FnOnce(&mut Eager<'s>, &Cow<'s, Tensor>) -> lapx::Result<Cow<'s, Tensor>>,
{
    let mut ex = Eager::new(store);
    let v = ex.input(x.clone());
    f(&mut ex, &v).unwrap().into_owned()
}

pub fn oracle_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let groups = r.random_range(1..=3);
        let (cin_g, cout_g) = (r.random_range(1..=3), r.random_range(1..=3));
        let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
        let stride = r.random_range(1..=2);
        let pad = [r.random_range(0..=2), r.random_range(0..=2)];
        let (h, w) = (r.random_range(kh..=7), r.random_range(kw..=7));
        let n = r.random_range(1..=2);
        let x = uniform([n, groups * cin_g, h, w], &mut r);
        let wt = uniform([groups * cout_g, cin_g, kh, kw], &mut r);
        let bias = r.random_bool(0.5).then(|| uniform([1, groups * cout_g, 1, 1], &mut r));
        let got = ops::conv2d(&x, &wt, bias.as_ref(), ConvGeom::with_pad(stride, pad, groups)).unwrap();
        let (dims, want) = oracle::conv2d(&x, &wt, bias.as_ref().map(|b| b.data()), stride, pad, groups);
        assert_eq!(got.dims(), dims);
        worst = worst.max(max_err(&got, &want));
    }
    worst
}

pub fn oracle_maxpool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let dims = [
            r.random_range(1..=2),
            r.random_range(1..=4),
            2 * r.random_range(1..=4),
            2 * r.random_range(1..=4),
        ];
        let x = uniform(dims, &mut r);
        let (got, _) = ops::maxpool2x2(&x).unwrap();
        let (d, want) = oracle::maxpool2x2(&x);
        assert_eq!(got.dims(), d);
        worst = worst.max(max_err(&got, &want));
    }
    worst
}

/// Every tensor of `store` redrawn from U(-b, b) with `b = 1/sqrt(fan_in)`, the
/// usual default scale of a freshly built layer; a scalar gets U(-1, 1).
fn fan_in_scale(store: &mut ParamStore, r: &mut rand_chacha::ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        let [_, c, h, w] = p.tensor.dims();
        let b = 1.0 / ((c * h * w) as f32).sqrt();
        for v in p.tensor.data_mut() {
            *v = r.random_range(-b..b);
        }
    }
}

pub fn oracle_nonlocal(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let c = 8 * r.random_range(1..=2);
        let mut store = ParamStore::new();
        let p = NonLocalParams::new(&mut Initializer::new(&mut store, seed + i as u64), "nl", c).unwrap();
        fan_in_scale(&mut store, &mut r);
        let x = uniform(
            [r.random_range(1..=2), c, r.random_range(1..=4), r.random_range(1..=4)],
            &mut r,
        );
        let got = eager(&store, &x, |ex, v| attention::nonlocal_spatial(ex, v, &p));
        let t = |id| store.tensor(id);
        let gamma = t(p.gamma).data()[0];
        let want = oracle::nonlocal(&x, t(p.theta), t(p.phi), t(p.g), t(p.wz), gamma);
        worst = worst.max(max_err(&got, &want));
    }
    worst
}

pub fn oracle_eca(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut store = ParamStore::new();
        let p = EcaParams::new(&mut Initializer::new(&mut store, seed + i as u64), "a").unwrap();
        fan_in_scale(&mut store, &mut r);
        let x = uniform(
            [
                r.random_range(1..=2),
                r.random_range(1..=12),
                r.random_range(1..=4),
                r.random_range(1..=4),
            ],
            &mut r,
        );
        let got = eager(&store, &x, |ex, v| attention::eca_channel(ex, v, &p));
        let want = oracle::eca(&x, store.tensor(p.weight).data());
        worst = worst.max(max_err(&got, &want));
    }
    worst
}

pub fn oracle_cbam(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut store = ParamStore::new();
        let p = CbamSpatialParams::new(&mut Initializer::new(&mut store, seed + i as u64), "a").unwrap();
        fan_in_scale(&mut store, &mut r);
        let x = uniform(
            [
                r.random_range(1..=2),
                r.random_range(1..=5),
                r.random_range(1..=8),
                r.random_range(1..=8),
            ],
            &mut r,
        );
        let got = eager(&store, &x, |ex, v| attention::cbam_spatial(ex, v, &p));
        let want = oracle::cbam_spatial(&x, store.tensor(p.weight));
        worst = worst.max(max_err(&got, &want));
    }
    worst
}

pub fn oracle_pckh(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let k = r.random_range(1..=16);
        let gts: Vec<PoseAnnotation> = (0..r.random_range(1..=6))
            .map(|_| random_pose(&mut r, k, 64.0))
            .collect();
        let preds: Vec<PoseAnnotation> = gts.iter().map(|g| jitter(&mut r, g, 12.0)).collect();
        let threshold = [0.1, 0.5, 1.0][r.random_range(0..3)];
        let got = pckh(&preds, &gts, threshold).unwrap();
        let (correct, annotated) = oracle::pckh_counts(&preds, &gts, threshold);
        if got.correct != correct || got.annotated != annotated {
            return f64::INFINITY;
        }
        let (c, a): (usize, usize) = (correct.iter().sum(), annotated.iter().sum());
        let total = if a > 0 { 100.0 * c as f64 / a as f64 } else { 0.0 };
        worst = worst.max((got.total - total).abs());
    }
    worst
}

pub fn oracle_oks(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < INSTANCES {
        let k = [5, 8, 16, 17][r.random_range(0..4)];
        let gt = random_pose(&mut r, k, 64.0);
        if gt.visible_count() == 0 {
            continue;
        }
        let pred = jitter(&mut r, &gt, 6.0);
        let consts = OksConstants::for_keypoints(k);
        let got = oks(&pred, &gt, &consts).unwrap();
        worst = worst.max((got - oracle::oks(&pred, &gt, &consts.0)).abs());
        done += 1;
    }
    worst
}

fn random_set(r: &mut rand_chacha::ChaCha8Rng, k: usize) -> (AnnotationSet, AnnotationSet) {
    let mut gts = BTreeMap::new();
    let mut preds = BTreeMap::new();
    for img in 0..r.random_range(1..=4) {
        let g: Vec<PoseAnnotation> = (0..r.random_range(0..=3)).map(|_| random_pose(r, k, 48.0)).collect();
        let mut p = Vec::new();
        for gt in &g {
            if r.random_bool(0.8) {
                let spread = r.random_range(0.5..8.0);
                p.push(jitter(r, gt, spread));
            }
        }
        for _ in 0..r.random_range(0..=2) {
            p.push(random_pose(r, k, 48.0));
        }
        for pose in &mut p {
            // Coarse scores so ties occur.
            pose.score = Some(r.random_range(0..5) as f32 / 4.0);
        }
        gts.insert(format!("img{img}"), g);
        preds.insert(format!("img{img}"), p);
    }
    (AnnotationSet(preds), AnnotationSet(gts))
}

pub fn oracle_ap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let k = [4, 8, 17][r.random_range(0..3)];
        let (preds, gts) = random_set(&mut r, k);
        let consts = OksConstants::for_keypoints(k);
        let got = ap_over_oks(&preds, &gts, &consts).unwrap();
        worst = worst.max((got.ap - oracle::ap(&preds, &gts, &consts.0)).abs());
    }
    worst
}

type Check = (&'static str, fn(u64) -> f64);

pub fn oracle_suite(seed: u64) -> Vec<OracleResult> {
    let numeric: [Check; 5] = [
        ("conv2d", oracle_conv2d),
        ("maxpool2x2", oracle_maxpool),
        ("nonlocal", oracle_nonlocal),
        ("eca", oracle_eca),
        ("cbam_spatial", oracle_cbam),
    ];
    let discrete: [Check; 3] = [("pckh", oracle_pckh), ("oks", oracle_oks), ("ap_matcher", oracle_ap)];
    let run = |list: &[Check], tol| {
        list.iter()
            .map(|&(name, f)| OracleResult {
                name,
                max_err: f(seed),
                tol,
            })
            .collect::<Vec<_>>()
    };
    let mut out = run(&numeric, NUMERIC_TOL);
    out.extend(run(&discrete, DISCRETE_TOL));
    out
}

pub fn loss_identities() -> Outcome {
    // K = 2, only joint 0 weighted, unit residual over a 2×2 map.
    let pred = Tensor::ones([1, 2, 2, 2]);
    let gt = Tensor::zeros([1, 2, 2, 2]);
    let hand = heatmap_mse_loss(&pred, &gt, &[true, false]).unwrap();
    let mean = mean_stage_loss(&[1.0, 2.0, 3.0]);

    // Masked planes: any values give the same loss and a zero gradient.
    let mut r = rng(11);
    let mask = [true, false, true, false, false, true];
    let target = uniform([2, 3, 4, 4], &mut r);
    let a = uniform([2, 3, 4, 4], &mut r);
    let mut b = a.clone();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        if !mask[i / 16] {
            *v += r.random_range(-5.0..5.0);
        }
    }
    let la = heatmap_mse_loss(&a, &target, &mask).unwrap();
    let lb = heatmap_mse_loss(&b, &target, &mask).unwrap();
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Train);
    let x = g.input_with_grad(b);
    let loss = g.heatmap_mse(&x, &target, &mask).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.input(x).unwrap();
    let masked_zero = grad.data().iter().enumerate().all(|(i, &v)| mask[i / 16] || v == 0.0);
    let pass = hand == 1.0 && mean == 2.0 && la == lb && masked_zero;
    Outcome::new(
        pass,
        format!(
            "hand case {hand}, stage mean {mean}, masked perturbation {la} vs {lb}, masked grads zero: {masked_zero}"
        ),
    )
}

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy(3, 8);
    cfg.num_pool_levels = 2;
    cfg
}

pub fn gamma_schedule() -> Outcome {
    let s = GammaSchedule::default();
    let f = s.freeze_epochs;
    let pts: Vec<f32> = [0, f + 25, f + 50].iter().map(|&e| s.at_epoch(e, -1.0).0).collect();
    let values_ok = pts == [0.0, 0.1, 0.2];

    // A short schedule driven through the trainer: logged γ equals the schedule while pinned.
    let sched = GammaSchedule {
        freeze_epochs: 2,
        ramp_epochs: 2,
        ramp_target: 0.2,
    };
    let data = synth_dataset(8, [64, 64], 8, 77);
    let mut tc = TrainConfig::toy(6, 5);
    tc.gamma = sched.clone();
    tc.batch_size = 4;
    let mut trainer = Trainer::new(&tiny_config(), tc, synth_flip_pairs(8)).unwrap();
    let mut pinned_ok = true;
    let mut after = Vec::new();
    for epoch in 0..6 {
        let rec = trainer.run_epoch(&data, &data[..4]).unwrap();
        let (want, trainable) = sched.at_epoch(epoch, 0.0);
        if !trainable {
            pinned_ok &= rec.gamma.iter().all(|&g| g == want);
        } else if !sched.pins(epoch) {
            after = rec.gamma.clone();
        }
    }
    let moved = !after.is_empty() && after.iter().all(|&g| g != sched.ramp_target);

    // Frozen γ ignores even a large gradient under a direct optimizer step.
    let mut model = Model::build(&tiny_config(), 3).unwrap();
    let id = model.gamma_params()[0];
    let mut adam = AdamState::new(&model.params);
    model.params.get_mut(id).frozen = true;
    model.params.get_mut(id).tensor.grad = Some(vec![50.0]);
    adam_step(&mut model.params, &mut adam, 0.1);
    let frozen_ok = model.params.tensor(id).data()[0] == 0.0;

    // Unfrozen γ receives a non-zero gradient.
    model.params.get_mut(id).frozen = false;
    let x = uniform(model.input_dims(2), &mut rng(5));
    let mut g = Graph::new(&model.params, Mode::Train);
    let xv = g.input(x);
    let hms = model.forward(&mut g, &xv).unwrap();
    let all = g.concat_channels(&hms).unwrap();
    let sq = g.mul(&all, &all).unwrap();
    let loss = g.sum(&sq);
    let grads = g.backward(loss).unwrap();
    let flow = grads.param(id).is_some_and(|t| t.data()[0] != 0.0);

    let pass = values_ok && pinned_ok && moved && frozen_ok && flow;
    Outcome::new(
        pass,
        format!(
            "γ at epochs 0/{}/{} = {pts:?}; pinned in trainer: {pinned_ok}; learns after release: {moved} ({after:?}); frozen under adam: {frozen_ok}; gradient after unfreeze: {flow}",
            f + 25,
            f + 50
        ),
    )
}

pub fn architecture() -> Outcome {
    let cfg = ModelConfig::preset(DEFAULT_PRESET).unwrap();
    let model = Model::build(&cfg, 0).unwrap();
    let quarter = cfg.heatmap_hw();
    let (trace, outputs) = trace_model(&model, model.input_dims(1)).unwrap();
    let smallest = trace
        .iter()
        .filter(|n| n.kind == NodeKind::Op && n.op == "maxpool2x2")
        .map(|n| [n.dims[2], n.dims[3]])
        .min_by_key(|d| d[0] * d[1])
        .unwrap();
    let neck_ok = cfg.num_pool_levels == 4 && quarter == [64, 64] && smallest == [4, 4] && cfg.neck_hw() == [4, 4];
    let has_nl = |s: usize| {
        model
            .params
            .iter()
            .any(|(_, p)| p.name.starts_with(&format!("stage{s}.nonlocal")))
    };
    let stage_ok = has_nl(1) && !has_nl(2) && has_nl(3);
    let hm_dims: Vec<_> = outputs.iter().map(|&i| trace[i].dims).collect();
    let traced_ok = hm_dims.len() == cfg.num_stages && hm_dims.iter().all(|d| *d == [1, cfg.num_keypoints, 64, 64]);

    let toy = Model::build(&ModelConfig::toy(3, 16), 1).unwrap();
    let out = toy.predict(&uniform(toy.input_dims(2), &mut rng(2))).unwrap();
    let eager_ok = out.len() == 3 && out.iter().all(|t| t.dims() == [2, 8, 16, 16]);
    Outcome::new(
        neck_ok && stage_ok && traced_ok && eager_ok,
        format!(
            "{DEFAULT_PRESET}: quarter {quarter:?}, {} pool levels, smallest map {smallest:?}; Non-Local in stages 1/2/3: {}/{}/{}; heatmap sets {} (eager toy: {})",
            cfg.num_pool_levels,
            has_nl(1),
            has_nl(2),
            has_nl(3),
            hm_dims.len(),
            out.len()
        ),
    )
}

pub const ROUND_TRIP_JOINTS: usize = 1000;

/// Worst per-axis decode error over random in-bound joints.
pub fn codec_round_trip_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let hw = [64usize, 48];
    let mut worst = 0.0f64;
    for _ in 0..ROUND_TRIP_JOINTS {
        let x = r.random_range(0.0..=(hw[1] - 1) as f32);
        let y = r.random_range(0.0..=(hw[0] - 1) as f32);
        let ann = PoseAnnotation::new(vec![[x, y, 1.0]], 1.0);
        let (maps, _) = encode_heatmaps(&ann, hw, 2.0);
        let j = decode_heatmaps(&maps, true)[0][0];
        worst = worst.max((j[0] - x).abs().max((j[1] - y).abs()) as f64);
    }
    worst
}

fn swap_channels(t: &Tensor, pairs: &[(usize, usize)]) -> Tensor {
    let [n, k, h, w] = t.dims();
    let mut perm: Vec<usize> = (0..k).collect();
    for &(a, b) in pairs {
        perm.swap(a, b);
    }
    let mut data = Vec::with_capacity(t.numel());
    for b in 0..n {
        for &src in &perm {
            data.extend_from_slice(t.plane(b, src));
        }
    }
    Tensor::new([n, k, h, w], data).unwrap()
}

/// Heatmaps of a mirror-symmetric scene merged with their flipped pass come back unchanged.
pub fn flip_merge_fixed_point(seed: u64) -> bool {
    let pairs = synth_flip_pairs(8);
    let mut r = rng(seed);
    (0..50).all(|_| {
        let base = uniform([2, 8, 6, 7], &mut r);
        let mirrored = swap_channels(&mirror_width(&base), &pairs);
        let sym = Tensor::new(
            base.dims(),
            base.data()
                .iter()
                .zip(mirrored.data())
                .map(|(a, b)| (a + b) * 0.5)
                .collect(),
        )
        .unwrap();
        let symmetric_scene = flip_merge(&sym, &sym, &pairs, 0).unwrap() == sym;
        let flipped = swap_channels(&mirror_width(&base), &pairs);
        let equivariant = flip_merge(&base, &flipped, &pairs, 0).unwrap() == base;
        symmetric_scene && equivariant
    })
}

pub fn codec() -> Outcome {
    let err = codec_round_trip_error(21);
    let fixed = flip_merge_fixed_point(22);
    Outcome::new(
        err <= 0.5 && fixed,
        format!("max per-axis round-trip error {err:.4} px over {ROUND_TRIP_JOINTS} joints; flip_merge fixed point exact: {fixed}"),
    )
}
