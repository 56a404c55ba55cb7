//! Losses, optimizer, schedules, augmentation, synthetic data and the training loop.

mod adam;
mod augment;
mod evaluate;
mod loss;
mod schedule;
mod synth;

pub use adam::{adam_step, AdamState, ADAM_PREFIX};
pub use augment::{augment, augment_with, Affine, AugmentDraw, FLIP_PROBABILITY, MAX_ROTATION_DEG, SCALE_RANGE};
pub use evaluate::{evaluate, predict_heatmaps, predict_poses, EvalOptions, EvalReport, EVAL_BATCH};
pub use loss::{heatmap_mse_loss, mean_stage_loss, multistage_loss, multistage_loss_exec};
pub use schedule::{GammaSchedule, LrSchedule, ScheduleError};
pub use synth::{
    joints_on_foreground, synth_dataset, synth_flip_pairs, synth_joint_groups, synth_rendered, Rendered, JOINT_NAMES,
    MAX_KEYPOINTS, OCCLUSION_RATE,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::PoseAnnotation;
use crate::codec::{encode_batch, CodecError};
use crate::error::TensorError;
use crate::exec::Exec;
use crate::graph::{Graph, Mode};
use crate::metrics::MetricError;
use crate::model::{Model, ModelConfig, ModelError, TensorFile, WeightsError};
use crate::tensor::Tensor;

/// An image `(1, 3, H, W)` with values in `[0, 1]` and its annotation in input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub annotation: PoseAnnotation,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error("non-finite values in `{tensor}` (epoch {epoch}, batch {batch})")]
    NonFinite { epoch: usize, batch: usize, tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything besides the model that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub gamma: GammaSchedule,
    pub seed: u64,
    pub augment: bool,
    /// Also hold θ, φ, g and wz fixed while γ is schedule-controlled.
    pub freeze_nonlocal_projections: bool,
    /// Post-processing used for the per-epoch validation score.
    pub eval: EvalOptions,
}

impl TrainConfig {
    /// Settings for the 64×64 synthetic task: a short γ freeze and ramp, a
    /// step decay late in the run and quarter-offset decoding for validation.
    pub fn toy(epochs: usize, seed: u64) -> Self {
        let decay = (epochs * 4 / 5).max(1);
        Self {
            epochs,
            batch_size: 8,
            lr: LrSchedule::new(2e-3, vec![decay], 0.3).expect("valid schedule"),
            gamma: GammaSchedule {
                freeze_epochs: 3,
                ramp_epochs: 10,
                ramp_target: 0.2,
            },
            seed,
            augment: true,
            freeze_nonlocal_projections: false,
            eval: EvalOptions {
                quarter_offset: true,
                ..EvalOptions::default()
            },
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// γ of each Non-Local block at the end of the epoch.
    pub gamma: Vec<f32>,
    pub stage_loss: Vec<f64>,
    pub total_loss: f64,
    pub val_pckh: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Owns the model and optimizer across epochs.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub log: Vec<EpochRecord>,
    flip_pairs: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        model_cfg: &ModelConfig,
        config: TrainConfig,
        flip_pairs: Vec<(usize, usize)>,
    ) -> Result<Self, TrainError> {
        if config.batch_size == 0 {
            return Err(TrainError::Setup("batch_size must be at least 1".into()));
        }
        crate::annotations::check_flip_pairs(&flip_pairs, model_cfg.num_keypoints).map_err(TrainError::Setup)?;
        let model = Model::build(model_cfg, config.seed)?;
        let adam = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(Self {
            model,
            adam,
            config,
            log: Vec::new(),
            flip_pairs,
            rng,
        })
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    fn apply_gamma_schedule(&mut self, epoch: usize) {
        let sched = &self.config.gamma;
        let pins = sched.pins(epoch);
        let mut frozen = false;
        for id in self.model.gamma_params() {
            let p = self.model.params.get_mut(id);
            let (value, trainable) = sched.at_epoch(epoch, p.tensor.data()[0]);
            if pins {
                p.tensor.data_mut()[0] = value;
            }
            p.frozen = !trainable;
            frozen |= !trainable;
        }
        let freeze_proj = frozen && self.config.freeze_nonlocal_projections;
        for id in self.model.nonlocal_projection_params() {
            self.model.params.get_mut(id).frozen = freeze_proj;
        }
    }

    fn first_non_finite_param(&self) -> Option<String> {
        self.model
            .params
            .iter()
            .find(|(_, p)| !p.tensor.all_finite())
            .map(|(_, p)| p.name.clone())
    }

    /// One optimizer step; returns per-stage losses.
    fn step(&mut self, batch: &[TrainSample], epoch: usize, index: usize, lr: f64) -> Result<Vec<f32>, TrainError> {
        let cfg = &self.model.config;
        let [in_h, in_w] = cfg.input_hw;
        let hm_hw = cfg.heatmap_hw();
        let (sx, sy) = (hm_hw[1] as f32 / in_w as f32, hm_hw[0] as f32 / in_h as f32);
        let scaled: Vec<PoseAnnotation> = batch
            .iter()
            .map(|s| {
                let joints = s
                    .annotation
                    .joints
                    .iter()
                    .map(|j| [j[0] * sx, j[1] * sy, j[2]])
                    .collect();
                PoseAnnotation::new(joints, s.annotation.norm)
            })
            .collect();
        let refs: Vec<&PoseAnnotation> = scaled.iter().collect();
        let (target, mask) = encode_batch(&refs, hm_hw, cfg.heatmap_sigma);
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let images = Tensor::stack(&images)?;
        let non_finite = |tensor: String| TrainError::NonFinite {
            epoch,
            batch: index,
            tensor,
        };

        let (per_stage, grads, stats) = {
            let mut g = Graph::new(&self.model.params, Mode::Train);
            let x = g.input(images);
            let heatmaps = self.model.forward(&mut g, &x)?;
            if let Some(s) = heatmaps.iter().position(|h| !g.value(*h).all_finite()) {
                let name = self
                    .first_non_finite_param()
                    .unwrap_or(format!("stage{}.heatmaps", s + 1));
                return Err(non_finite(name));
            }
            let (total, per_stage) = multistage_loss_exec(&mut g, &heatmaps, &target, &mask)?;
            let per_stage: Vec<f32> = per_stage.iter().map(|v| g.value(*v).data()[0]).collect();
            if !g.value(total).all_finite() {
                return Err(non_finite("loss".into()));
            }
            let stats = g.take_stat_updates();
            (per_stage, g.backward(total)?, stats)
        };
        if let Some((id, _)) = grads.params().find(|(_, t)| !t.all_finite()) {
            return Err(non_finite(format!("grad/{}", self.model.params.get(id).name)));
        }
        for u in stats {
            self.model
                .params
                .get_mut(u.id)
                .tensor
                .data_mut()
                .copy_from_slice(&u.values);
        }
        grads.write_to(&mut self.model.params);
        adam_step(&mut self.model.params, &mut self.adam, lr);
        self.model.params.clear_grads();
        if let Some(name) = self.first_non_finite_param() {
            return Err(non_finite(name));
        }
        Ok(per_stage)
    }

    /// Trains one epoch over shuffled mini-batches, then scores `val`.
    pub fn run_epoch(&mut self, train: &[TrainSample], val: &[TrainSample]) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset("training"));
        }
        if val.is_empty() {
            return Err(TrainError::EmptyDataset("validation"));
        }
        let epoch = self.log.len();
        let lr = self.config.lr.at_epoch(epoch);
        self.apply_gamma_schedule(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let stages = self.model.num_stages();
        let mut sums = vec![0.0f64; stages];
        for (index, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    if self.config.augment {
                        augment(&train[i], &mut self.rng, &self.flip_pairs)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let per_stage = self.step(&batch, epoch, index, lr)?;
            for (s, l) in sums.iter_mut().zip(per_stage) {
                *s += l as f64 * chunk.len() as f64;
            }
        }
        let stage_loss: Vec<f64> = sums.iter().map(|s| s / train.len() as f64).collect();
        let total_loss = stage_loss.iter().sum::<f64>() / stages as f64;
        let report = evaluate(&self.model, val, &self.flip_pairs, self.config.eval)?;
        let record = EpochRecord {
            epoch,
            lr,
            gamma: self
                .model
                .gamma_params()
                .into_iter()
                .map(|id| self.model.params.tensor(id).data()[0])
                .collect(),
            stage_loss,
            total_loss,
            val_pckh: report.pckh.total,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// Model weights followed by the optimizer sidecar.
    pub fn checkpoint(&self) -> TensorFile {
        let mut f = self.model.to_tensor_file();
        self.adam.write_sidecar(&self.model.params, &mut f);
        f
    }
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
}

/// Runs `config.epochs` epochs, writing each record as a JSON line to `log_sink`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    config: TrainConfig,
    train: &[TrainSample],
    val: &[TrainSample],
    flip_pairs: Vec<(usize, usize)>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(model_cfg, config, flip_pairs)?;
    for _ in 0..trainer.config.epochs {
        let record = trainer.run_epoch(train, val)?;
        if let Some(sink) = log_sink.as_mut() {
            writeln!(sink, "{}", record.to_json_line())?;
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        adam: trainer.adam,
        log: trainer.log,
    })
}
