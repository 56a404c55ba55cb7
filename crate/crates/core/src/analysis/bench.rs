//! Wall-clock latency of eval-mode forward passes.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::liveness::activation_footprint;
use super::report::with_input_hw;
use crate::model::{Model, ModelError};
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("iters must be at least 1")]
    ZeroIters,
    #[error("threads must be at least 1")]
    ZeroThreads,
    #[error("another benchmark is running in this process")]
    Busy,
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub input_dims: Dims,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    /// Flip testing doubles the forward passes, so this is `fps / 2`.
    pub fps_tta: f64,
    pub peak_activation_bytes: u64,
    pub threads: usize,
    pub host: String,
}

impl BenchReport {
    /// Builds the statistics from raw timings; percentiles use the nearest rank.
    pub fn from_times(times_ms: Vec<f64>, warmup_iters: usize, input_dims: Dims, threads: usize, peak: u64) -> Self {
        let n = times_ms.len();
        let mean_ms = times_ms.iter().sum::<f64>() / n as f64;
        let mut sorted = times_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        let fps = 1000.0 / mean_ms;
        Self {
            input_dims,
            warmup_iters,
            timed_iters: n,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            mean_ms,
            times_ms,
            fps,
            fps_tta: fps / 2.0,
            peak_activation_bytes: peak,
            threads,
            host: host_descriptor(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let [n, c, h, w] = self.input_dims;
        format!(
            "input {n}x{c}x{h}x{w}, {} warmup + {} timed, {} thread(s) on {}\n\
             mean {:.3} ms  p50 {:.3} ms  p95 {:.3} ms\n\
             fps {:.2}  fps (flip test) {:.2}  peak activations+params {:.2} MiB\n",
            self.warmup_iters,
            self.timed_iters,
            self.threads,
            self.host,
            self.mean_ms,
            self.p50_ms,
            self.p95_ms,
            self.fps,
            self.fps_tta,
            self.peak_activation_bytes as f64 / (1024.0 * 1024.0)
        )
    }
}

pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({cpus} cpus)", std::env::consts::OS, std::env::consts::ARCH)
}

static RUNNING: AtomicBool = AtomicBool::new(false);

struct RunGuard;

impl RunGuard {
    fn acquire() -> Result<Self, BenchError> {
        RUNNING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| RunGuard)
            .map_err(|_| BenchError::Busy)
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        RUNNING.store(false, Ordering::Release);
    }
}

/// Times `iters` forward passes after `warmup` discarded ones, on a pool of
/// `threads` workers. Only one benchmark may run per process at a time.
pub fn bench_latency(
    model: &Model,
    input_dims: Dims,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<BenchReport, BenchError> {
    if iters == 0 {
        return Err(BenchError::ZeroIters);
    }
    if threads == 0 {
        return Err(BenchError::ZeroThreads);
    }
    let _guard = RunGuard::acquire()?;
    let resized;
    let model = if [input_dims[2], input_dims[3]] == model.config.input_hw {
        model
    } else {
        resized = with_input_hw(model, [input_dims[2], input_dims[3]])?;
        &resized
    };
    model.check_input(input_dims)?;
    let peak = activation_footprint(model, input_dims)?;
    let input = Tensor::uniform(input_dims, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::ThreadPool(e.to_string()))?;
    let times = pool.install(|| -> Result<Vec<f64>, BenchError> {
        for _ in 0..warmup {
            model.predict(&input)?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            let out = model.predict(&input)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            drop(out);
        }
        Ok(times)
    })?;
    Ok(BenchReport::from_times(times, warmup, input_dims, threads, peak))
}
