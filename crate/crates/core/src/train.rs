//! Pretraining loop.
//!
//! Every optimizer step draws `V` micro-batches, runs their forward and
//! backward passes (in parallel, each on its own graph), sums the gradients in
//! micro-batch order and applies one AdamW update.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::BandId;
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mae::{loss_and_grads, FomoNet, MicroResult};
use crate::params::ParamStore;
use crate::raster::Dataset;
use crate::sampler::{MicroBatch, RngState, Sampler};
use crate::tensor::{Real, Tensor};

const INIT_SALT: u64 = 0x1f3d_5b79_a2c4_e608;
const MASK_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.base_lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Validation(format!("invalid optimizer settings {self:?}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Warmup length as a fraction of all steps, used unless `warmup_steps` is set.
    pub warmup_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.05,
            warmup_steps: None,
            min_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, total_steps: u64, base_lr: f64) -> Result<Schedule> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Validation(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total_steps as f64).round() as u64);
        Schedule::new(warmup, total_steps, base_lr, self.min_lr)
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Validation(format!(
                "warmup of {warmup_steps} steps must be shorter than the {total_steps}-step run"
            )));
        }
        if !(min_lr >= 0.0 && min_lr <= base_lr) {
            return Err(Error::Validation(format!(
                "min_lr {min_lr} must lie in [0, base_lr {base_lr}]"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
            min_lr,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Validation(format!(
                "step {step} beyond the {}-step schedule",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr + (self.base_lr - self.min_lr) * cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccumulationConfig {
    /// Micro-batches per optimizer step (V).
    pub micro_batches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Divide the summed gradient by V before the update.
    pub average_over_v: bool,
}

impl Default for AccumulationConfig {
    fn default() -> Self {
        Self {
            micro_batches: 8,
            clip_norm: None,
            average_over_v: false,
        }
    }
}

impl AccumulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batches == 0 {
            return Err(Error::Validation("micro_batches (V) must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Validation(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adds one micro-batch gradient into the running sums.
pub fn accumulate<T: Real>(sums: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if sums.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            sums.len()
        )));
    }
    for (s, g) in sums.iter_mut().zip(grads) {
        if s.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match buffer {:?}",
                g.shape(),
                s.shape()
            )));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(g.data()) {
            *a = *a + b;
        }
    }
    Ok(())
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// First and second moments of every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Zeroes `grads` afterwards.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &mut [Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract("optimizer buffers do not match the parameter set".into()));
    }
    for (id, name, p) in params.iter() {
        let g = &grads[id.index()];
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!("gradient of `{name}` has the wrong shape")));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in parameter `{name}`")));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = T::of(1.0 - cfg.beta1.powf(t));
    let bc2 = T::of(1.0 - cfg.beta2.powf(t));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.eps));
    let lr_t = T::of(lr);
    let decay = one - T::of(lr * cfg.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let p = params.get_mut(id).data_mut();
        let g = grads[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            p[j] = p[j] * decay - lr_t * update;
            g[j] = T::zero();
        }
    }
    Ok(())
}

/// Masking stream of one micro-batch, independent of which thread runs it.
pub fn mask_rng(seed: u64, micro_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_SALT);
    rng.set_stream(micro_index);
    rng
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub micro: usize,
    pub loss: f64,
    pub lr: f64,
    pub dataset: String,
    pub bands: Vec<BandId>,
    pub k: usize,
    pub tokens: usize,
    pub band_loss: BTreeMap<BandId, f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    /// Mean micro-batch loss of every optimizer step run.
    pub step_losses: Vec<f64>,
    pub final_step: u64,
}

pub struct Trainer<T: Real> {
    pub config: RunConfig,
    pub net: FomoNet,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    /// Sampler stream position after the last consumed micro-batch.
    pub sampler_rng: RngState,
    pub step: u64,
    /// Where to write a diagnostic file when training aborts.
    pub dump_dir: Option<PathBuf>,
    /// Compare parameter hashes before and after every accumulation window.
    pub verify_params: bool,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = FomoNet::init(&config.model, &mut params, &mut init_rng(config.seed))?;
        let optimizer = OptimizerState::new(&params);
        let sampler_rng = RngState::capture(&ChaCha8Rng::seed_from_u64(config.seed));
        Ok(Self {
            config,
            net,
            params,
            optimizer,
            sampler_rng,
            step: 0,
            dump_dir: None,
            verify_params: true,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let config = ck.header.config;
        config.validate()?;
        let net = FomoNet::bind(&config.model, &ck.params)?;
        if ck.adam_m.len() != ck.params.len() || ck.adam_v.len() != ck.params.len() {
            return Err(Error::format("optimizer", "moment count differs from parameter count"));
        }
        Ok(Self {
            config,
            net,
            params: ck.params,
            optimizer: OptimizerState {
                m: ck.adam_m,
                v: ck.adam_v,
                t: ck.header.optimizer_t,
            },
            sampler_rng: ck.header.sampler_rng,
            step: ck.header.step,
            dump_dir: None,
            verify_params: true,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                config: self.config.clone(),
                step: self.step,
                epoch: self.epoch(),
                sampler_rng: self.sampler_rng.clone(),
                optimizer_t: self.optimizer.t,
                precision: T::PRECISION,
            },
            params: self.params.clone(),
            adam_m: self.optimizer.m.clone(),
            adam_v: self.optimizer.v.clone(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.config.steps_per_epoch
    }

    pub fn remaining_steps(&self) -> u64 {
        self.config.total_steps().saturating_sub(self.step)
    }

    /// Runs up to `steps` optimizer steps (bounded by the schedule), feeding every
    /// micro-batch record to `sink` in order.
    pub fn run(
        &mut self,
        datasets: &[Dataset],
        steps: u64,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<RunSummary> {
        let steps = steps.min(self.remaining_steps());
        let v = self.config.accumulation.micro_batches;
        let sampler = Sampler::with_rng(self.config.sampler_config(), datasets, self.sampler_rng.restore()?)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Training(format!("worker pool: {e}")))?;
        let mut summary = RunSummary::default();
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<(MicroBatch, RngState)>>(2 * v);
            scope.spawn(move || {
                let mut sampler = sampler;
                loop {
                    let item = sampler.sample_microbatch(datasets).map(|mb| (mb, sampler.rng_state()));
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        break;
                    }
                }
            });
            for _ in 0..steps {
                let mut window = Vec::with_capacity(v);
                let mut state = None;
                for _ in 0..v {
                    let (mb, s) = rx
                        .recv()
                        .map_err(|_| Error::Training("micro-batch producer stopped".into()))??;
                    window.push(mb);
                    state = Some(s);
                }
                let loss = self.apply_window_in(Some(&pool), &window, sink)?;
                self.sampler_rng = state.expect("V >= 1");
                summary.step_losses.push(loss);
            }
            Ok(())
        })?;
        summary.final_step = self.step;
        Ok(summary)
    }

    /// Forward/backward over one accumulation window and a single optimizer step.
    /// Returns the mean micro-batch loss.
    pub fn apply_window(
        &mut self,
        window: &[MicroBatch],
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<f64> {
        self.apply_window_in(None, window, sink)
    }

    fn apply_window_in(
        &mut self,
        pool: Option<&rayon::ThreadPool>,
        window: &[MicroBatch],
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<f64> {
        let lr = self.config.schedule.resolve(self.config.total_steps(), self.config.optimizer.base_lr)?.lr_at(self.step)?;
        let before = self.verify_params.then(|| self.params.hash());
        let base = self.step * window.len() as u64;
        let (net, params, mae, seed) = (&self.net, &self.params, &self.config.mae, self.config.seed);
        let compute = || -> Vec<(Result<MicroResult<T>>, f64)> {
            window
                .par_iter()
                .enumerate()
                .map(|(i, mb)| {
                    let start = Instant::now();
                    let r = loss_and_grads(net, params, mb, mae, &mut mask_rng(seed, base + i as u64));
                    (r, start.elapsed().as_secs_f64() * 1e3)
                })
                .collect()
        };
        let results = match pool {
            Some(p) => p.install(compute),
            None => compute(),
        };
        let mut sums = self.params.zeros_like();
        let mut total = 0.0;
        for (i, ((r, wall_ms), mb)) in results.into_iter().zip(window).enumerate() {
            let r = match r {
                Ok(r) if r.loss.is_finite() => r,
                Ok(r) => return Err(self.abort(i, mb, lr, &format!("loss is {}", r.loss))),
                Err(e @ Error::NonFinite(_)) => return Err(self.abort(i, mb, lr, &e.to_string())),
                Err(e) => return Err(e),
            };
            accumulate(&mut sums, &r.grads)?;
            total += r.loss;
            sink(&MetricsRecord {
                step: self.step,
                micro: i,
                loss: r.loss,
                lr,
                dataset: mb.dataset.clone(),
                bands: mb.bands.clone(),
                k: mb.k(),
                tokens: r.tokens,
                band_loss: r.band_losses.into_iter().collect(),
                wall_ms,
            })?;
        }
        if let Some(h) = before {
            if h != self.params.hash() {
                return Err(Error::Contract(format!(
                    "parameters changed inside accumulation window at step {}",
                    self.step
                )));
            }
        }
        self.step_with(&mut sums, lr)?;
        Ok(total / window.len() as f64)
    }

    /// Applies one optimizer step on already-summed gradients.
    pub fn step_with(&mut self, sums: &mut [Tensor<T>], lr: f64) -> Result<()> {
        let acc = &self.config.accumulation;
        if acc.average_over_v {
            let s = T::of(1.0 / acc.micro_batches as f64);
            for g in sums.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
        if let Some(c) = acc.clip_norm {
            clip_global_norm(sums, c);
        }
        adamw_step(&mut self.params, sums, &mut self.optimizer, &self.config.optimizer, lr)?;
        self.step += 1;
        Ok(())
    }

    fn abort(&self, micro: usize, mb: &MicroBatch, lr: f64, what: &str) -> Error {
        let msg = format!(
            "non-finite loss at step {} micro-batch {micro} (dataset `{}`, bands {:?}): {what}",
            self.step, mb.dataset, mb.bands
        );
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({
                "step": self.step,
                "micro": micro,
                "lr": lr,
                "dataset": mb.dataset,
                "bands": mb.bands,
                "samples": mb.samples.iter().map(|s| &s.sample_id).collect::<Vec<_>>(),
                "param_hash": self.params.hash(),
                "error": what,
            });
            let path = dir.join(format!("abort-step{}.json", self.step));
            if let Err(e) = std::fs::write(&path, dump.to_string()) {
                log::warn!("could not write {}: {e}", path.display());
            }
        }
        Error::Training(msg)
    }
}
