//! Browser bindings: a tiny masked autoencoder trained in the page, the
//! sampler's empirical distribution and the learning-rate schedule.

use fomo_core::bands::BandRegistry;
use fomo_core::Error;
use fomo_core::mae::{loss_and_grads, reconstruct_sample, FomoNet, MaeOptions, ModelConfig};
use fomo_core::params::ParamStore;
use fomo_core::raster::{synth_pretraining_corpus, Dataset};
use fomo_core::sampler::{empirical_check, Sampler, SamplerConfig};
use fomo_core::train::{adamw_step, init_rng, mask_rng, AdamWConfig, OptimizerState, ScheduleConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn demo_model() -> ModelConfig {
    ModelConfig {
        dim: 32,
        depth: 2,
        heads: 2,
        decoder_depth: 1,
        decoder_width: 32,
        decoder_heads: 2,
        ..ModelConfig::default()
    }
}

/// Small model plus synthetic corpus, trained step by step from the page.
#[wasm_bindgen]
pub struct Demo {
    net: FomoNet,
    store: ParamStore<f32>,
    opt: OptimizerState<f32>,
    optimizer: AdamWConfig,
    datasets: Vec<Dataset>,
    sampler: Sampler,
    mae: MaeOptions,
    lr: f64,
    step: u64,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        let reg = BandRegistry::canonical();
        let datasets = synth_pretraining_corpus(&reg, 8, 16, 4, seed).map_err(js_err)?;
        let mut store = ParamStore::new();
        let net = FomoNet::init(&demo_model(), &mut store, &mut init_rng(seed)).map_err(js_err)?;
        let sampler_cfg = SamplerConfig {
            k_max: 4,
            train_size: 16,
            micro_batch_size: 4,
            seed,
        };
        let sampler = Sampler::new(sampler_cfg, &datasets).map_err(js_err)?;
        Ok(Demo {
            opt: OptimizerState::new(&store),
            optimizer: AdamWConfig::default(),
            net,
            store,
            datasets,
            sampler,
            mae: MaeOptions::default(),
            lr: 1e-3,
            step: 0,
            losses: Vec::new(),
        })
    }

    /// Runs `steps` single-micro-batch updates; returns the mean loss.
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        let mut total = 0.0;
        for _ in 0..steps {
            let mb = self.sampler.sample_microbatch(&self.datasets).map_err(js_err)?;
            let r = loss_and_grads(&self.net, &self.store, &mb, &self.mae, &mut mask_rng(0, self.step))
                .map_err(js_err)?;
            let mut grads = r.grads;
            adamw_step(&mut self.store, &mut grads, &mut self.opt, &self.optimizer, self.lr).map_err(js_err)?;
            self.losses.push(r.loss);
            self.step += 1;
            total += r.loss;
        }
        Ok(total / steps.max(1) as f64)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Loss history as a JSON array.
    pub fn losses(&self) -> String {
        json!(self.losses).to_string()
    }

    /// Masks one sample of `dataset` and returns target, reconstruction and
    /// mask per band as JSON.
    pub fn reconstruct(&self, dataset: usize, mask_ratio: f64, mask_seed: u64) -> Result<String, JsError> {
        self.reconstruct_json(dataset, mask_ratio, mask_seed).map_err(js_err)
    }

    /// Names of the corpus datasets as a JSON array.
    pub fn datasets(&self) -> String {
        json!(self.datasets.iter().map(|d| &d.name).collect::<Vec<_>>()).to_string()
    }
}

impl Demo {
    pub fn reconstruct_json(&self, dataset: usize, mask_ratio: f64, mask_seed: u64) -> fomo_core::Result<String> {
        let mut ds = self
            .datasets
            .get(dataset)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("dataset {dataset} out of range")))?;
        ds.weight = 1.0;
        let name = ds.name.clone();
        let cfg = SamplerConfig {
            k_max: 4,
            train_size: 16,
            micro_batch_size: 1,
            seed: mask_seed,
        };
        let one = [ds];
        let mb = Sampler::new(cfg, &one)?.sample_microbatch(&one)?;
        let opts = MaeOptions {
            mask_ratio,
            ..self.mae.clone()
        };
        let (bands, loss) = reconstruct_sample(&self.net, &self.store, &mb, &opts, mask_seed)?;
        let bands: Vec<_> = bands
            .iter()
            .map(|b| json!({"band": b.band.0, "target": b.target, "reconstruction": b.reconstruction, "masked": b.masked}))
            .collect();
        Ok(json!({
            "dataset": name,
            "size": 16,
            "patch": self.net.config.patch_size,
            "loss": loss,
            "bands": bands,
        })
        .to_string())
    }
}

/// Learning rate at every step of a warmup + cosine schedule, as JSON.
#[wasm_bindgen]
pub fn lr_curve(total_steps: u64, base_lr: f64, warmup_fraction: f64, min_lr: f64) -> Result<String, JsError> {
    let cfg = ScheduleConfig {
        warmup_fraction,
        warmup_steps: None,
        min_lr,
    };
    let schedule = cfg.resolve(total_steps, base_lr).map_err(js_err)?;
    let lrs = (0..=total_steps).map(|s| schedule.lr_at(s)).collect::<Result<Vec<_>, _>>().map_err(js_err)?;
    Ok(json!({"warmup_steps": schedule.warmup_steps, "lr": lrs}).to_string())
}

/// Empirical dataset and band-count frequencies of `draws` sampler draws
/// against the configured pretraining weights, as JSON.
#[wasm_bindgen]
pub fn sampler_distribution(draws: usize, k_max: usize, seed: u64) -> Result<String, JsError> {
    let datasets = synth_pretraining_corpus(&BandRegistry::canonical(), 2, 16, 1, 0).map_err(js_err)?;
    let sc = SamplerConfig {
        k_max,
        train_size: 16,
        micro_batch_size: 1,
        seed,
    };
    let report = empirical_check(draws, &sc, &datasets).map_err(js_err)?;
    serde_json::to_string(&report).map_err(js_err)
}
