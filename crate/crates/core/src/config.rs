//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bands::BandRegistry;
use crate::error::{Error, Result};
use crate::mae::{MaeOptions, ModelConfig};
use crate::raster::{self, Dataset};
use crate::sampler::SamplerConfig;
use crate::tensor::Precision;
use crate::train::{AccumulationConfig, AdamWConfig, ScheduleConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub manifest: PathBuf,
    /// Overrides the weight stored in the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusConfig {
    /// Synthetic stand-ins for the six pretraining sources.
    Synthetic {
        families: usize,
        samples_per_dataset: usize,
        tile_size: usize,
        seed: u64,
    },
    /// Datasets on disk, one manifest each.
    Manifests { datasets: Vec<DatasetRef> },
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig::Synthetic {
            families: 4,
            samples_per_dataset: 64,
            tile_size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Band registry file; the shipped 36-band registry when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub accumulation: AccumulationConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub mae: MaeOptions,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    /// Save a checkpoint every this many optimizer steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            registry: None,
            corpus: CorpusConfig::default(),
            sampler: SamplerConfig {
                train_size: 16,
                ..SamplerConfig::default()
            },
            model,
            accumulation: AccumulationConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            mae: MaeOptions::default(),
            epochs: 1,
            steps_per_epoch: 2000,
            checkpoint_every: 0,
            seed: 0,
            precision: Precision::F32,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// Paper-scale hyperparameters: ViT-Base encoder, 64×64 crops, k_max 4, 300 epochs.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::full(),
            sampler: SamplerConfig {
                k_max: 4,
                train_size: 64,
                micro_batch_size: 64,
                seed: 0,
            },
            corpus: CorpusConfig::Synthetic {
                families: 4,
                samples_per_dataset: 64,
                tile_size: 64,
                seed: 7,
            },
            epochs: 300,
            steps_per_epoch: 1000,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(r), Some(dir)) = (&cfg.registry, path.parent()) {
            cfg.registry = Some(dir.join(r));
        }
        if let (CorpusConfig::Manifests { datasets }, Some(dir)) = (&mut cfg.corpus, path.parent()) {
            for d in datasets.iter_mut() {
                d.manifest = dir.join(&d.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    /// Sampler settings with the run seed applied.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            ..self.sampler.clone()
        }
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate(self.model.num_bands, self.model.patch_size)?;
        let n = (self.sampler.train_size / self.model.patch_size).pow(2);
        if n > self.model.max_positions {
            return Err(Error::Validation(format!(
                "{n} patches per band exceed max_positions {}",
                self.model.max_positions
            )));
        }
        self.accumulation.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Validation("epochs and steps_per_epoch must be positive".into()));
        }
        self.schedule.resolve(self.total_steps(), self.optimizer.base_lr)?;
        if !(0.0..1.0).contains(&self.mae.mask_ratio) {
            return Err(Error::Validation(format!(
                "mask ratio {} outside [0, 1)",
                self.mae.mask_ratio
            )));
        }
        match &self.corpus {
            CorpusConfig::Synthetic {
                families,
                samples_per_dataset,
                tile_size,
                ..
            } => {
                if *families < 2 || *families > raster::MAX_FAMILIES {
                    return Err(Error::Validation(format!(
                        "families must be in 2..={}, got {families}",
                        raster::MAX_FAMILIES
                    )));
                }
                if *samples_per_dataset == 0 {
                    return Err(Error::Validation("samples_per_dataset must be positive".into()));
                }
                if *tile_size < self.sampler.train_size {
                    return Err(Error::Validation(format!(
                        "tile_size {tile_size} is smaller than train_size {}",
                        self.sampler.train_size
                    )));
                }
            }
            CorpusConfig::Manifests { datasets } => {
                if datasets.is_empty() {
                    return Err(Error::Validation("corpus lists no datasets".into()));
                }
                let weights: Vec<f64> = datasets.iter().filter_map(|d| d.weight).collect();
                if weights.len() == datasets.len() {
                    raster::validate_weights(&weights)?;
                }
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<BandRegistry> {
        let reg = match &self.registry {
            Some(p) => BandRegistry::load(p)?,
            None => BandRegistry::canonical(),
        };
        if reg.len() != self.model.num_bands {
            return Err(Error::Validation(format!(
                "registry has {} bands but model.num_bands is {}",
                reg.len(),
                self.model.num_bands
            )));
        }
        Ok(reg)
    }

    /// Builds or loads the training corpus and checks it against the sampler settings.
    pub fn datasets(&self, registry: &BandRegistry) -> Result<Vec<Dataset>> {
        let datasets = match &self.corpus {
            CorpusConfig::Synthetic {
                families,
                samples_per_dataset,
                tile_size,
                seed,
            } => raster::synth_pretraining_corpus(registry, *samples_per_dataset, *tile_size, *families, *seed)?,
            CorpusConfig::Manifests { datasets } => datasets
                .iter()
                .map(|r| {
                    let mut ds = raster::load_dataset(&r.manifest, registry)?;
                    if let Some(w) = r.weight {
                        ds.weight = w;
                    }
                    Ok(ds)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let weights: Vec<f64> = datasets.iter().map(|d| d.weight).collect();
        raster::validate_weights(&weights)?;
        for d in &datasets {
            d.validate_extent(self.sampler.train_size)?;
        }
        Ok(datasets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn paper_scale_is_accepted() {
        let cfg = RunConfig::paper_scale();
        cfg.validate().unwrap();
        assert_eq!((cfg.model.depth, cfg.model.heads), (12, 12));
        assert_eq!(cfg.sampler.train_size, 64);
        assert_eq!(cfg.sampler.k_max, 4);
        assert_eq!(cfg.epochs, 300);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.to_json(), RunConfig::default().to_json());
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"epochz": 3}"#).is_err());
    }

    #[test]
    fn bad_weight_sum_names_the_sum() {
        let text = r#"{"corpus": {"kind": "manifests", "datasets": [
            {"manifest": "a.json", "weight": 0.5},
            {"manifest": "b.json", "weight": 0.4}]}}"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("0.9"), "{err}");
    }

    #[test]
    fn synthetic_corpus_matches_weights() {
        let cfg = RunConfig {
            corpus: CorpusConfig::Synthetic {
                families: 4,
                samples_per_dataset: 4,
                tile_size: 16,
                seed: 1,
            },
            ..RunConfig::default()
        };
        let reg = cfg.registry().unwrap();
        let ds = cfg.datasets(&reg).unwrap();
        let w: Vec<f64> = ds.iter().map(|d| d.weight).collect();
        assert_eq!(w, vec![0.2, 0.2, 0.2, 0.1, 0.2, 0.1]);
        let counts: Vec<usize> = ds.iter().map(|d| d.bands.len()).collect();
        assert_eq!(counts, vec![9, 17, 16, 3, 4, 3]);
    }
}
