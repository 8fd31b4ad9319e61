//! Random spectral band selection and micro-batch assembly.
//!
//! Each micro-batch draws one dataset by weight, a band count `k` uniform on
//! `1..=min(k_max, |bands|)`, `k` distinct bands uniformly, and then
//! `micro_batch_size` samples with a random crop at the training resolution.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bands::BandId;
use crate::error::{Error, Result};
use crate::raster::{Dataset, Sample};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k_max: usize,
    pub train_size: usize,
    pub micro_batch_size: usize,
    /// Set from the run seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            train_size: 64,
            micro_batch_size: 8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, registry_size: usize, patch: usize) -> Result<()> {
        if self.k_max == 0 || self.k_max > registry_size {
            return Err(Error::Validation(format!(
                "k_max {} outside 1..={registry_size}",
                self.k_max
            )));
        }
        if patch == 0 || self.train_size == 0 || self.train_size % patch != 0 {
            return Err(Error::Validation(format!(
                "train_size {} is not a positive multiple of patch size {patch}",
                self.train_size
            )));
        }
        if self.micro_batch_size == 0 {
            return Err(Error::Validation("micro_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One sample of a micro-batch: normalized `train_size²` rasters in band order.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSample {
    pub sample_id: String,
    pub rasters: Vec<Vec<f64>>,
    pub label: Option<usize>,
    /// Class map cropped with the same window, when the sample has one.
    pub mask: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch {
    pub dataset: String,
    pub bands: Vec<BandId>,
    pub train_size: usize,
    pub samples: Vec<MicroSample>,
}

impl MicroBatch {
    pub fn k(&self) -> usize {
        self.bands.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.train_size * self.train_size;
        if self.bands.is_empty() {
            return Err(Error::Validation("micro-batch has no bands".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::Validation("micro-batch has no samples".into()));
        }
        for s in &self.samples {
            if s.rasters.len() != self.bands.len() || s.rasters.iter().any(|r| r.len() != n) {
                return Err(Error::Validation(format!(
                    "sample `{}` rasters do not match {} bands at {}²",
                    s.sample_id,
                    self.bands.len(),
                    self.train_size
                )));
            }
        }
        Ok(())
    }
}

/// The discrete choices behind one micro-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawPlan {
    pub dataset: usize,
    pub bands: Vec<BandId>,
    pub samples: Vec<usize>,
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Validation(format!("corrupt rng state: {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed length"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    index: WeightedIndex<f64>,
}

impl Sampler {
    pub fn new(config: SamplerConfig, datasets: &[Dataset]) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, datasets, rng)
    }

    pub fn with_rng(config: SamplerConfig, datasets: &[Dataset], rng: ChaCha8Rng) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Validation("sampler needs at least one dataset".into()));
        }
        if let Some(d) = datasets.iter().find(|d| d.samples.is_empty()) {
            return Err(Error::Validation(format!("dataset `{}` has no samples", d.name)));
        }
        let weights: Vec<f64> = datasets.iter().map(|d| d.weight).collect();
        crate::raster::validate_weights(&weights)?;
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::Validation(format!("dataset weights: {e}")))?;
        Ok(Self { config, rng, index })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Dataset, band subset and sample indices for the next micro-batch.
    pub fn draw_plan(&mut self, datasets: &[Dataset]) -> Result<DrawPlan> {
        let d = self.index.sample(&mut self.rng);
        let ds = &datasets[d];
        let max_k = self.config.k_max.min(ds.bands.len());
        let k = self.rng.gen_range(1..=max_k);
        let mut picks = index::sample(&mut self.rng, ds.bands.len(), k).into_vec();
        picks.sort_unstable();
        let bands: Vec<BandId> = picks.iter().map(|&i| ds.bands[i]).collect();

        let candidates: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| bands.iter().all(|b| ds.samples[i].tiles.contains_key(b)))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Validation(format!(
                "no sample of `{}` carries bands {bands:?}",
                ds.name
            )));
        }
        let samples = (0..self.config.micro_batch_size)
            .map(|_| candidates[self.rng.gen_range(0..candidates.len())])
            .collect();
        Ok(DrawPlan {
            dataset: d,
            bands,
            samples,
        })
    }

    pub fn sample_microbatch(&mut self, datasets: &[Dataset]) -> Result<MicroBatch> {
        let plan = self.draw_plan(datasets)?;
        let ds = &datasets[plan.dataset];
        let size = self.config.train_size;
        let mut samples = Vec::with_capacity(plan.samples.len());
        for &si in &plan.samples {
            let sample = &ds.samples[si];
            let (h_ref, w_ref) = reference_extent(sample, &plan.bands);
            if (h_ref as usize) < size || (w_ref as usize) < size {
                return Err(Error::Validation(format!(
                    "sample `{}` ({h_ref}x{w_ref}) is smaller than the {size}² training crop",
                    sample.id
                )));
            }
            let oy = self.rng.gen_range(0..=h_ref as usize - size);
            let ox = self.rng.gen_range(0..=w_ref as usize - size);
            let window = Window {
                oy,
                ox,
                size,
                h_ref: h_ref as usize,
                w_ref: w_ref as usize,
            };
            let mut rasters = Vec::with_capacity(plan.bands.len());
            for b in &plan.bands {
                let tile = &sample.tiles[b];
                let stats = ds.stats_for(*b)?;
                let crop = window.resample(&tile.values, tile.height as usize, tile.width as usize);
                rasters.push(crop.into_iter().map(|v| stats.normalize(v as f64)).collect());
            }
            let mask = sample
                .mask
                .as_ref()
                .map(|m| window.resample(&m.values, m.height as usize, m.width as usize));
            samples.push(MicroSample {
                sample_id: sample.id.clone(),
                rasters,
                label: sample.label,
                mask,
            });
        }
        let mb = MicroBatch {
            dataset: ds.name.clone(),
            bands: plan.bands,
            train_size: size,
            samples,
        };
        mb.validate()?;
        Ok(mb)
    }
}

/// Deterministic center crop of one sample, normalized like a training crop.
pub fn center_crop(ds: &Dataset, index: usize, bands: &[BandId], size: usize) -> Result<MicroSample> {
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| Error::NotFound(format!("sample {index} of `{}`", ds.name)))?;
    for b in bands {
        if !sample.tiles.contains_key(b) {
            return Err(Error::NotFound(format!(
                "band {b} in sample `{}` of `{}`",
                sample.id, ds.name
            )));
        }
    }
    let (h_ref, w_ref) = reference_extent(sample, bands);
    let (h_ref, w_ref) = (h_ref as usize, w_ref as usize);
    if h_ref < size || w_ref < size {
        return Err(Error::Validation(format!(
            "sample `{}` ({h_ref}x{w_ref}) is smaller than the {size}² crop",
            sample.id
        )));
    }
    let window = Window {
        oy: (h_ref - size) / 2,
        ox: (w_ref - size) / 2,
        size,
        h_ref,
        w_ref,
    };
    let mut rasters = Vec::with_capacity(bands.len());
    for b in bands {
        let tile = &sample.tiles[b];
        let stats = ds.stats_for(*b)?;
        let crop = window.resample(&tile.values, tile.height as usize, tile.width as usize);
        rasters.push(crop.into_iter().map(|v| stats.normalize(v as f64)).collect());
    }
    Ok(MicroSample {
        sample_id: sample.id.clone(),
        rasters,
        label: sample.label,
        mask: sample
            .mask
            .as_ref()
            .map(|m| window.resample(&m.values, m.height as usize, m.width as usize)),
    })
}

/// Micro-batch of center crops of the listed samples.
pub fn center_microbatch(ds: &Dataset, indices: &[usize], bands: &[BandId], size: usize) -> Result<MicroBatch> {
    let samples = indices
        .iter()
        .map(|&i| center_crop(ds, i, bands, size))
        .collect::<Result<Vec<_>>>()?;
    let mb = MicroBatch {
        dataset: ds.name.clone(),
        bands: bands.to_vec(),
        train_size: size,
        samples,
    };
    mb.validate()?;
    Ok(mb)
}

fn reference_extent(sample: &Sample, bands: &[BandId]) -> (u32, u32) {
    bands
        .iter()
        .filter_map(|b| sample.tiles.get(b))
        .map(|t| (t.height, t.width))
        .max_by_key(|&(h, w)| h as u64 * w as u64)
        .unwrap_or((0, 0))
}

/// Crop window in the grid of the finest band of a sample.
struct Window {
    oy: usize,
    ox: usize,
    size: usize,
    h_ref: usize,
    w_ref: usize,
}

impl Window {
    /// Nearest-neighbor read of the window from a grid of `h × w` covering the same footprint.
    fn resample(&self, values: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for i in 0..self.size {
            let r = ((self.oy + i) * h / self.h_ref).min(h - 1);
            for j in 0..self.size {
                let c = ((self.ox + j) * w / self.w_ref).min(w - 1);
                out.push(values[r * w + c]);
            }
        }
        out
    }
}

/// Outcome of a goodness-of-fit check on the sampler.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalReport {
    pub draws: usize,
    /// `(dataset, observed frequency, configured probability)`
    pub dataset_freq: Vec<(String, f64, f64)>,
    /// `k → (observed frequency, expected probability)`
    pub k_freq: BTreeMap<usize, (f64, f64)>,
    pub chi_square_p: f64,
    pub k_chi_square_p: f64,
}

/// Pearson chi-square statistic and upper-tail p-value. Categories with zero
/// expected probability are dropped; one remaining category gives p = 1.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> (f64, f64) {
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut cats = 0usize;
    for (&o, &p) in observed.iter().zip(probs) {
        if p <= 0.0 {
            continue;
        }
        cats += 1;
        let e = p * n as f64;
        stat += (o as f64 - e).powi(2) / e;
    }
    if cats < 2 {
        return (stat, 1.0);
    }
    let dist = ChiSquared::new((cats - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

/// Draws `n_draws` plans and tests dataset and band-count frequencies
/// against the configured distribution.
pub fn empirical_check(n_draws: usize, config: &SamplerConfig, datasets: &[Dataset]) -> Result<EmpiricalReport> {
    if n_draws < 1000 {
        return Err(Error::Validation(format!("need at least 1000 draws, got {n_draws}")));
    }
    let mut cfg = config.clone();
    cfg.micro_batch_size = 1;
    let mut sampler = Sampler::new(cfg, datasets)?;
    let mut ds_counts = vec![0u64; datasets.len()];
    let mut k_counts = vec![0u64; config.k_max + 1];
    for _ in 0..n_draws {
        let plan = sampler.draw_plan(datasets)?;
        ds_counts[plan.dataset] += 1;
        k_counts[plan.bands.len()] += 1;
    }

    let weights: Vec<f64> = datasets.iter().map(|d| d.weight).collect();
    let mut k_probs = vec![0.0; config.k_max + 1];
    for d in datasets {
        let m = config.k_max.min(d.bands.len());
        for p in k_probs.iter_mut().take(m + 1).skip(1) {
            *p += d.weight / m as f64;
        }
    }
    let (_, chi_square_p) = chi_square_gof(&ds_counts, &weights);
    let (_, k_chi_square_p) = chi_square_gof(&k_counts[1..], &k_probs[1..]);

    let n = n_draws as f64;
    Ok(EmpiricalReport {
        draws: n_draws,
        dataset_freq: datasets
            .iter()
            .zip(&ds_counts)
            .map(|(d, &c)| (d.name.clone(), c as f64 / n, d.weight))
            .collect(),
        k_freq: (1..=config.k_max)
            .map(|k| (k, (k_counts[k] as f64 / n, k_probs[k])))
            .collect(),
        chi_square_p,
        k_chi_square_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::BandRegistry;
    use crate::raster::{synth_dataset, SynthSpec};

    fn corpus(bands: Vec<BandId>, n: usize, size: usize) -> Dataset {
        let reg = BandRegistry::canonical();
        synth_dataset(&SynthSpec::new("d", bands, n, size, 4, 1), &reg).unwrap()
    }

    #[test]
    fn degenerate_single_band() {
        let ds = vec![corpus(vec![BandId(4)], 5, 16)];
        let cfg = SamplerConfig {
            train_size: 8,
            micro_batch_size: 3,
            ..Default::default()
        };
        let mut s = Sampler::new(cfg, &ds).unwrap();
        for _ in 0..20 {
            let mb = s.sample_microbatch(&ds).unwrap();
            assert_eq!(mb.bands, vec![BandId(4)]);
            assert_eq!(mb.samples.len(), 3);
            for smp in &mb.samples {
                assert_eq!(smp.rasters[0].len(), 64);
                assert!(smp.rasters[0].iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut d = corpus(vec![BandId(4)], 1, 8);
        d.samples.clear();
        assert!(matches!(
            Sampler::new(SamplerConfig::default(), &[d]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn crop_of_equal_grid_is_plain_crop() {
        let w = Window {
            oy: 1,
            ox: 2,
            size: 2,
            h_ref: 4,
            w_ref: 4,
        };
        let v: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(w.resample(&v, 4, 4), vec![6.0, 7.0, 10.0, 11.0]);
        // a half-resolution band is read nearest-neighbor
        let coarse: Vec<f32> = (0..4).map(|i| i as f32).collect();
        assert_eq!(w.resample(&coarse, 2, 2), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }

    #[test]
    fn chi_square_edge_cases() {
        assert_eq!(chi_square_gof(&[1000], &[1.0]).1, 1.0);
        let (_, p) = chi_square_gof(&[10_000, 0, 0, 0], &[0.25; 4]);
        assert!(p < 1e-6);
        let (_, p) = chi_square_gof(&[250, 250, 250, 250], &[0.25; 4]);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_dataset_check_is_trivial() {
        let ds = vec![corpus(vec![BandId(4)], 3, 8)];
        let cfg = SamplerConfig {
            train_size: 8,
            ..Default::default()
        };
        let r = empirical_check(1000, &cfg, &ds).unwrap();
        assert_eq!(r.chi_square_p, 1.0);
        assert_eq!(r.k_freq[&1].0, 1.0);
    }
}
