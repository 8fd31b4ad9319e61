//! Tile storage, dataset manifests, normalization statistics and the
//! synthetic corpus generator used for desk-scale runs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bands::{BandId, BandRegistry};
use crate::error::{Error, Result};

pub const TILE_MAGIC: &[u8; 4] = b"FMTL";
pub const TILE_VERSION: u16 = 1;
pub const TILE_HEADER_LEN: usize = 24;
pub const STD_FLOOR: f64 = 1e-6;

/// One band of one sample at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    pub band_id: BandId,
    pub height: u32,
    pub width: u32,
    pub gsd_m: f32,
    pub values: Vec<f32>,
}

impl RasterTile {
    pub fn new(band_id: BandId, height: u32, width: u32, gsd_m: f32, values: Vec<f32>) -> Result<Self> {
        let t = Self {
            band_id,
            height,
            width,
            gsd_m,
            values,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "tile for band {} has empty extent {}x{}",
                self.band_id, self.height, self.width
            )));
        }
        if self.values.len() != self.height as usize * self.width as usize {
            return Err(Error::Validation(format!(
                "tile {}x{} holds {} values",
                self.height,
                self.width,
                self.values.len()
            )));
        }
        if !(self.gsd_m > 0.0 && self.gsd_m.is_finite()) {
            return Err(Error::Validation(format!("tile gsd {} is not positive", self.gsd_m)));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("tile value {i} is not finite")));
        }
        Ok(())
    }

    /// Checks the tile against its registry entry.
    pub fn validate_against(&self, registry: &BandRegistry) -> Result<()> {
        self.validate()?;
        let spec = registry.get(self.band_id)?;
        if (spec.gsd_m as f32).to_bits() != self.gsd_m.to_bits() {
            return Err(Error::Validation(format!(
                "tile gsd {} differs from registry gsd {} for band {}",
                self.gsd_m, spec.gsd_m, self.band_id
            )));
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width as usize + col]
    }
}

/// Serializes a tile: 24-byte little-endian header followed by `H·W` f32 values.
pub fn encode_tile(tile: &RasterTile) -> Vec<u8> {
    let mut out = Vec::with_capacity(TILE_HEADER_LEN + tile.values.len() * 4);
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    out.extend_from_slice(&tile.band_id.0.to_le_bytes());
    out.extend_from_slice(&tile.height.to_le_bytes());
    out.extend_from_slice(&tile.width.to_le_bytes());
    out.extend_from_slice(&tile.gsd_m.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in &tile.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tile(bytes: &[u8]) -> Result<RasterTile> {
    if bytes.len() < TILE_HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{} bytes, need {TILE_HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[0..4] != TILE_MAGIC {
        return Err(Error::format("magic", format!("{:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != TILE_VERSION {
        return Err(Error::format("version", format!("{version}, expected {TILE_VERSION}")));
    }
    let band_id = BandId(u16_at(6));
    let height = u32_at(8);
    let width = u32_at(12);
    let gsd_m = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let reserved = u32_at(20);
    if reserved != 0 {
        return Err(Error::format("reserved", format!("{reserved}, expected 0")));
    }
    let n = height as usize * width as usize;
    let payload = &bytes[TILE_HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            "payload",
            format!("{} bytes for a {height}x{width} tile, expected {}", payload.len(), n * 4),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RasterTile::new(band_id, height, width, gsd_m, values)
}

pub fn write_tile(tile: &RasterTile, path: &Path) -> Result<()> {
    tile.validate()?;
    fs::write(path, encode_tile(tile)).map_err(|e| Error::storage(path, e))
}

pub fn read_tile(path: &Path) -> Result<RasterTile> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_tile(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

impl BandStats {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Co-located tiles of one location.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tiles: BTreeMap<BandId, RasterTile>,
    /// Scene class (pattern family for synthetic corpora).
    pub label: Option<usize>,
    /// Per-pixel class map, stored as a tile of class ids.
    pub mask: Option<RasterTile>,
}

impl Sample {
    /// Largest extent over the sample's tiles.
    pub fn extent(&self) -> (u32, u32) {
        self.tiles
            .values()
            .map(|t| (t.height, t.width))
            .max_by_key(|&(h, w)| h as u64 * w as u64)
            .unwrap_or((0, 0))
    }
}

/// A weighted dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub weight: f64,
    pub bands: Vec<BandId>,
    pub samples: Vec<Sample>,
    pub stats: BTreeMap<BandId, BandStats>,
}

impl Dataset {
    pub fn validate(&self, registry: &BandRegistry) -> Result<()> {
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(Error::Validation(format!(
                "dataset `{}` weight {} outside (0, 1]",
                self.name, self.weight
            )));
        }
        if self.bands.is_empty() {
            return Err(Error::Validation(format!("dataset `{}` lists no bands", self.name)));
        }
        for &b in &self.bands {
            registry.get(b)?;
        }
        for s in &self.samples {
            for (b, tile) in &s.tiles {
                if !self.bands.contains(b) || tile.band_id != *b {
                    return Err(Error::Validation(format!(
                        "sample `{}` of `{}` references band {b} outside the dataset",
                        s.id, self.name
                    )));
                }
                tile.validate_against(registry)?;
            }
        }
        Ok(())
    }

    /// Rejects samples too small for the training crop.
    pub fn validate_extent(&self, train_size: usize) -> Result<()> {
        for s in &self.samples {
            let (h, w) = s.extent();
            if (h.min(w) as usize) < train_size {
                return Err(Error::Validation(format!(
                    "sample `{}` of `{}` is {h}x{w}, smaller than the {train_size}x{train_size} training size",
                    s.id, self.name
                )));
            }
        }
        Ok(())
    }

    pub fn stats_for(&self, band: BandId) -> Result<BandStats> {
        self.stats
            .get(&band)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("stats for band {band} in `{}`", self.name)))
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Checks that dataset weights form a distribution.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "dataset weights sum to {sum}, expected 1 (±1e-9)"
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w <= 1.0)) {
        return Err(Error::Validation(format!("dataset weight {w} outside (0, 1]")));
    }
    Ok(())
}

/// Population mean and standard deviation of every pixel of `band`, std floored at 1e-6.
pub fn band_stats(dataset: &Dataset, band: BandId) -> Result<BandStats> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for s in &dataset.samples {
        if let Some(t) = s.tiles.get(&band) {
            n += t.values.len();
            sum += t.values.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    if n == 0 {
        return Err(Error::NotFound(format!(
            "band {band} has no pixels in `{}`",
            dataset.name
        )));
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for s in &dataset.samples {
        if let Some(t) = s.tiles.get(&band) {
            ss += t.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
        }
    }
    let std = (ss / n as f64).sqrt().max(STD_FLOOR);
    Ok(BandStats { mean, std })
}

/// Recomputes stats for every band of the dataset.
pub fn compute_stats(dataset: &mut Dataset) -> Result<()> {
    let mut stats = BTreeMap::new();
    for &b in &dataset.bands {
        stats.insert(b, band_stats(dataset, b)?);
    }
    dataset.stats = stats;
    Ok(())
}

// --- manifests -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub tiles: BTreeMap<BandId, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// On-disk description of a dataset. Tile paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub weight: f64,
    pub bands: Vec<BandId>,
    pub samples: Vec<SampleEntry>,
    pub stats: BTreeMap<BandId, BandStats>,
}

pub fn load_dataset(manifest_path: &Path, registry: &BandRegistry) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::storage(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let mut tiles = BTreeMap::new();
        for (&band, rel) in &entry.tiles {
            let tile = read_tile(&root.join(rel))?;
            if tile.band_id != band {
                return Err(Error::Validation(format!(
                    "{} holds band {}, manifest says {band}",
                    rel.display(),
                    tile.band_id
                )));
            }
            tiles.insert(band, tile);
        }
        let mask = entry
            .mask
            .as_ref()
            .map(|rel| read_tile(&root.join(rel)))
            .transpose()?;
        samples.push(Sample {
            id: entry.id.clone(),
            tiles,
            label: entry.label,
            mask,
        });
    }
    let mut ds = Dataset {
        name: manifest.name,
        weight: manifest.weight,
        bands: manifest.bands,
        samples,
        stats: manifest.stats,
    };
    ds.validate(registry)?;
    if ds.stats.is_empty() {
        compute_stats(&mut ds)?;
    }
    for &b in &ds.bands {
        ds.stats_for(b)?;
    }
    Ok(ds)
}

/// Writes tiles under `dir/tiles/` and the manifest to `dir/manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let tiles_dir = dir.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| Error::storage(&tiles_dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut tiles = BTreeMap::new();
        for (&band, tile) in &s.tiles {
            let rel = PathBuf::from("tiles").join(format!("{}_b{:02}.fmtl", s.id, band.0));
            write_tile(tile, &dir.join(&rel))?;
            tiles.insert(band, rel);
        }
        let mask = match &s.mask {
            Some(m) => {
                let rel = PathBuf::from("tiles").join(format!("{}_mask.fmtl", s.id));
                write_tile(m, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(SampleEntry {
            id: s.id.clone(),
            tiles,
            label: s.label,
            mask,
        });
    }
    let manifest = Manifest {
        name: dataset.name.clone(),
        weight: dataset.weight,
        bands: dataset.bands.clone(),
        samples: entries,
        stats: dataset.stats.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::storage(&path, e))?;
    Ok(path)
}

// --- synthetic corpora -----------------------------------------------------

/// Number of distinct spatial pattern families the generator knows.
pub const MAX_FAMILIES: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub weight: f64,
    pub bands: Vec<BandId>,
    pub n_samples: usize,
    pub tile_size: usize,
    /// Number of pattern families; family ids double as class labels.
    pub families: usize,
    pub seed: u64,
    /// Inclusive value range every generated pixel must fall in.
    pub dynamic_range: (f32, f32),
}

impl SynthSpec {
    pub fn new(name: &str, bands: Vec<BandId>, n_samples: usize, tile_size: usize, families: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            weight: 1.0,
            bands,
            n_samples,
            tile_size,
            families,
            seed,
            dynamic_range: (0.0, 10_000.0),
        }
    }

    /// Per-band offset and pattern amplitude. Pixel = offset + amplitude·pattern + noise,
    /// with the pattern standardized per tile and noise at 10% of the amplitude.
    pub fn band_profile(&self, band: BandId) -> (f64, f64) {
        let (lo, hi) = (self.dynamic_range.0 as f64, self.dynamic_range.1 as f64);
        let span = hi - lo;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9E37_79B9_7F4A_7C15 ^ band.0 as u64));
        let offset = lo + span * rng.gen_range(0.35..0.65);
        let amplitude = span * rng.gen_range(0.03..0.08);
        (offset, amplitude)
    }

    /// Population mean and std the generator is configured to produce for `band`.
    pub fn expected_stats(&self, band: BandId) -> BandStats {
        let (offset, amplitude) = self.band_profile(band);
        BandStats {
            mean: offset,
            std: amplitude * (1.0f64 + NOISE_FRACTION * NOISE_FRACTION).sqrt(),
        }
    }
}

const NOISE_FRACTION: f64 = 0.1;

/// Zero-mean unit-variance spatial pattern of the given family.
fn pattern(family: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let freq = rng.gen_range(1.5..3.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (cy, cx) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
    let n = size as f64;
    let mut p = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 / n, c as f64 / n);
            let v = match family {
                0 => (2.0 * PI * freq * y + phase).sin(),
                1 => (2.0 * PI * freq * x + phase).sin(),
                2 => (2.0 * PI * freq * x + phase).sin() * (2.0 * PI * freq * y + phase).sin(),
                3 => {
                    let rr = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    (-rr * rr / 0.05).exp()
                }
                _ => (2.0 * PI * freq * (x + y) / 2.0f64.sqrt() + phase).sin(),
            };
            p.push(v);
        }
    }
    standardize(&mut p);
    p
}

fn standardize(p: &mut [f64]) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { var.sqrt().recip() } else { 0.0 };
    for v in p.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

fn check_bands(bands: &[BandId], registry: &BandRegistry) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Validation("synthetic dataset needs at least one band".into()));
    }
    for &b in bands {
        registry.get(b)?;
    }
    Ok(())
}

/// Band-correlated classification corpus: every band of a sample shares one
/// spatial pattern with band-specific offset and amplitude. Labels are
/// stratified (`sample i → family i mod families`).
pub fn synth_dataset(spec: &SynthSpec, registry: &BandRegistry) -> Result<Dataset> {
    check_bands(&spec.bands, registry)?;
    if spec.families == 0 || spec.families > MAX_FAMILIES {
        return Err(Error::Validation(format!(
            "families must be in 1..={MAX_FAMILIES}, got {}",
            spec.families
        )));
    }
    if spec.tile_size == 0 {
        return Err(Error::Validation("tile size must be positive".into()));
    }
    let profiles: Vec<_> = spec.bands.iter().map(|&b| (b, spec.band_profile(b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.dynamic_range;
    let size = spec.tile_size;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let family = i % spec.families;
        let p = pattern(family, size, &mut rng);
        let mut tiles = BTreeMap::new();
        for &(band, (offset, amplitude)) in &profiles {
            let values = p
                .iter()
                .map(|&s| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = offset + amplitude * (s + NOISE_FRACTION * noise);
                    (v as f32).clamp(lo, hi)
                })
                .collect();
            let gsd = registry.get(band)?.gsd_m as f32;
            tiles.insert(band, RasterTile::new(band, size as u32, size as u32, gsd, values)?);
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            tiles,
            label: Some(family),
            mask: None,
        });
    }
    let mut ds = Dataset {
        name: spec.name.clone(),
        weight: spec.weight,
        bands: spec.bands.clone(),
        samples,
        stats: BTreeMap::new(),
    };
    compute_stats(&mut ds)?;
    Ok(ds)
}

/// Two-class segmentation corpus: a random disc or rectangle (class 1) over
/// background (class 0). Foreground pixels are brighter in every band.
pub fn synth_segmentation(spec: &SynthSpec, registry: &BandRegistry) -> Result<Dataset> {
    check_bands(&spec.bands, registry)?;
    let profiles: Vec<_> = spec.bands.iter().map(|&b| (b, spec.band_profile(b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.dynamic_range;
    let size = spec.tile_size;
    let n = size as f64;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let disc = rng.gen_bool(0.5);
        let (cy, cx) = (rng.gen_range(0.3..0.7) * n, rng.gen_range(0.3..0.7) * n);
        let (ry, rx) = (rng.gen_range(0.15..0.3) * n, rng.gen_range(0.15..0.3) * n);
        let mut mask = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = ((r as f64 + 0.5 - cy) / ry, (c as f64 + 0.5 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                mask.push(if inside { 1.0f32 } else { 0.0 });
            }
        }
        let mut tiles = BTreeMap::new();
        for &(band, (offset, amplitude)) in &profiles {
            let values = mask
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let s = if m > 0.5 { 1.0 } else { -1.0 };
                    ((offset + amplitude * (s + 0.3 * noise)) as f32).clamp(lo, hi)
                })
                .collect();
            let gsd = registry.get(band)?.gsd_m as f32;
            tiles.insert(band, RasterTile::new(band, size as u32, size as u32, gsd, values)?);
        }
        samples.push(Sample {
            id: format!("g{i:05}"),
            tiles,
            label: None,
            mask: Some(RasterTile::new(spec.bands[0], size as u32, size as u32, 1.0, mask)?),
        });
    }
    let mut ds = Dataset {
        name: spec.name.clone(),
        weight: spec.weight,
        bands: spec.bands.clone(),
        samples,
        stats: BTreeMap::new(),
    };
    compute_stats(&mut ds)?;
    Ok(ds)
}

/// Pretraining sources with their sampling weights and sensors.
pub const PRETRAINING_SOURCES: [(&str, f64, &[&str]); 6] = [
    ("SSL4EO-Landsat", 0.2, &["Landsat 8-9"]),
    ("RapidAI4EO", 0.2, &["Planet", "Sentinel-2"]),
    ("TalloS", 0.2, &["Sentinel-1", "Sentinel-2", "DEM"]),
    ("FLAIR#1", 0.1, &["UAV-RGB"]),
    ("FiveBillionPixels", 0.2, &["Gaofen-2"]),
    ("UAV", 0.1, &["UAV-RGB"]),
];

/// Band ids of each pretraining source, resolved against `registry`.
pub fn pretraining_bands(registry: &BandRegistry) -> Vec<(String, f64, Vec<BandId>)> {
    PRETRAINING_SOURCES
        .iter()
        .map(|(name, w, sensors)| {
            let bands = sensors.iter().flat_map(|s| registry.sensor_bands(s)).collect();
            (name.to_string(), *w, bands)
        })
        .collect()
}

/// Synthetic stand-ins for the six pretraining sources, weighted like the originals.
pub fn synth_pretraining_corpus(
    registry: &BandRegistry,
    n_samples: usize,
    tile_size: usize,
    families: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    pretraining_bands(registry)
        .into_iter()
        .enumerate()
        .map(|(i, (name, weight, bands))| {
            let mut spec = SynthSpec::new(&name, bands, n_samples, tile_size, families, seed.wrapping_add(i as u64));
            spec.weight = weight;
            synth_dataset(&spec, registry)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(h: u32, w: u32) -> RasterTile {
        let values = (0..h * w).map(|v| v as f32 * 0.25 - 1.0).collect();
        RasterTile::new(BandId(5), h, w, 10.0, values).unwrap()
    }

    #[test]
    fn tile_round_trip_and_magic() {
        let t = tile(2, 2);
        let bytes = encode_tile(&t);
        assert_eq!(&bytes[..4], b"FMTL");
        assert_eq!(decode_tile(&bytes).unwrap(), t);
        assert_eq!(encode_tile(&t), bytes);
    }

    #[test]
    fn tile_file_size() {
        let bytes = encode_tile(&tile(64, 64));
        assert_eq!(bytes.len(), 24 + 64 * 64 * 4);
    }

    #[test]
    fn truncated_payload_names_field() {
        let mut bytes = encode_tile(&tile(3, 3));
        bytes.truncate(bytes.len() - 2);
        match decode_tile(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode_tile(&tile(1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_tile(&bytes), Err(Error::Format { field: "magic", .. })));
        let mut bytes = encode_tile(&tile(1, 1));
        bytes[4] = 9;
        assert!(matches!(decode_tile(&bytes), Err(Error::Format { field: "version", .. })));
        assert!(matches!(decode_tile(&bytes[..10]), Err(Error::Format { field: "header", .. })));
    }

    #[test]
    fn stats_examples() {
        let reg = BandRegistry::canonical();
        let b = BandId(3);
        let gsd = reg.get(b).unwrap().gsd_m as f32;
        let mk = |values: Vec<f32>| Sample {
            id: "a".into(),
            tiles: BTreeMap::from([(b, RasterTile::new(b, 1, values.len() as u32, gsd, values).unwrap())]),
            label: None,
            mask: None,
        };
        let mut ds = Dataset {
            name: "d".into(),
            weight: 1.0,
            bands: vec![b],
            samples: vec![mk(vec![3.0; 4])],
            stats: BTreeMap::new(),
        };
        let s = band_stats(&ds, b).unwrap();
        assert_eq!((s.mean, s.std), (3.0, 1e-6));

        ds.samples = vec![mk(vec![0.0, 2.0]), mk(vec![2.0, 0.0])];
        let s = band_stats(&ds, b).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));

        assert!(matches!(band_stats(&ds, BandId(4)), Err(Error::NotFound(_))));
    }

    #[test]
    fn weight_table_validates() {
        let w: Vec<f64> = PRETRAINING_SOURCES.iter().map(|s| s.1).collect();
        assert_eq!(w, vec![0.2, 0.2, 0.2, 0.1, 0.2, 0.1]);
        validate_weights(&w).unwrap();
        let err = validate_weights(&[0.5, 0.4]).unwrap_err().to_string();
        assert!(err.contains("0.9"), "{err}");
    }

    #[test]
    fn pretraining_sources_resolve() {
        let reg = BandRegistry::canonical();
        let counts: Vec<usize> = pretraining_bands(&reg).iter().map(|d| d.2.len()).collect();
        assert_eq!(counts, vec![9, 17, 16, 3, 4, 3]);
    }

    #[test]
    fn synth_is_deterministic_and_stratified() {
        let reg = BandRegistry::canonical();
        let bands = reg.sensor_bands("Sentinel-2")[1..4].to_vec();
        let spec = SynthSpec::new("s2", bands, 100, 16, 4, 7);
        let a = synth_dataset(&spec, &reg).unwrap();
        let b = synth_dataset(&spec, &reg).unwrap();
        assert_eq!(a, b);
        for f in 0..4 {
            assert_eq!(a.samples.iter().filter(|s| s.label == Some(f)).count(), 25);
        }
        a.validate(&reg).unwrap();
    }

    #[test]
    fn synth_values_within_dynamic_range() {
        let reg = BandRegistry::canonical();
        let spec = SynthSpec::new("s2", reg.sensor_bands("Sentinel-2"), 40, 16, 5, 11);
        let ds = synth_dataset(&spec, &reg).unwrap();
        let (lo, hi) = spec.dynamic_range;
        let (mut mn, mut mx) = (f32::MAX, f32::MIN);
        for s in &ds.samples {
            for t in s.tiles.values() {
                for &v in &t.values {
                    mn = mn.min(v);
                    mx = mx.max(v);
                }
            }
        }
        assert!(mn >= lo && mx <= hi, "{mn}..{mx}");
        // clamping never engages, so the range is not saturated
        assert!(mn > lo && mx < hi);
    }

    #[test]
    fn synth_stats_match_generator_configuration() {
        let reg = BandRegistry::canonical();
        let spec = SynthSpec::new("s2", reg.sensor_bands("Sentinel-2")[..4].to_vec(), 200, 16, 4, 3);
        let ds = synth_dataset(&spec, &reg).unwrap();
        for &b in &spec.bands {
            let got = ds.stats_for(b).unwrap();
            let want = spec.expected_stats(b);
            assert!((got.mean - want.mean).abs() / want.mean < 0.02);
            assert!((got.std - want.std).abs() / want.std < 0.02, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn unknown_band_is_not_found() {
        let reg = BandRegistry::canonical();
        let spec = SynthSpec::new("x", vec![BandId(99)], 4, 8, 2, 1);
        assert!(matches!(synth_dataset(&spec, &reg), Err(Error::NotFound(_))));
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let reg = BandRegistry::canonical();
        let spec = SynthSpec::new("rt", reg.sensor_bands("Planet"), 6, 8, 3, 5);
        let ds = synth_dataset(&spec, &reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&path, &reg).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn undersized_samples_rejected() {
        let reg = BandRegistry::canonical();
        let spec = SynthSpec::new("small", reg.sensor_bands("Planet"), 2, 32, 2, 5);
        let ds = synth_dataset(&spec, &reg).unwrap();
        ds.validate_extent(32).unwrap();
        assert!(matches!(ds.validate_extent(64), Err(Error::Validation(_))));
    }

    #[test]
    fn normalization_round_trip() {
        let s = BandStats { mean: 1234.5, std: 87.25 };
        for v in [0.0, 1.0, 1234.5, 9999.0] {
            let back = s.denormalize(s.normalize(v));
            assert!((back - v).abs() <= 1e-6 * v.abs().max(1.0));
        }
    }
}
