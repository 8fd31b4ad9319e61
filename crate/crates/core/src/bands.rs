//! Registry of ingestible modalities.
//!
//! A modality is one band of one sensor at one ground sampling distance. The
//! registration order assigns a dense `BandId`, which indexes the spectral
//! embedding table and (in per-band projection mode) the patch projections.
//! SAR polarizations and the elevation model have no optical wavelength and
//! are keyed by their role instead.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CANONICAL: &str = include_str!("../data/bands36.json");

/// Dense band index, stable across runs for a given registry file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BandId(pub u16);

impl BandId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for BandId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub band_id: BandId,
    pub sensor: String,
    pub role: String,
    pub center_wavelength_nm: Option<f64>,
    pub gsd_m: f64,
}

impl BandSpec {
    pub fn key(&self) -> BandKey {
        BandKey::new(&self.sensor, &self.role, self.center_wavelength_nm, self.gsd_m)
    }
}

/// Lookup key: sensor, wavelength (or role when there is none), and GSD.
#[derive(Debug, Clone)]
pub struct BandKey {
    pub sensor: String,
    pub spectral: Spectral,
    pub gsd_m: f64,
}

#[derive(Debug, Clone)]
pub enum Spectral {
    Wavelength(f64),
    Role(String),
}

impl BandKey {
    pub fn new(sensor: &str, role: &str, wavelength_nm: Option<f64>, gsd_m: f64) -> Self {
        let spectral = match wavelength_nm {
            Some(w) => Spectral::Wavelength(w),
            None => Spectral::Role(role.to_string()),
        };
        Self {
            sensor: sensor.to_string(),
            spectral,
            gsd_m,
        }
    }

    pub fn optical(sensor: &str, wavelength_nm: f64, gsd_m: f64) -> Self {
        Self::new(sensor, "", Some(wavelength_nm), gsd_m)
    }
}

impl PartialEq for BandKey {
    fn eq(&self, other: &Self) -> bool {
        let spectral = match (&self.spectral, &other.spectral) {
            (Spectral::Wavelength(a), Spectral::Wavelength(b)) => a.to_bits() == b.to_bits(),
            (Spectral::Role(a), Spectral::Role(b)) => a == b,
            _ => false,
        };
        spectral && self.sensor == other.sensor && self.gsd_m.to_bits() == other.gsd_m.to_bits()
    }
}

impl Eq for BandKey {}

impl Hash for BandKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.sensor.hash(state);
        match &self.spectral {
            Spectral::Wavelength(w) => {
                0u8.hash(state);
                w.to_bits().hash(state);
            }
            Spectral::Role(r) => {
                1u8.hash(state);
                r.hash(state);
            }
        }
        self.gsd_m.to_bits().hash(state);
    }
}

impl std::fmt::Display for BandKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.spectral {
            Spectral::Wavelength(w) => write!(f, "{} {w} nm @ {} m", self.sensor, self.gsd_m),
            Spectral::Role(r) => write!(f, "{} {r} @ {} m", self.sensor, self.gsd_m),
        }
    }
}

/// On-disk record; the position in the list defines the band id.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BandRecord {
    sensor: String,
    role: String,
    wavelength_nm: Option<f64>,
    gsd_m: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BandRegistry {
    specs: Vec<BandSpec>,
    by_key: HashMap<BandKey, BandId>,
}

impl BandRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The shipped 36-band registry.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL).expect("shipped registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<BandRecord> = serde_json::from_str(text)?;
        let mut reg = Self::new();
        for r in records {
            reg.register_band(&r.sensor, &r.role, r.wavelength_nm, r.gsd_m)?;
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<BandRecord> = self
            .specs
            .iter()
            .map(|s| BandRecord {
                sensor: s.sensor.clone(),
                role: s.role.clone(),
                wavelength_nm: s.center_wavelength_nm,
                gsd_m: s.gsd_m,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("records serialize")
    }

    pub fn register_band(
        &mut self,
        sensor: &str,
        role: &str,
        wavelength_nm: Option<f64>,
        gsd_m: f64,
    ) -> Result<BandId> {
        if !(gsd_m > 0.0 && gsd_m.is_finite()) {
            return Err(Error::Validation(format!(
                "{sensor} {role}: gsd must be positive, got {gsd_m}"
            )));
        }
        if let Some(w) = wavelength_nm {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!(
                    "{sensor} {role}: wavelength must be positive, got {w}"
                )));
            }
        }
        let key = BandKey::new(sensor, role, wavelength_nm, gsd_m);
        if let Some(existing) = self.by_key.get(&key) {
            return Err(Error::Conflict(format!(
                "band {key} already registered as id {existing}"
            )));
        }
        let id = u16::try_from(self.specs.len())
            .map(BandId)
            .map_err(|_| Error::Validation("registry is full".into()))?;
        self.specs.push(BandSpec {
            band_id: id,
            sensor: sensor.to_string(),
            role: role.to_string(),
            center_wavelength_nm: wavelength_nm,
            gsd_m,
        });
        self.by_key.insert(key, id);
        Ok(id)
    }

    pub fn resolve_band(&self, key: &BandKey) -> Result<&BandSpec> {
        self.by_key
            .get(key)
            .map(|id| &self.specs[id.index()])
            .ok_or_else(|| Error::NotFound(format!("band {key}")))
    }

    pub fn get(&self, id: BandId) -> Result<&BandSpec> {
        self.specs
            .get(id.index())
            .ok_or_else(|| Error::NotFound(format!("band id {id}")))
    }

    pub fn contains(&self, id: BandId) -> bool {
        id.index() < self.specs.len()
    }

    /// Looks up a band by sensor and role name, e.g. `("Sentinel-2", "B4")`.
    pub fn find(&self, sensor: &str, role: &str) -> Result<BandId> {
        self.specs
            .iter()
            .find(|s| s.sensor == sensor && s.role == role)
            .map(|s| s.band_id)
            .ok_or_else(|| Error::NotFound(format!("band {sensor}/{role}")))
    }

    /// All band ids of one sensor, in registry order.
    pub fn sensor_bands(&self, sensor: &str) -> Vec<BandId> {
        self.specs
            .iter()
            .filter(|s| s.sensor == sensor)
            .map(|s| s.band_id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[BandSpec] {
        &self.specs
    }

    pub fn ids(&self) -> impl Iterator<Item = BandId> + '_ {
        self.specs.iter().map(|s| s.band_id)
    }
}
