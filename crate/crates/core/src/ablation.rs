//! Evaluates one frozen checkpoint on many band subsets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bands::{BandId, BandRegistry};
use crate::error::{Error, Result};
use crate::mae::FomoNet;
use crate::params::ParamStore;
use crate::probe::{probe_classification, probe_segmentation, ProbeConfig, ProbeOutcome, SegHeadConfig, Task};
use crate::raster::Dataset;
use crate::tensor::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    /// Manifest of the evaluation dataset, relative to the plan file.
    pub dataset: PathBuf,
    pub task: Task,
    pub subsets: Vec<Vec<BandId>>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub seg: SegHeadConfig,
    /// Crop size; the checkpoint's training size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl AblationPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut plan: Self = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            plan.dataset = dir.join(&plan.dataset);
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: Vec<BandId>,
    pub outcome: ProbeOutcome,
}

/// Rejects empty, duplicated or unknown subsets before any work is done.
pub fn validate_subsets(subsets: &[Vec<BandId>], registry: &BandRegistry, ds: &Dataset) -> Result<()> {
    if subsets.is_empty() {
        return Err(Error::Validation("ablation plan lists no subsets".into()));
    }
    for (i, s) in subsets.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Validation(format!("subset {i} is empty")));
        }
        if s.iter().collect::<BTreeSet<_>>().len() != s.len() {
            return Err(Error::Validation(format!("subset {i} repeats a band: {s:?}")));
        }
        for b in s {
            if !registry.contains(*b) {
                return Err(Error::Validation(format!("subset {i}: band {b} is not in the registry")));
            }
            if !ds.bands.contains(b) {
                return Err(Error::Validation(format!(
                    "subset {i}: band {b} is not provided by dataset `{}`",
                    ds.name
                )));
            }
        }
    }
    Ok(())
}

/// One probe per subset with the same backbone; rows follow the plan order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    registry: &BandRegistry,
    ds: &Dataset,
    subsets: &[Vec<BandId>],
    task: Task,
    probe: &ProbeConfig,
    seg: &SegHeadConfig,
    size: usize,
) -> Result<Vec<AblationRow>> {
    validate_subsets(subsets, registry, ds)?;
    let hash = store.hash();
    let mut rows = Vec::with_capacity(subsets.len());
    for s in subsets {
        let outcome = match task {
            Task::Cls => probe_classification(net, store, ds, s, size, probe)?,
            Task::Seg => probe_segmentation(net, store, ds, s, size, seg)?,
        };
        if outcome.backbone_hash != hash {
            return Err(Error::Contract(format!("backbone changed while evaluating subset {s:?}")));
        }
        rows.push(AblationRow {
            subset: s.clone(),
            outcome,
        });
    }
    Ok(rows)
}
