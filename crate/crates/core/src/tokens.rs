//! Per-band tokenization and input embeddings.
//!
//! Every band raster is cut into `N = ⌊H/P⌋·⌊W/P⌋` non-overlapping patches,
//! projected to width `d` (one shared projection, or one per band), and summed
//! element-wise with the band's spectral embedding and each patch's positional
//! embedding.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bands::BandId;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sampler::MicroBatch;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || patch > height.min(width) {
            return Err(Error::Dimension(format!(
                "patch size {patch} does not fit a {height}x{width} raster"
            )));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Token count `N`.
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }
}

/// Cuts a row-major raster into `[N × P²]` patches, left to right then top to
/// bottom; each patch is flattened row-major. Trailing pixels are dropped.
pub fn patchify<T: Real>(raster: &[T], grid: PatchGrid) -> Result<Tensor<T>> {
    if raster.len() != grid.height * grid.width {
        return Err(Error::Dimension(format!(
            "raster of {} values is not {}x{}",
            raster.len(),
            grid.height,
            grid.width
        )));
    }
    let p = grid.patch;
    let mut out = Vec::with_capacity(grid.len() * p * p);
    for pr in 0..grid.rows() {
        for pc in 0..grid.cols() {
            for r in 0..p {
                let start = (pr * p + r) * grid.width + pc * p;
                out.extend_from_slice(&raster[start..start + p]);
            }
        }
    }
    Tensor::new(vec![grid.len(), p * p], out)
}

/// Left inverse of [`patchify`] on the covered region; uncovered pixels are zero.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, grid: PatchGrid) -> Result<Vec<T>> {
    if patches.rows() != grid.len() || patches.cols() != grid.patch_len() {
        return Err(Error::Dimension(format!(
            "{:?} patches do not fit a grid of {} patches of {} values",
            patches.shape(),
            grid.len(),
            grid.patch_len()
        )));
    }
    let p = grid.patch;
    let mut out = vec![T::zero(); grid.height * grid.width];
    for (n, patch) in patches.data().chunks(p * p).enumerate() {
        let (pr, pc) = (n / grid.cols(), n % grid.cols());
        for r in 0..p {
            let start = (pr * p + r) * grid.width + pc * p;
            out[start..start + p].copy_from_slice(&patch[r * p..(r + 1) * p]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// One projection for every band.
    #[default]
    Shared,
    /// One projection per registered band.
    PerBand,
}

/// Patch projections `P² → d`.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    pub mode: ProjectionMode,
    /// `(weight [P²×d], bias [d])`, one entry in shared mode, one per band otherwise.
    pub weights: Vec<(ParamId, ParamId)>,
}

impl ProjectionParams {
    pub fn for_band(&self, band: BandId) -> Result<(ParamId, ParamId)> {
        match self.mode {
            ProjectionMode::Shared => Ok(self.weights[0]),
            ProjectionMode::PerBand => self
                .weights
                .get(band.index())
                .copied()
                .ok_or_else(|| Error::NotFound(format!("projection for band {band}"))),
        }
    }
}

/// Learned spectral (`M × d`) and positional (`N_max × d`) tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub spectral: ParamId,
    pub positional: ParamId,
}

/// Projects `[N × P²]` patches of one band to `[N × d]`.
pub fn project_tokens<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    band: BandId,
    proj: &ProjectionParams,
    store: &ParamStore<T>,
) -> Result<Var> {
    let (w, b) = proj.for_band(band)?;
    let plen = store.get(w).shape()[0];
    if g.value(patches).cols() != plen {
        return Err(Error::Dimension(format!(
            "patch length {} does not match projection input {plen}",
            g.value(patches).cols()
        )));
    }
    let (w, b) = (g.param(w, store), g.param(b, store));
    g.linear(patches, w, b)
}

/// `projected[j] + spectral[band] + positional[positions[j]]`
pub fn compose_embeddings<T: Real>(
    g: &mut Graph<T>,
    projected: Var,
    band: BandId,
    positions: &[usize],
    tables: &EmbeddingTables,
    store: &ParamStore<T>,
) -> Result<Var> {
    let n = g.value(projected).rows();
    if positions.len() != n {
        return Err(Error::Dimension(format!("{n} tokens but {} positions", positions.len())));
    }
    let spec_rows = vec![band.index(); n];
    let extra = embedding_sum(g, &spec_rows, positions, tables, store)?;
    g.add(projected, extra)
}

/// `spectral[bands[j]] + positional[positions[j]]` for every token.
pub(crate) fn embedding_sum<T: Real>(
    g: &mut Graph<T>,
    band_rows: &[usize],
    positions: &[usize],
    tables: &EmbeddingTables,
    store: &ParamStore<T>,
) -> Result<Var> {
    let pos_rows = store.get(tables.positional).rows();
    if let Some(&p) = positions.iter().find(|&&p| p >= pos_rows) {
        return Err(Error::Dimension(format!(
            "position {p} outside the {pos_rows}-row positional table"
        )));
    }
    let spec_rows = store.get(tables.spectral).rows();
    if let Some(&b) = band_rows.iter().find(|&&b| b >= spec_rows) {
        return Err(Error::NotFound(format!("spectral embedding for band {b}")));
    }
    let s = g.param(tables.spectral, store);
    let p = g.param(tables.positional, store);
    let s = g.gather_rows(s, band_rows)?;
    let p = g.gather_rows(p, positions)?;
    g.add(s, p)
}

/// Tokens of one micro-batch, ordered sample-major, then band, then grid position.
#[derive(Debug, Clone)]
pub struct TokenBatch<T: Real> {
    pub grid: PatchGrid,
    /// Normalized pixel patches `[T × P²]`; also the reconstruction targets.
    pub patches: Tensor<T>,
    pub band_ids: Vec<BandId>,
    pub positions: Vec<usize>,
    pub sample_ids: Vec<usize>,
    /// Token range of every sample.
    pub samples: Vec<Range<usize>>,
    /// Token range of every `(sample, band)` group.
    pub groups: Vec<(usize, BandId, Range<usize>)>,
}

impl<T: Real> TokenBatch<T> {
    pub fn from_microbatch(mb: &MicroBatch, patch: usize) -> Result<Self> {
        mb.validate()?;
        let grid = PatchGrid::new(mb.train_size, mb.train_size, patch)?;
        let n = grid.len();
        let total = mb.samples.len() * mb.bands.len() * n;
        let mut data = Vec::with_capacity(total * grid.patch_len());
        let mut band_ids = Vec::with_capacity(total);
        let mut positions = Vec::with_capacity(total);
        let mut sample_ids = Vec::with_capacity(total);
        let mut samples = Vec::with_capacity(mb.samples.len());
        let mut groups = Vec::with_capacity(mb.samples.len() * mb.bands.len());
        for (si, s) in mb.samples.iter().enumerate() {
            let start = band_ids.len();
            for (raster, &band) in s.rasters.iter().zip(&mb.bands) {
                let gstart = band_ids.len();
                let raster: Vec<T> = raster.iter().map(|&v| T::of(v)).collect();
                data.extend_from_slice(patchify(&raster, grid)?.data());
                band_ids.extend(std::iter::repeat(band).take(n));
                positions.extend(0..n);
                sample_ids.extend(std::iter::repeat(si).take(n));
                groups.push((si, band, gstart..band_ids.len()));
            }
            samples.push(start..band_ids.len());
        }
        Ok(Self {
            grid,
            patches: Tensor::new(vec![total, grid.patch_len()], data)?,
            band_ids,
            positions,
            sample_ids,
            samples,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.band_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.band_ids.is_empty()
    }
}

/// Projects and embeds every token of the batch: `[T × d]`.
pub fn embed_batch<T: Real>(
    g: &mut Graph<T>,
    batch: &TokenBatch<T>,
    proj: &ProjectionParams,
    tables: &EmbeddingTables,
    store: &ParamStore<T>,
) -> Result<(Var, Var)> {
    let patches = g.input(batch.patches.clone())?;
    let projected = match proj.mode {
        ProjectionMode::Shared => project_tokens(g, patches, batch.band_ids[0], proj, store)?,
        ProjectionMode::PerBand => {
            let mut bands: Vec<BandId> = batch.band_ids.clone();
            bands.sort_unstable();
            bands.dedup();
            let mut acc: Option<Var> = None;
            for band in bands {
                let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.band_ids[i] == band).collect();
                let rows = g.gather_rows(patches, &idx)?;
                let y = project_tokens(g, rows, band, proj, store)?;
                let placed = g.scatter_rows(y, &idx, batch.len())?;
                acc = Some(match acc {
                    Some(a) => g.add(a, placed)?,
                    None => placed,
                });
            }
            acc.ok_or_else(|| Error::Contract("empty token batch".into()))?
        }
    };
    let band_rows: Vec<usize> = batch.band_ids.iter().map(|b| b.index()).collect();
    let extra = embedding_sum(g, &band_rows, &batch.positions, tables, store)?;
    let tokens = g.add(projected, extra)?;
    Ok((tokens, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|v| v as f64).collect()
    }

    #[test]
    fn patch_counts() {
        let g = PatchGrid::new(64, 64, 64).unwrap();
        let p = patchify(&ramp(64, 64), g).unwrap();
        assert_eq!(p.shape(), &[1, 4096]);
        assert_eq!(p.data(), ramp(64, 64).as_slice());

        let g = PatchGrid::new(64, 64, 16).unwrap();
        assert_eq!(patchify(&ramp(64, 64), g).unwrap().shape(), &[16, 256]);

        let g = PatchGrid::new(60, 60, 16).unwrap();
        let p = patchify(&ramp(60, 60), g).unwrap();
        assert_eq!(p.shape(), &[9, 256]);
        let max = p.data().iter().copied().fold(0.0, f64::max);
        assert_eq!(max, (47 * 60 + 47) as f64);
    }

    #[test]
    fn patch_order_is_row_major() {
        let g = PatchGrid::new(4, 4, 2).unwrap();
        let p = patchify(&ramp(4, 4), g).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn oversized_patch_is_dimension_error() {
        assert!(matches!(PatchGrid::new(8, 8, 9), Err(Error::Dimension(_))));
    }

    #[test]
    fn unpatchify_round_trips() {
        let x = ramp(64, 64);
        let g = PatchGrid::new(64, 64, 16).unwrap();
        assert_eq!(unpatchify(&patchify(&x, g).unwrap(), g).unwrap(), x);

        let g = PatchGrid::new(8, 8, 8).unwrap();
        assert_eq!(unpatchify(&patchify(&ramp(8, 8), g).unwrap(), g).unwrap(), ramp(8, 8));

        let x = ramp(60, 60);
        let g = PatchGrid::new(60, 60, 16).unwrap();
        let back = unpatchify(&patchify(&x, g).unwrap(), g).unwrap();
        for r in 0..60 {
            for c in 0..60 {
                let want = if r < 48 && c < 48 { x[r * 60 + c] } else { 0.0 };
                assert_eq!(back[r * 60 + c], want);
            }
        }
    }

    #[test]
    fn unpatchify_count_mismatch() {
        let g = PatchGrid::new(8, 8, 4).unwrap();
        assert!(unpatchify(&Tensor::<f64>::zeros(&[3, 16]), g).is_err());
    }
}
