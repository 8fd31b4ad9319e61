//! Frozen-backbone evaluation: linear probes on pooled features, a small
//! segmentation head on upsampled tokens, and the F1 / IoU metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bands::BandId;
use crate::error::{Error, Result};
use crate::mae::{encode_all, FomoNet};
use crate::params::{ParamId, ParamStore};
use crate::raster::Dataset;
use crate::sampler::{center_crop, MicroBatch};
use crate::tensor::{Real, Tensor};
use crate::tokens::PatchGrid;
use crate::train::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Cls,
    Seg,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "seg" => Ok(Task::Seg),
            other => Err(Error::Validation(format!("unknown task `{other}` (expected cls or seg)"))),
        }
    }
}

// --- metrics ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_micro: f64,
    /// Mean F1 over classes that occur in the targets.
    pub f1_macro: f64,
    pub macro_classes: usize,
    /// Classes left out of the macro mean because they never occur in the targets.
    pub excluded_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Assembles a report from per-class confusion counts.
pub fn report_from_counts(counts: &[Counts], accuracy: Option<f64>, with_miou: bool) -> MetricReport {
    let per_class: Vec<ClassMetrics> = counts
        .iter()
        .enumerate()
        .map(|(class, c)| ClassMetrics {
            class,
            support: c.tp + c.fn_,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        })
        .collect();
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |(a, b, c), k| (a + k.tp, b + k.fp, c + k.fn_));
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let f1_macro = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|c| c.f1).sum::<f64>() / present.len() as f64
    };
    let miou = with_miou.then(|| {
        let defined: Vec<f64> = counts
            .iter()
            .zip(&per_class)
            .filter(|(c, _)| c.tp + c.fp + c.fn_ > 0)
            .map(|(_, m)| m.iou)
            .collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    });
    MetricReport {
        f1_micro: ratio(2 * tp, 2 * tp + fp + fn_),
        f1_macro,
        macro_classes: present.len(),
        excluded_classes: per_class.len() - present.len(),
        accuracy,
        miou,
        per_class,
    }
}

fn single_label_counts(pred: &[usize], target: &[usize], classes: usize) -> Result<Vec<Counts>> {
    if pred.is_empty() {
        return Err(Error::Validation("metrics need at least one prediction".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(target).find(|&&c| c >= classes) {
        return Err(Error::Validation(format!("class id {c} outside 0..{classes}")));
    }
    let mut counts = vec![Counts::default(); classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p == t {
            counts[t].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[t].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Single-label classification; micro F1 equals accuracy here.
pub fn classification_metrics(pred: &[usize], target: &[usize], classes: usize) -> Result<MetricReport> {
    let counts = single_label_counts(pred, target, classes)?;
    let correct = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(report_from_counts(&counts, Some(correct as f64 / pred.len() as f64), false))
}

/// Per-pixel class maps; adds mIoU over classes with a defined IoU.
pub fn segmentation_metrics(pred: &[usize], target: &[usize], classes: usize) -> Result<MetricReport> {
    let counts = single_label_counts(pred, target, classes)?;
    let correct = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(report_from_counts(&counts, Some(correct as f64 / pred.len() as f64), true))
}

/// Multi-label classification from multi-hot rows.
pub fn multilabel_metrics(pred: &[Vec<bool>], target: &[Vec<bool>]) -> Result<MetricReport> {
    if pred.is_empty() {
        return Err(Error::Validation("metrics need at least one prediction".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let classes = target[0].len();
    let mut counts = vec![Counts::default(); classes];
    for (p, t) in pred.iter().zip(target) {
        if p.len() != classes || t.len() != classes {
            return Err(Error::Dimension("multi-hot rows differ in length".into()));
        }
        for c in 0..classes {
            match (p[c], t[c]) {
                (true, true) => counts[c].tp += 1,
                (true, false) => counts[c].fp += 1,
                (false, true) => counts[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(report_from_counts(&counts, None, false))
}

// --- features --------------------------------------------------------------

/// Mean-pooled encoder features, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub sample_ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
}

const CHUNK: usize = 16;

fn check_subset(ds: &Dataset, bands: &[BandId]) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Validation("band subset is empty".into()));
    }
    for b in bands {
        if !ds.bands.contains(b) {
            return Err(Error::NotFound(format!("band {b} in dataset `{}`", ds.name)));
        }
    }
    Ok(())
}

/// Unmasked encoder tokens of every sample (center crops), `[k·N × d]` each.
pub fn encode_dataset<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    bands: &[BandId],
    size: usize,
) -> Result<Vec<Tensor<T>>> {
    check_subset(ds, bands)?;
    let indices: Vec<usize> = (0..ds.samples.len()).collect();
    let chunks: Vec<Result<Vec<Tensor<T>>>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let samples = chunk
                .iter()
                .map(|&i| center_crop(ds, i, bands, size))
                .collect::<Result<Vec<_>>>()?;
            let mb = MicroBatch {
                dataset: ds.name.clone(),
                bands: bands.to_vec(),
                train_size: size,
                samples,
            };
            encode_all(net, store, &mb)
        })
        .collect();
    let mut out = Vec::with_capacity(ds.samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Mean over all encoder output tokens of each sample (no masking).
pub fn extract_features<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    bands: &[BandId],
    size: usize,
) -> Result<FeatureBatch> {
    let encoded = encode_dataset(net, store, ds, bands, size)?;
    let features = encoded
        .iter()
        .map(|t| {
            let (n, d) = (t.rows(), t.cols());
            let mut f = vec![0.0; d];
            for r in 0..n {
                for (a, &v) in f.iter_mut().zip(t.row(r)) {
                    *a += v.as_f64();
                }
            }
            f.iter_mut().for_each(|v| *v /= n as f64);
            f
        })
        .collect();
    Ok(FeatureBatch {
        sample_ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        features,
        labels: ds.labels(),
    })
}

// --- linear probe ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Fraction of samples used to fit the head; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            l2: 1e-4,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Targets {
    Single { labels: Vec<usize>, classes: usize },
    Multi(Vec<Vec<bool>>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Single { labels, .. } => labels.len(),
            Targets::Multi(rows) => rows.len(),
        }
    }

    fn classes(&self) -> usize {
        match self {
            Targets::Single { classes, .. } => *classes,
            Targets::Multi(rows) => rows.first().map_or(0, |r| r.len()),
        }
    }

    fn present_classes(&self) -> usize {
        match self {
            Targets::Single { labels, classes } => {
                let mut seen = vec![false; *classes];
                labels.iter().for_each(|&l| seen[l] = true);
                seen.iter().filter(|&&s| s).count()
            }
            Targets::Multi(rows) => (0..self.classes()).filter(|&c| rows.iter().any(|r| r[c])).count(),
        }
    }
}

/// Affine head over standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub weights: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub multilabel: bool,
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for row in x {
        std.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    (mean, std)
}

fn design(x: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Result<Tensor<f64>> {
    let d = mean.len();
    let mut data = Vec::with_capacity(x.len() * d);
    for row in x {
        if row.len() != d {
            return Err(Error::Dimension(format!("feature of width {} for a {d}-wide probe", row.len())));
        }
        data.extend(row.iter().zip(mean.iter().zip(std)).map(|(v, (m, s))| (v - m) / s));
    }
    Tensor::new(vec![x.len(), d], data)
}

/// Trains a single affine layer with softmax (single-label) or sigmoid (multi-label) loss.
pub fn fit_probe(features: &[Vec<f64>], targets: &Targets, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} feature rows for {} targets",
            features.len(),
            targets.len()
        )));
    }
    if targets.present_classes() < 2 {
        return Err(Error::Validation(
            "probe needs at least two classes in the training split".into(),
        ));
    }
    let (mean, std) = standardizer(features);
    let x = design(features, &mean, &std)?;
    let (d, c) = (mean.len(), targets.classes());
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::zeros(&[d, c]))?;
    let b = store.add("b", Tensor::zeros(&[c]))?;
    let mut state = OptimizerState::new(&store);
    let opt = AdamWConfig {
        base_lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let multi_targets = match targets {
        Targets::Multi(rows) => Some(Tensor::new(
            vec![rows.len(), c],
            rows.iter().flatten().map(|&t| if t { 1.0 } else { 0.0 }).collect(),
        )?),
        Targets::Single { .. } => None,
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let (wv, bv) = (g.param(w, &store), g.param(b, &store));
        let logits = g.linear(xv, wv, bv)?;
        let loss = match (targets, &multi_targets) {
            (Targets::Single { labels, .. }, _) => g.softmax_cross_entropy(logits, labels)?,
            (Targets::Multi(_), Some(t)) => g.sigmoid_bce(logits, t)?,
            _ => unreachable!(),
        };
        let grads = g.backward(loss)?;
        let mut buf = store.zeros_like();
        grads.accumulate_into(&mut buf);
        for (gw, &wv) in buf[w.index()].data_mut().iter_mut().zip(store.get(w).data()) {
            *gw += cfg.l2 * wv;
        }
        adamw_step(&mut store, &mut buf, &mut state, &opt, cfg.lr)?;
    }
    Ok(LinearProbe {
        weights: store.get(w).clone(),
        bias: store.get(b).clone(),
        mean,
        std,
        multilabel: matches!(targets, Targets::Multi(_)),
    })
}

impl LinearProbe {
    pub fn logits(&self, features: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let x = design(features, &self.mean, &self.std)?;
        let mut out = x.matmul(&self.weights)?;
        let c = self.bias.len();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        Ok(out)
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        let l = self.logits(features)?;
        Ok((0..l.rows()).map(|r| argmax(l.row(r))).collect())
    }

    pub fn predict_multi(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<bool>>> {
        let l = self.logits(features)?;
        Ok((0..l.rows()).map(|r| l.row(r).iter().map(|&v| v > 0.0).collect()).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic shuffled train/test split of `n` indices.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(cut);
    (idx, test)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub task: Task,
    pub bands: Vec<BandId>,
    pub train: MetricReport,
    pub test: MetricReport,
    /// Test accuracy of always predicting the most frequent training class.
    pub majority_baseline: f64,
    pub backbone_hash: String,
}

fn select<X: Clone>(items: &[X], idx: &[usize]) -> Vec<X> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Linear probe on frozen features of a labeled dataset.
pub fn probe_classification<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    bands: &[BandId],
    size: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let hash = store.hash();
    let fb = extract_features(net, store, ds, bands, size)?;
    let labels = fb
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Validation(format!("sample `{}` has no label", fb.sample_ids[i]))))
        .collect::<Result<Vec<usize>>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (tr, te) = split_indices(labels.len(), cfg.train_fraction, cfg.seed);
    let (xtr, ytr) = (select(&fb.features, &tr), select(&labels, &tr));
    let (xte, yte) = (select(&fb.features, &te), select(&labels, &te));
    let probe = fit_probe(&xtr, &Targets::Single { labels: ytr.clone(), classes }, cfg)?;
    let train = classification_metrics(&probe.predict(&xtr)?, &ytr, classes)?;
    let test = classification_metrics(&probe.predict(&xte)?, &yte, classes)?;
    let mut freq = vec![0usize; classes];
    ytr.iter().for_each(|&l| freq[l] += 1);
    let majority = argmax(&freq.iter().map(|&f| f as f64).collect::<Vec<_>>());
    let majority_baseline = yte.iter().filter(|&&l| l == majority).count() as f64 / yte.len() as f64;
    if store.hash() != hash {
        return Err(Error::Contract("backbone parameters changed during probing".into()));
    }
    Ok(ProbeOutcome {
        task: Task::Cls,
        bands: bands.to_vec(),
        train,
        test,
        majority_baseline,
        backbone_hash: hash,
    })
}

// --- segmentation head -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegHeadConfig {
    pub hidden: usize,
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            classes: 2,
            epochs: 150,
            lr: 1e-2,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Two pointwise layers applied to upsampled token features.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub store: ParamStore<f64>,
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl SegHead {
    pub fn new(dim: usize, cfg: &SegHeadConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let w1 = crate::params::trunc_normal(&[dim, cfg.hidden], (1.0 / dim as f64).sqrt(), &mut rng);
        let w2 = crate::params::trunc_normal(&[cfg.hidden, cfg.classes], (1.0 / cfg.hidden as f64).sqrt(), &mut rng);
        let fc1 = (store.add("fc1.w", w1)?, store.add("fc1.b", Tensor::zeros(&[cfg.hidden]))?);
        let fc2 = (store.add("fc2.w", w2)?, store.add("fc2.b", Tensor::zeros(&[cfg.classes]))?);
        Ok(Self { store, fc1, fc2 })
    }
}

/// Row of the token grid feeding every output pixel (nearest-neighbor ×P).
fn upsample_index(grid: PatchGrid) -> Vec<usize> {
    let p = grid.patch;
    let (h, w) = (grid.rows() * p, grid.cols() * p);
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            idx.push((y / p) * grid.cols() + x / p);
        }
    }
    idx
}

/// Per-pixel class scores `[H·W × C]` from a `[N × d]` token grid.
pub fn seg_head_forward(g: &mut Graph<f64>, tokens: Var, grid: PatchGrid, head: &SegHead) -> Result<Var> {
    let rows = g.value(tokens).rows();
    if rows % grid.len() != 0 || rows == 0 {
        return Err(Error::Dimension(format!(
            "{rows} tokens do not fill a {}x{} grid",
            grid.rows(),
            grid.cols()
        )));
    }
    let base = upsample_index(grid);
    let idx: Vec<usize> = (0..rows / grid.len())
        .flat_map(|s| base.iter().map(move |&i| s * grid.len() + i))
        .collect();
    let up = g.gather_rows(tokens, &idx)?;
    let p = |g: &mut Graph<f64>, (w, b): (ParamId, ParamId)| (g.param(w, &head.store), g.param(b, &head.store));
    let (w1, b1) = p(g, head.fc1);
    let (w2, b2) = p(g, head.fc2);
    let h = g.linear(up, w1, b1)?;
    let h = g.gelu(h)?;
    g.linear(h, w2, b2)
}

/// Averages a `[k·N × d]` encoding over its `k` bands into an `[N × d]` grid.
pub fn band_mean_grid<T: Real>(encoded: &Tensor<T>, n: usize) -> Result<Tensor<f64>> {
    let (rows, d) = (encoded.rows(), encoded.cols());
    if n == 0 || rows % n != 0 {
        return Err(Error::Dimension(format!("{rows} tokens are not a multiple of {n} positions")));
    }
    let k = rows / n;
    let mut out = vec![0.0; n * d];
    for r in 0..rows {
        let pos = r % n;
        for (o, &v) in out[pos * d..(pos + 1) * d].iter_mut().zip(encoded.row(r)) {
            *o += v.as_f64() / k as f64;
        }
    }
    Tensor::new(vec![n, d], out)
}

fn stack(grids: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let d = grids[0].cols();
    let rows: usize = grids.iter().map(|t| t.rows()).sum();
    Tensor::new(vec![rows, d], grids.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Trains the segmentation head on frozen tokens of a masked dataset.
pub fn probe_segmentation<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    bands: &[BandId],
    size: usize,
    cfg: &SegHeadConfig,
) -> Result<ProbeOutcome> {
    let hash = store.hash();
    let grid = PatchGrid::new(size, size, net.config.patch_size)?;
    let encoded = encode_dataset(net, store, ds, bands, size)?;
    let grids = encoded
        .iter()
        .map(|e| band_mean_grid(e, grid.len()))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<usize>> = (0..ds.samples.len())
        .map(|i| {
            let s = center_crop(ds, i, bands, size)?;
            let m = s
                .mask
                .ok_or_else(|| Error::Validation(format!("sample `{}` has no mask", s.sample_id)))?;
            Ok(crop_to_grid(&m, size, grid))
        })
        .collect::<Result<_>>()?;
    if let Some(&c) = masks.iter().flatten().find(|&&c| c >= cfg.classes) {
        return Err(Error::Validation(format!("mask class {c} outside 0..{}", cfg.classes)));
    }
    let (tr, te) = split_indices(ds.samples.len(), cfg.train_fraction, cfg.seed);
    let mut head = SegHead::new(net.config.dim, cfg)?;
    let xtr = stack(&select(&grids, &tr))?;
    let ytr: Vec<usize> = tr.iter().flat_map(|&i| masks[i].iter().copied()).collect();
    let mut state = OptimizerState::new(&head.store);
    let opt = AdamWConfig {
        base_lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let x = g.input(xtr.clone())?;
        let scores = seg_head_forward(&mut g, x, grid, &head)?;
        let loss = g.softmax_cross_entropy(scores, &ytr)?;
        let grads = g.backward(loss)?;
        let mut buf = head.store.zeros_like();
        grads.accumulate_into(&mut buf);
        adamw_step(&mut head.store, &mut buf, &mut state, &opt, cfg.lr)?;
    }
    let predict = |idx: &[usize]| -> Result<(Vec<usize>, Vec<usize>)> {
        let mut g = Graph::new();
        let x = g.input(stack(&select(&grids, idx))?)?;
        let s = seg_head_forward(&mut g, x, grid, &head)?;
        let s = g.value(s);
        let pred = (0..s.rows()).map(|r| argmax(s.row(r))).collect();
        let target = idx.iter().flat_map(|&i| masks[i].iter().copied()).collect();
        Ok((pred, target))
    };
    let (ptr, ttr) = predict(&tr)?;
    let (pte, tte) = predict(&te)?;
    let train = segmentation_metrics(&ptr, &ttr, cfg.classes)?;
    let test = segmentation_metrics(&pte, &tte, cfg.classes)?;
    let majority = argmax(&(0..cfg.classes).map(|c| ttr.iter().filter(|&&t| t == c).count() as f64).collect::<Vec<_>>());
    let majority_baseline = tte.iter().filter(|&&t| t == majority).count() as f64 / tte.len() as f64;
    if store.hash() != hash {
        return Err(Error::Contract("backbone parameters changed during probing".into()));
    }
    Ok(ProbeOutcome {
        task: Task::Seg,
        bands: bands.to_vec(),
        train,
        test,
        majority_baseline,
        backbone_hash: hash,
    })
}

/// Class ids of the pixels covered by the token grid (top-left aligned).
fn crop_to_grid(mask: &[f32], size: usize, grid: PatchGrid) -> Vec<usize> {
    let (h, w) = (grid.rows() * grid.patch, grid.cols() * grid.patch);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(mask[y * size + x].round().max(0.0) as usize);
        }
    }
    out
}
