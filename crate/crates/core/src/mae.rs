//! Masked autoencoder over per-band tokens.
//!
//! The encoder sees visible tokens only; attention spans every visible token
//! of a sample regardless of band. The decoder rebuilds the full sequence with
//! a shared mask token (plus that slot's spectral and positional embeddings)
//! at masked slots and predicts the masked patches.

use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bands::BandId;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, xavier_uniform, ParamId, ParamStore};
use crate::sampler::MicroBatch;
use crate::tensor::{Real, Tensor};
use crate::tokens::{embed_batch, EmbeddingTables, ProjectionMode, ProjectionParams, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub projection: ProjectionMode,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_width: usize,
    /// Rows of the positional table; at least `(train_size / patch_size)²`.
    pub max_positions: usize,
    /// Rows of the spectral table; the registry size.
    pub num_bands: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            projection: ProjectionMode::Shared,
            patch_size: 4,
            dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_width: 128,
            max_positions: 16,
            num_bands: 36,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// ViT-Base scale: 12 layers, 12 heads, d = 768, P = 16 over 64×64 crops.
    pub fn full() -> Self {
        Self {
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            decoder_width: 256,
            decoder_heads: 8,
            max_positions: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 || self.dim == 0 || self.decoder_width == 0 {
            return bad("patch_size, dim and decoder_width must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_width {} not divisible by {} heads",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.mlp_ratio == 0 || self.max_positions == 0 || self.num_bands == 0 {
            return bad("mlp_ratio, max_positions and num_bands must be positive".into());
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("ln_eps and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub norm: (ParamId, ParamId),
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// `[1 × d]`
    pub mask_token: ParamId,
    pub adapter: (ParamId, ParamId),
    pub blocks: Vec<BlockParams>,
    pub norm: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
    pub heads: usize,
    pub width: usize,
}

/// Parameter handles of the whole network; the values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct FomoNet {
    pub config: ModelConfig,
    pub projection: ProjectionParams,
    pub tables: EmbeddingTables,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

struct Builder<'a, T: Real, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    std: f64,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = trunc_normal(shape, self.std, self.rng);
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::of(v)))
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.normal(format!("{prefix}.w"), &[din, dout])?,
            self.constant(format!("{prefix}.b"), &[dout], 0.0)?,
        ))
    }

    /// Transformer-internal linears use Xavier-uniform weights.
    fn dense(&mut self, prefix: &str, din: usize, dout: usize) -> Result<(ParamId, ParamId)> {
        let w = xavier_uniform(din, dout, self.rng);
        Ok((
            self.store.add(format!("{prefix}.w"), w)?,
            self.constant(format!("{prefix}.b"), &[dout], 0.0)?,
        ))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.constant(format!("{prefix}.g"), &[d], 1.0)?,
            self.constant(format!("{prefix}.b"), &[d], 0.0)?,
        ))
    }

    fn block(&mut self, prefix: &str, d: usize, ratio: usize) -> Result<BlockParams> {
        Ok(BlockParams {
            ln1: self.norm(&format!("{prefix}.ln1"), d)?,
            qkv: self.dense(&format!("{prefix}.attn.qkv"), d, 3 * d)?,
            proj: self.dense(&format!("{prefix}.attn.proj"), d, d)?,
            ln2: self.norm(&format!("{prefix}.ln2"), d)?,
            fc1: self.dense(&format!("{prefix}.mlp.fc1"), d, ratio * d)?,
            fc2: self.dense(&format!("{prefix}.mlp.fc2"), ratio * d, d)?,
        })
    }
}

fn bind_pair<T: Real>(s: &ParamStore<T>, prefix: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((s.id(&format!("{prefix}.{a}"))?, s.id(&format!("{prefix}.{b}"))?))
}

fn bind_block<T: Real>(s: &ParamStore<T>, prefix: &str) -> Result<BlockParams> {
    Ok(BlockParams {
        ln1: bind_pair(s, &format!("{prefix}.ln1"), "g", "b")?,
        qkv: bind_pair(s, &format!("{prefix}.attn.qkv"), "w", "b")?,
        proj: bind_pair(s, &format!("{prefix}.attn.proj"), "w", "b")?,
        ln2: bind_pair(s, &format!("{prefix}.ln2"), "g", "b")?,
        fc1: bind_pair(s, &format!("{prefix}.mlp.fc1"), "w", "b")?,
        fc2: bind_pair(s, &format!("{prefix}.mlp.fc2"), "w", "b")?,
    })
}

fn projection_prefixes(cfg: &ModelConfig) -> Vec<String> {
    match cfg.projection {
        ProjectionMode::Shared => vec!["proj".to_string()],
        ProjectionMode::PerBand => (0..cfg.num_bands).map(|b| format!("proj.{b:02}")).collect(),
    }
}

impl FomoNet {
    /// Creates freshly initialized parameters in `store`.
    pub fn init<T: Real, R: Rng>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, w, plen) = (config.dim, config.decoder_width, config.patch_len());
        let mut b = Builder {
            store,
            rng,
            std: config.init_std,
        };
        let weights = projection_prefixes(config)
            .iter()
            .map(|p| b.linear(p, plen, d))
            .collect::<Result<Vec<_>>>()?;
        let tables = EmbeddingTables {
            spectral: b.normal("embed.spectral".into(), &[config.num_bands, d])?,
            positional: b.normal("embed.positional".into(), &[config.max_positions, d])?,
        };
        let blocks = (0..config.depth)
            .map(|l| b.block(&format!("enc.{l:02}"), d, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams {
            blocks,
            norm: b.norm("enc.norm", d)?,
            heads: config.heads,
            dim: d,
        };
        let mask_token = b.normal("dec.mask_token".into(), &[1, d])?;
        let adapter = b.dense("dec.adapter", d, w)?;
        let blocks = (0..config.decoder_depth)
            .map(|l| b.block(&format!("dec.{l:02}"), w, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams {
            mask_token,
            adapter,
            blocks,
            norm: b.norm("dec.norm", w)?,
            head: b.dense("dec.head", w, plen)?,
            heads: config.decoder_heads,
            width: w,
        };
        Ok(Self {
            config: config.clone(),
            projection: ProjectionParams {
                mode: config.projection,
                weights,
            },
            tables,
            encoder,
            decoder,
        })
    }

    /// Re-attaches to parameters that already exist in `store` (e.g. from a checkpoint).
    pub fn bind<T: Real>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let weights = projection_prefixes(config)
            .iter()
            .map(|p| bind_pair(store, p, "w", "b"))
            .collect::<Result<Vec<_>>>()?;
        let net = Self {
            config: config.clone(),
            projection: ProjectionParams {
                mode: config.projection,
                weights,
            },
            tables: EmbeddingTables {
                spectral: store.id("embed.spectral")?,
                positional: store.id("embed.positional")?,
            },
            encoder: EncoderParams {
                blocks: (0..config.depth)
                    .map(|l| bind_block(store, &format!("enc.{l:02}")))
                    .collect::<Result<_>>()?,
                norm: bind_pair(store, "enc.norm", "g", "b")?,
                heads: config.heads,
                dim: config.dim,
            },
            decoder: DecoderParams {
                mask_token: store.id("dec.mask_token")?,
                adapter: bind_pair(store, "dec.adapter", "w", "b")?,
                blocks: (0..config.decoder_depth)
                    .map(|l| bind_block(store, &format!("dec.{l:02}")))
                    .collect::<Result<_>>()?,
                norm: bind_pair(store, "dec.norm", "g", "b")?,
                head: bind_pair(store, "dec.head", "w", "b")?,
                heads: config.decoder_heads,
                width: config.decoder_width,
            },
        };
        for (name, shape) in layout(config) {
            let have = store.get(store.id(&name)?);
            if have.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    have.shape()
                )));
            }
        }
        Ok(net)
    }
}

/// Names and shapes of every parameter a configuration creates.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, w, plen, r) = (cfg.dim, cfg.decoder_width, cfg.patch_len(), cfg.mlp_ratio);
    let mut out = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, p: &str, i: usize, o: usize| {
        out.push((format!("{p}.w"), vec![i, o]));
        out.push((format!("{p}.b"), vec![o]));
    };
    for p in projection_prefixes(cfg) {
        linear(&mut out, &p, plen, d);
    }
    out.push(("embed.spectral".into(), vec![cfg.num_bands, d]));
    out.push(("embed.positional".into(), vec![cfg.max_positions, d]));
    let block = |out: &mut Vec<(String, Vec<usize>)>, p: &str, d: usize| {
        let lin = |out: &mut Vec<(String, Vec<usize>)>, q: &str, i: usize, o: usize| {
            out.push((format!("{p}.{q}.w"), vec![i, o]));
            out.push((format!("{p}.{q}.b"), vec![o]));
        };
        out.push((format!("{p}.ln1.g"), vec![d]));
        out.push((format!("{p}.ln1.b"), vec![d]));
        lin(out, "attn.qkv", d, 3 * d);
        lin(out, "attn.proj", d, d);
        out.push((format!("{p}.ln2.g"), vec![d]));
        out.push((format!("{p}.ln2.b"), vec![d]));
        lin(out, "mlp.fc1", d, r * d);
        lin(out, "mlp.fc2", r * d, d);
    };
    for l in 0..cfg.depth {
        block(&mut out, &format!("enc.{l:02}"), d);
    }
    out.push(("enc.norm.g".into(), vec![d]));
    out.push(("enc.norm.b".into(), vec![d]));
    out.push(("dec.mask_token".into(), vec![1, d]));
    linear(&mut out, "dec.adapter", d, w);
    for l in 0..cfg.decoder_depth {
        block(&mut out, &format!("dec.{l:02}"), w);
    }
    out.push(("dec.norm.g".into(), vec![w]));
    out.push(("dec.norm.b".into(), vec![w]));
    linear(&mut out, "dec.head", w, plen);
    out
}

/// Closed-form parameter count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, w, plen, r) = (cfg.dim, cfg.decoder_width, cfg.patch_len(), cfg.mlp_ratio);
    let block = |d: usize| 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (r * d * d + r * d) + (r * d * d + d);
    let projections = match cfg.projection {
        ProjectionMode::Shared => 1,
        ProjectionMode::PerBand => cfg.num_bands,
    } * (plen * d + d);
    projections
        + cfg.num_bands * d
        + cfg.max_positions * d
        + cfg.depth * block(d)
        + 2 * d
        + d
        + (d * w + w)
        + cfg.decoder_depth * block(w)
        + 2 * w
        + (w * plen + plen)
}

/// One pre-norm transformer block over `x`, attention restricted to `segments`.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockParams,
    heads: usize,
    segments: &[Range<usize>],
    eps: T,
    store: &ParamStore<T>,
) -> Result<Var> {
    let mut pv = |pair: (ParamId, ParamId)| (g.param(pair.0, store), g.param(pair.1, store));
    let (ln1, qkv, proj, ln2, fc1, fc2) = (pv(p.ln1), pv(p.qkv), pv(p.proj), pv(p.ln2), pv(p.fc1), pv(p.fc2));
    let h = g.layer_norm(x, ln1.0, ln1.1, eps)?;
    let h = g.linear(h, qkv.0, qkv.1)?;
    let h = g.attention(h, heads, segments)?;
    let h = g.linear(h, proj.0, proj.1)?;
    let x = g.add(x, h)?;
    let h = g.layer_norm(x, ln2.0, ln2.1, eps)?;
    let h = g.linear(h, fc1.0, fc1.1)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, fc2.0, fc2.1)?;
    g.add(x, h)
}

/// Encoder over `[T_v × d]` visible tokens; output order matches input order.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    visible: Var,
    segments: &[Range<usize>],
    enc: &EncoderParams,
    eps: T,
    store: &ParamStore<T>,
) -> Result<Var> {
    let xv = g.value(visible);
    if xv.rank() != 2 || xv.cols() != enc.dim {
        return Err(Error::Dimension(format!(
            "encoder width {} cannot take tokens of shape {:?}",
            enc.dim,
            xv.shape()
        )));
    }
    if xv.rows() == 0 {
        return Err(Error::Contract("encoder needs at least one visible token".into()));
    }
    let mut x = visible;
    for b in &enc.blocks {
        x = transformer_block(g, x, b, enc.heads, segments, eps, store)?;
    }
    let (ng, nb) = (g.param(enc.norm.0, store), g.param(enc.norm.1, store));
    g.layer_norm(x, ng, nb, eps)
}

/// Which tokens of a batch are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
}

impl MaskPlan {
    pub fn from_flags(masked: Vec<bool>) -> Self {
        let masked_idx = (0..masked.len()).filter(|&i| masked[i]).collect();
        let visible_idx = (0..masked.len()).filter(|&i| !masked[i]).collect();
        Self {
            masked,
            masked_idx,
            visible_idx,
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Validation(format!("mask ratio {r} outside [0, 1)")));
    }
    Ok(())
}

/// Masks `round(r·T)` tokens uniformly without replacement, always leaving one visible.
pub fn mask_tokens<R: Rng + ?Sized>(total: usize, r: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(r)?;
    if total == 0 {
        return Err(Error::Validation("cannot mask an empty batch".into()));
    }
    let count = ((r * total as f64).round() as usize).min(total - 1);
    let mut masked = vec![false; total];
    for i in index::sample(rng, total, count) {
        masked[i] = true;
    }
    Ok(MaskPlan::from_flags(masked))
}

/// Masks `round(r·n)` tokens inside every `(sample, band)` group independently.
pub fn mask_tokens_stratified<R: Rng + ?Sized>(groups: &[Range<usize>], r: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(r)?;
    let total = groups.iter().map(|g| g.end).max().unwrap_or(0);
    if total == 0 {
        return Err(Error::Validation("cannot mask an empty batch".into()));
    }
    let mut masked = vec![false; total];
    for g in groups {
        let n = g.len();
        let count = ((r * n as f64).round() as usize).min(n.saturating_sub(1));
        for i in index::sample(rng, n, count) {
            masked[g.start + i] = true;
        }
    }
    Ok(MaskPlan::from_flags(masked))
}

/// Segment ranges of the listed token indices, grouped by sample (indices ascending).
fn segments_of(indices: &[usize], sample_ids: &[usize], n_samples: usize) -> Vec<Range<usize>> {
    let mut counts = vec![0usize; n_samples];
    for &i in indices {
        counts[sample_ids[i]] += 1;
    }
    let mut start = 0;
    counts
        .into_iter()
        .map(|c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect()
}

/// Decoder: rebuilds the full sequence and predicts `[n_masked × P²]` patches.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    encoded: Var,
    slot_embeddings: Var,
    plan: &MaskPlan,
    sample_ids: &[usize],
    n_samples: usize,
    dec: &DecoderParams,
    eps: T,
    store: &ParamStore<T>,
) -> Result<Var> {
    let total = plan.len();
    if g.value(encoded).rows() != plan.visible_idx.len() {
        return Err(Error::Contract(format!(
            "{} encoded tokens for {} visible slots",
            g.value(encoded).rows(),
            plan.visible_idx.len()
        )));
    }
    if g.value(slot_embeddings).rows() != total || sample_ids.len() != total {
        return Err(Error::Contract("mask plan does not match the token batch".into()));
    }
    let mut full = g.scatter_rows(encoded, &plan.visible_idx, total)?;
    if !plan.masked_idx.is_empty() {
        let mt = g.param(dec.mask_token, store);
        let mt = g.gather_rows(mt, &vec![0; plan.masked_idx.len()])?;
        let emb = g.gather_rows(slot_embeddings, &plan.masked_idx)?;
        let filler = g.add(mt, emb)?;
        let filler = g.scatter_rows(filler, &plan.masked_idx, total)?;
        full = g.add(full, filler)?;
    }
    let all: Vec<usize> = (0..total).collect();
    let segments = segments_of(&all, sample_ids, n_samples);
    let (aw, ab) = (g.param(dec.adapter.0, store), g.param(dec.adapter.1, store));
    let mut x = g.linear(full, aw, ab)?;
    for b in &dec.blocks {
        x = transformer_block(g, x, b, dec.heads, &segments, eps, store)?;
    }
    let (ng, nb) = (g.param(dec.norm.0, store), g.param(dec.norm.1, store));
    let x = g.layer_norm(x, ng, nb, eps)?;
    let x = g.gather_rows(x, &plan.masked_idx)?;
    let (hw, hb) = (g.param(dec.head.0, store), g.param(dec.head.1, store));
    g.linear(x, hw, hb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossReduction {
    /// Mean over every masked-patch entry.
    #[default]
    Mean,
    /// Sum over every masked-patch entry.
    Sum,
}

/// Squared error between reconstructions and targets of the masked patches.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, reconstructions: Var, targets: &Tensor<T>, reduction: LossReduction) -> Result<Var> {
    let rv = g.value(reconstructions);
    if rv.rows() == 0 {
        return Err(Error::Validation("loss needs at least one masked token".into()));
    }
    if rv.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "reconstructions {:?} vs targets {:?}",
            rv.shape(),
            targets.shape()
        )));
    }
    let neg = Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().map(|&v| -v).collect(),
    )?;
    let neg = g.input(neg)?;
    let diff = g.add(reconstructions, neg)?;
    let sq = g.mul(diff, diff)?;
    match reduction {
        LossReduction::Mean => g.mean(sq),
        LossReduction::Sum => g.sum(sq),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeOptions {
    pub mask_ratio: f64,
    /// Mask each `(sample, band)` group separately instead of the whole batch.
    pub stratified_mask: bool,
    /// Normalize every target patch by its own mean and std.
    pub per_patch_targets: bool,
    pub reduction: LossReduction,
}

impl Default for MaeOptions {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            stratified_mask: false,
            per_patch_targets: false,
            reduction: LossReduction::Mean,
        }
    }
}

pub struct ForwardOutput<T: Real> {
    pub loss: Var,
    pub reconstructions: Var,
    pub plan: MaskPlan,
    pub batch: TokenBatch<T>,
    pub targets: Tensor<T>,
}

impl<T: Real> ForwardOutput<T> {
    /// Mean squared error per band over the masked patches.
    pub fn band_losses(&self, g: &Graph<T>) -> Vec<(BandId, f64)> {
        let rec = g.value(self.reconstructions);
        let mut acc: Vec<(BandId, f64, usize)> = Vec::new();
        for (row, &tok) in self.plan.masked_idx.iter().enumerate() {
            let band = self.batch.band_ids[tok];
            let se: f64 = rec
                .row(row)
                .iter()
                .zip(self.targets.row(row))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            match acc.iter_mut().find(|e| e.0 == band) {
                Some(e) => {
                    e.1 += se;
                    e.2 += rec.cols();
                }
                None => acc.push((band, se, rec.cols())),
            }
        }
        acc.sort_by_key(|e| e.0);
        acc.into_iter().map(|(b, s, n)| (b, s / n as f64)).collect()
    }
}

fn per_patch_normalize<T: Real>(t: &mut Tensor<T>) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let n = T::of(c as f64);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + T::of(1e-6)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rs;
        }
    }
}

/// Builds the masked-reconstruction loss of one token batch under a given plan.
pub fn mae_forward_tokens<T: Real>(
    g: &mut Graph<T>,
    net: &FomoNet,
    store: &ParamStore<T>,
    batch: TokenBatch<T>,
    plan: MaskPlan,
    opts: &MaeOptions,
) -> Result<ForwardOutput<T>> {
    if plan.len() != batch.len() {
        return Err(Error::Contract(format!(
            "mask plan over {} tokens for a batch of {}",
            plan.len(),
            batch.len()
        )));
    }
    if plan.masked_idx.is_empty() {
        return Err(Error::Validation("loss needs at least one masked token".into()));
    }
    let eps = T::of(net.config.ln_eps);
    let (tokens, slot_emb) = embed_batch(g, &batch, &net.projection, &net.tables, store)?;
    let visible = g.gather_rows(tokens, &plan.visible_idx)?;
    let segments = segments_of(&plan.visible_idx, &batch.sample_ids, batch.samples.len());
    let encoded = encode(g, visible, &segments, &net.encoder, eps, store)?;
    let reconstructions = decode(
        g,
        encoded,
        slot_emb,
        &plan,
        &batch.sample_ids,
        batch.samples.len(),
        &net.decoder,
        eps,
        store,
    )?;
    let mut targets = Tensor::new(
        vec![plan.masked_idx.len(), batch.grid.patch_len()],
        plan.masked_idx
            .iter()
            .flat_map(|&i| batch.patches.row(i).iter().copied())
            .collect(),
    )?;
    if opts.per_patch_targets {
        per_patch_normalize(&mut targets);
    }
    let loss = mae_loss(g, reconstructions, &targets, opts.reduction)?;
    Ok(ForwardOutput {
        loss,
        reconstructions,
        plan,
        batch,
        targets,
    })
}

/// patchify → project → embed → mask → encode → decode → loss, as one graph.
pub fn mae_forward<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    net: &FomoNet,
    store: &ParamStore<T>,
    mb: &MicroBatch,
    opts: &MaeOptions,
    rng: &mut R,
) -> Result<ForwardOutput<T>> {
    let batch = TokenBatch::from_microbatch(mb, net.config.patch_size)?;
    let max_pos = batch.grid.len();
    if max_pos > net.config.max_positions {
        return Err(Error::Dimension(format!(
            "{max_pos} patches per band exceed the {}-row positional table",
            net.config.max_positions
        )));
    }
    let plan = if opts.stratified_mask {
        let groups: Vec<Range<usize>> = batch.groups.iter().map(|g| g.2.clone()).collect();
        mask_tokens_stratified(&groups, opts.mask_ratio, rng)?
    } else {
        mask_tokens(batch.len(), opts.mask_ratio, rng)?
    };
    mae_forward_tokens(g, net, store, batch, plan, opts)
}

/// Loss value and per-parameter gradients (in store order) of one micro-batch.
pub struct MicroResult<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub band_losses: Vec<(BandId, f64)>,
    pub tokens: usize,
}

pub fn loss_and_grads<T: Real, R: Rng + ?Sized>(
    net: &FomoNet,
    store: &ParamStore<T>,
    mb: &MicroBatch,
    opts: &MaeOptions,
    rng: &mut R,
) -> Result<MicroResult<T>> {
    let mut g = Graph::new();
    let out = mae_forward(&mut g, net, store, mb, opts, rng)?;
    let loss = g.value(out.loss).data()[0].as_f64();
    let grads = g.backward(out.loss)?;
    let mut buf = store.zeros_like();
    grads.accumulate_into(&mut buf);
    Ok(MicroResult {
        loss,
        grads: buf,
        band_losses: out.band_losses(&g),
        tokens: out.batch.len(),
    })
}

/// Unmasked encoding of every token, returned per sample as `[T_s × d]`.
pub fn encode_all<T: Real>(net: &FomoNet, store: &ParamStore<T>, mb: &MicroBatch) -> Result<Vec<Tensor<T>>> {
    let batch = TokenBatch::from_microbatch(mb, net.config.patch_size)?;
    let mut g = Graph::new();
    let (tokens, _) = embed_batch(&mut g, &batch, &net.projection, &net.tables, store)?;
    let encoded = encode(&mut g, tokens, &batch.samples, &net.encoder, T::of(net.config.ln_eps), store)?;
    let out = g.value(encoded);
    batch
        .samples
        .iter()
        .map(|r| {
            Tensor::new(
                vec![r.len(), out.cols()],
                out.data()[r.start * out.cols()..r.end * out.cols()].to_vec(),
            )
        })
        .collect()
}

/// Per-band view of one sample's reconstruction, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct BandReconstruction {
    pub band: BandId,
    pub target: Vec<f64>,
    /// Visible patches copied from the input, masked patches predicted.
    pub reconstruction: Vec<f64>,
    /// Masked flag of every grid patch.
    pub masked: Vec<bool>,
}

/// Masks and reconstructs the first sample of `mb`, returning one image per band.
pub fn reconstruct_sample<T: Real>(
    net: &FomoNet,
    store: &ParamStore<T>,
    mb: &MicroBatch,
    opts: &MaeOptions,
    mask_seed: u64,
) -> Result<(Vec<BandReconstruction>, f64)> {
    let first = MicroBatch {
        samples: mb.samples.iter().take(1).cloned().collect(),
        ..mb.clone()
    };
    let mut g = Graph::new();
    let out = mae_forward(&mut g, net, store, &first, opts, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    let loss = g.value(out.loss).data()[0].as_f64();
    let rec = g.value(out.reconstructions);
    let mut filled = out.batch.patches.clone();
    let c = filled.cols();
    for (row, &tok) in out.plan.masked_idx.iter().enumerate() {
        filled.data_mut()[tok * c..(tok + 1) * c].copy_from_slice(rec.row(row));
    }
    let grid = out.batch.grid;
    let mut bands = Vec::new();
    for (_, band, range) in &out.batch.groups {
        let slice = |t: &Tensor<T>| -> Result<Vec<f64>> {
            let part = Tensor::new(vec![range.len(), c], t.data()[range.start * c..range.end * c].to_vec())?;
            Ok(crate::tokens::unpatchify(&part, grid)?.into_iter().map(|v| v.as_f64()).collect())
        };
        bands.push(BandReconstruction {
            band: *band,
            target: slice(&out.batch.patches)?,
            reconstruction: slice(&filled)?,
            masked: out.plan.masked[range.clone()].to_vec(),
        });
    }
    Ok((bands, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = mask_tokens(16, 0.75, &mut rng).unwrap();
        assert_eq!((p.masked_idx.len(), p.visible_idx.len()), (12, 4));
        assert_eq!(mask_tokens(16, 0.0, &mut rng).unwrap().masked_idx.len(), 0);
        assert_eq!(mask_tokens(16, 15.0 / 16.0, &mut rng).unwrap().masked_idx.len(), 15);
        assert!(matches!(mask_tokens(16, 1.0, &mut rng), Err(Error::Validation(_))));
        assert!(matches!(mask_tokens(16, -0.1, &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn at_least_one_token_stays_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = mask_tokens(16, 0.99, &mut rng).unwrap();
        assert_eq!(p.visible_idx.len(), 1);
    }

    #[test]
    fn stratified_mask_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = mask_tokens_stratified(&[0..8, 8..16, 16..20], 0.5, &mut rng).unwrap();
        assert_eq!(p.masked[0..8].iter().filter(|&&m| m).count(), 4);
        assert_eq!(p.masked[8..16].iter().filter(|&&m| m).count(), 4);
        assert_eq!(p.masked[16..20].iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn segments_follow_samples() {
        let s = segments_of(&[0, 2, 5, 6], &[0, 0, 0, 1, 1, 2, 2], 3);
        assert_eq!(s, vec![0..2, 2..2, 2..4]);
    }

    #[test]
    fn param_count_matches_store() {
        for mode in [ProjectionMode::Shared, ProjectionMode::PerBand] {
            let cfg = ModelConfig {
                projection: mode,
                dim: 16,
                depth: 2,
                heads: 2,
                decoder_depth: 1,
                decoder_width: 8,
                decoder_heads: 2,
                ..ModelConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            FomoNet::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.num_elements(), param_count(&cfg));
            let names: Vec<(String, Vec<usize>)> =
                store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
            assert_eq!(names, layout(&cfg));
        }
    }

    #[test]
    fn bind_recovers_handles() {
        let cfg = ModelConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            decoder_width: 8,
            decoder_heads: 2,
            decoder_depth: 1,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let net = FomoNet::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bound = FomoNet::bind(&cfg, &store).unwrap();
        assert_eq!(net.encoder.blocks[0].qkv, bound.encoder.blocks[0].qkv);
        assert_eq!(net.decoder.head, bound.decoder.head);
        let wider = ModelConfig { dim: 32, ..cfg };
        assert!(FomoNet::bind(&wider, &store).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full().validate().is_ok());
        let bad = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
