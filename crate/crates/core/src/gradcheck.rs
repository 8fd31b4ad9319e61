//! Central finite-difference checking of analytic gradients (64-bit only).

use rayon::prelude::*;
use serde::Serialize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::mae::{mae_forward_tokens, mask_tokens, FomoNet, MaeOptions};
use crate::sampler::MicroBatch;
use crate::tokens::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced coordinates of each parameter.
    pub max_per_param: Option<usize>,
    pub stencil: Stencil,
}

/// Central-difference stencil used for the numeric side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    FourPoint,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_per_param: None,
            stencil: Stencil::TwoPoint,
        }
    }
}

fn coordinates(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|j| j * len / k).collect(),
        _ => (0..len).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
    /// Coordinates over tolerance, worst first.
    pub mismatches: Vec<Mismatch>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` (one tensor per parameter, in store order) against
/// central differences of `loss` for every scalar parameter.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    loss: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64> + Sync,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::Validation(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            cfg.eps
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| {
            coordinates(params.get(id).len(), cfg.max_per_param)
                .into_iter()
                .map(move |i| (id, i))
        })
        .collect();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let v = loss(store)?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let results: Vec<Result<(ParamId, usize, f64, f64)>> = coords
        .par_chunks(64)
        .flat_map_iter(|chunk| {
            let mut store = params.clone();
            chunk
                .iter()
                .map(|&(id, i)| {
                    let orig = store.get(id).data()[i];
                    let mut at = |h: f64| {
                        store.get_mut(id).data_mut()[i] = orig + h;
                        let v = eval(&store);
                        store.get_mut(id).data_mut()[i] = orig;
                        v
                    };
                    let h = cfg.eps;
                    let numeric = match cfg.stencil {
                        Stencil::TwoPoint => (at(h)? - at(-h)?) / (2.0 * h),
                        Stencil::FourPoint => {
                            (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                        }
                    };
                    Ok((id, i, analytic[id.index()].data()[i], numeric))
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst = (String::new(), 0usize);
    let mut mismatches = Vec::new();
    for r in results {
        let (id, i, a, n) = r?;
        let rel = relative_error(a, n);
        if rel > max_rel_err || worst.0.is_empty() {
            max_rel_err = rel;
            worst = (params.name(id).to_string(), i);
        }
        if rel > cfg.tol {
            mismatches.push(Mismatch {
                param: params.name(id).to_string(),
                index: i,
                analytic: a,
                numeric: n,
                rel_err: rel,
            });
        }
    }
    mismatches.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    Ok(GradCheckReport {
        max_rel_err,
        worst_param: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        passed: max_rel_err <= cfg.tol,
        mismatches,
    })
}

/// Runs `build` once through [`Graph::backward`] for the analytic side and
/// repeatedly (forward only) for the numeric side.
pub fn grad_check_graph<F>(
    params: &ParamStore<f64>,
    build: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let root = build(&mut g, params)?;
    let grads = g.backward(root)?;
    let mut analytic = params.zeros_like();
    grads.accumulate_into(&mut analytic);
    grad_check(
        params,
        &analytic,
        |store| {
            let mut g = Graph::new();
            let root = build(&mut g, store)?;
            Ok(g.value(root).data()[0])
        },
        cfg,
    )
}

/// Full masked-reconstruction loss of one micro-batch against finite differences.
/// The mask plan is drawn once from `mask_seed` and held fixed.
pub fn mae_grad_check(
    net: &FomoNet,
    params: &ParamStore<f64>,
    mb: &MicroBatch,
    opts: &MaeOptions,
    mask_seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let batch = TokenBatch::<f64>::from_microbatch(mb, net.config.patch_size)?;
    let plan = mask_tokens(batch.len(), opts.mask_ratio, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    grad_check_graph(
        params,
        |g, store| Ok(mae_forward_tokens(g, net, store, batch.clone(), plan.clone(), opts)?.loss),
        cfg,
    )
}
