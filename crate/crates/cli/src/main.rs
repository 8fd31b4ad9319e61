use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use fomo_core::ablation::{run_ablation, AblationPlan};
use fomo_core::bands::{BandId, BandRegistry};
use fomo_core::checkpoint::{load_checkpoint, peek_header, save_checkpoint};
use fomo_core::config::{CorpusConfig, DatasetRef, RunConfig};
use fomo_core::gradcheck::{mae_grad_check, GradCheckConfig, Stencil};
use fomo_core::mae::{reconstruct_sample, FomoNet};
use fomo_core::params::ParamStore;
use fomo_core::probe::{probe_classification, probe_segmentation, ProbeConfig, SegHeadConfig, Task};
use fomo_core::raster::{self, RasterTile, SynthSpec};
use fomo_core::sampler::{center_microbatch, empirical_check, Sampler};
use fomo_core::tensor::{Precision, Real};
use fomo_core::train::{init_rng, MetricsRecord, Trainer};
use fomo_core::Error;

#[derive(Parser, Debug)]
#[command(name = "fomo", version, about = "Multi-sensor masked autoencoder toolkit")]
struct Cli {
    /// Run configuration (JSON). Defaults to the desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating point width: 32 or 64.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Worker threads (0 = available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-autoencoder pretraining; writes metrics.jsonl and checkpoint.fmck.
    Pretrain {
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps (default: to the end of the schedule).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Frozen-backbone probe on a labeled or masked dataset.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "cls")]
        task: Task,
        /// Comma-separated band ids; all dataset bands when omitted.
        #[arg(long, value_parser = parse_bands)]
        bands: Option<BandList>,
        /// Crop size; the checkpoint's training size when omitted.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Probe one checkpoint on every band subset of a plan.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Masks one sample and writes target|reconstruction tiles side by side.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_parser = parse_bands)]
        bands: Option<BandList>,
    },
    /// Goodness-of-fit of the sampler against the configured distribution.
    SampleStats {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        /// Independent seeded trials (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        trials: u64,
    },
    /// Full-model gradient against central finite differences in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates checked per parameter tensor (0 = all).
        #[arg(long, default_value_t = 64)]
        max_per_param: usize,
        /// Use the O(ε⁴) four-point central stencil instead of the two-point one.
        #[arg(long)]
        four_point: bool,
    },
    /// Writes a synthetic corpus, probe sets and a matching config.
    Synth {
        #[arg(long, default_value_t = 4)]
        families: usize,
        /// Samples per dataset.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        tile_size: usize,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "32" => Ok(Precision::F32),
        "64" => Ok(Precision::F64),
        other => Err(format!("expected 32 or 64, got `{other}`")),
    }
}

/// Comma-separated band ids, e.g. `2,3,4`.
#[derive(Debug, Clone)]
struct BandList(Vec<BandId>);

fn parse_bands(s: &str) -> Result<BandList, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u16>().map(BandId).map_err(|e| format!("band `{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(BandList)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOMO_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if !err.is_validation() => ExitCode::from(2),
                Some(_) => ExitCode::from(1),
                None => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Pretrain { resume, steps } => {
            let precision = match resume {
                Some(p) => cli.precision.unwrap_or(peek_header(p)?.precision),
                None => cli.precision.unwrap_or(load_config(&cli)?.precision),
            };
            match precision {
                Precision::F32 => pretrain::<f32>(&cli, resume.as_deref(), *steps),
                Precision::F64 => pretrain::<f64>(&cli, resume.as_deref(), *steps),
            }?;
        }
        Command::Probe {
            ckpt,
            dataset,
            task,
            bands,
            size,
        } => {
            let (cfg, net, store) = load_model::<f64>(ckpt)?;
            let registry = cfg.registry()?;
            let ds = raster::load_dataset(dataset, &registry)?;
            let bands = bands.as_ref().map_or_else(|| ds.bands.clone(), |b| b.0.clone());
            let size = size.unwrap_or(cfg.sampler.train_size);
            let outcome = match task {
                Task::Cls => probe_classification(&net, &store, &ds, &bands, size, &ProbeConfig::default())?,
                Task::Seg => probe_segmentation(&net, &store, &ds, &bands, size, &SegHeadConfig::default())?,
            };
            info!(
                "test f1_micro {:.3}, majority baseline {:.3}",
                outcome.test.f1_micro, outcome.majority_baseline
            );
            emit(&serde_json::to_value(&outcome)?, cli.out.as_deref(), "probe.json")?;
        }
        Command::Ablate { ckpt, plan } => {
            let plan = AblationPlan::load(plan)?;
            let (cfg, net, store) = load_model::<f64>(ckpt)?;
            let registry = cfg.registry()?;
            let ds = raster::load_dataset(&plan.dataset, &registry)?;
            let size = plan.size.unwrap_or(cfg.sampler.train_size);
            let rows = run_ablation(&net, &store, &registry, &ds, &plan.subsets, plan.task, &plan.probe, &plan.seg, size)?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| {
                    json!({
                        "subset": r.subset,
                        "f1_micro": r.outcome.test.f1_micro,
                        "f1_macro": r.outcome.test.f1_macro,
                        "accuracy": r.outcome.test.accuracy,
                        "miou": r.outcome.test.miou,
                        "majority_baseline": r.outcome.majority_baseline,
                        "backbone_hash": r.outcome.backbone_hash,
                        "report": r.outcome.test,
                    })
                })
                .collect();
            emit(&json!(table), cli.out.as_deref(), "ablation.json")?;
        }
        Command::Reconstruct {
            ckpt,
            dataset,
            index,
            bands,
        } => reconstruct(&cli, ckpt, dataset, *index, bands.as_ref().map(|b| b.0.as_slice()))?,
        Command::SampleStats { draws, trials } => {
            let cfg = load_config(&cli)?;
            let registry = cfg.registry()?;
            let datasets = cfg.datasets(&registry)?;
            let mut out = std::io::stdout().lock();
            for t in 0..*trials {
                let mut sc = cfg.sampler_config();
                sc.seed = sc.seed.wrapping_add(t);
                let report = empirical_check(*draws, &sc, &datasets)?;
                for (name, freq, prob) in &report.dataset_freq {
                    writeln!(out, "{}", json!({"trial": t, "kind": "dataset", "dataset": name, "freq": freq, "expected": prob}))?;
                }
                for (k, (freq, prob)) in &report.k_freq {
                    writeln!(out, "{}", json!({"trial": t, "kind": "k", "k": k, "freq": freq, "expected": prob}))?;
                }
                writeln!(
                    out,
                    "{}",
                    json!({"trial": t, "kind": "summary", "seed": sc.seed, "draws": report.draws,
                           "chi_square_p": report.chi_square_p, "k_chi_square_p": report.k_chi_square_p})
                )?;
            }
        }
        Command::Gradcheck {
            eps,
            tol,
            max_per_param,
            four_point,
        } => {
            let cfg = load_config(&cli)?;
            let registry = cfg.registry()?;
            let datasets = cfg.datasets(&registry)?;
            let mut store = ParamStore::<f64>::new();
            let net = FomoNet::init(&cfg.model, &mut store, &mut init_rng(cfg.seed))?;
            let mb = Sampler::new(cfg.sampler_config(), &datasets)?.sample_microbatch(&datasets)?;
            let gc = GradCheckConfig {
                eps: *eps,
                tol: *tol,
                max_per_param: (*max_per_param > 0).then_some(*max_per_param),
                stencil: if *four_point { Stencil::FourPoint } else { Stencil::TwoPoint },
            };
            let report = mae_grad_check(&net, &store, &mb, &cfg.mae, cfg.seed, gc)?;
            println!("max_rel_err {:e}", report.max_rel_err);
            println!("{}", json!({"max_rel_err": report.max_rel_err, "checked": report.checked,
                "worst_param": report.worst_param, "worst_index": report.worst_index,
                "passed": report.passed, "dataset": mb.dataset, "bands": mb.bands}));
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Synth {
            families,
            samples,
            tile_size,
        } => synth(&cli, *families, *samples, *tile_size)?,
    }
    Ok(ExitCode::SUCCESS)
}

/// Config file (or defaults) with command-line overrides applied.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model<T: Real>(path: &Path) -> Result<(RunConfig, FomoNet, ParamStore<T>)> {
    let ck = load_checkpoint::<T>(path)?;
    let net = FomoNet::bind(&ck.header.config.model, &ck.params)?;
    Ok((ck.header.config, net, ck.params))
}

/// Pretty JSON to stdout, and to `out/name` when an output directory is set.
fn emit(value: &serde_json::Value, out: Option<&Path>, name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(name), &text)?;
    }
    Ok(())
}

fn pretrain<T: Real>(cli: &Cli, resume: Option<&Path>, steps: Option<u64>) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            if cli.config.is_some() || cli.seed.is_some() {
                warn!("--config and --seed are ignored when resuming; the checkpoint's config is used");
            }
            let mut t = Trainer::<T>::from_checkpoint(load_checkpoint::<T>(path)?)?;
            if let Some(w) = cli.workers {
                t.config.workers = w;
            }
            t.config.precision = T::PRECISION;
            t
        }
        None => Trainer::<T>::new(load_config(cli)?)?,
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    trainer.dump_dir = Some(out.clone());
    let registry = trainer.config.registry()?;
    let datasets = trainer.config.datasets(&registry)?;

    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    writeln!(log, "{}", json!({"config": trainer.config, "start_step": trainer.step}))?;
    let total = steps.unwrap_or(u64::MAX).min(trainer.remaining_steps());
    let every = match trainer.config.checkpoint_every {
        0 => total.max(1),
        n => n,
    };
    info!(
        "pretraining {} params for {total} steps from step {} ({} bits)",
        trainer.params.num_elements(),
        trainer.step,
        T::PRECISION.byte_width() * 8
    );
    let mut done = 0;
    let mut last = None;
    while done < total {
        let chunk = every.min(total - done);
        let summary = trainer.run(&datasets, chunk, &mut |r: &MetricsRecord| {
            writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| Error::Training(format!("metrics log: {e}")))
        })?;
        done += chunk;
        last = summary.step_losses.last().copied();
        log.flush()?;
        save_checkpoint(&trainer.checkpoint(), &out.join("checkpoint.fmck"))?;
        info!("step {} loss {:.4}", trainer.step, last.unwrap_or(f64::NAN));
    }
    if total == 0 {
        save_checkpoint(&trainer.checkpoint(), &out.join("checkpoint.fmck"))?;
    }
    println!(
        "{}",
        json!({"step": trainer.step, "final_loss": last, "param_hash": trainer.params.hash(),
               "checkpoint": out.join("checkpoint.fmck")})
    );
    Ok(())
}

fn reconstruct(cli: &Cli, ckpt: &Path, dataset: &Path, index: usize, bands: Option<&[BandId]>) -> Result<()> {
    let (cfg, net, store) = load_model::<f64>(ckpt)?;
    let registry = cfg.registry()?;
    let ds = raster::load_dataset(dataset, &registry)?;
    let bands = bands.map(<[BandId]>::to_vec).unwrap_or_else(|| ds.bands.clone());
    let size = cfg.sampler.train_size;
    let mb = center_microbatch(&ds, &[index], &bands, size)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let (recs, loss) = reconstruct_sample(&net, &store, &mb, &cfg.mae, seed)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("reconstruction"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    for r in &recs {
        let stats = ds.stats_for(r.band)?;
        let mut values = Vec::with_capacity(2 * size * size);
        for row in 0..size {
            let side = |img: &[f64]| img[row * size..(row + 1) * size].iter().map(|&z| stats.denormalize(z) as f32).collect::<Vec<_>>();
            values.extend(side(&r.target));
            values.extend(side(&r.reconstruction));
        }
        let tile = RasterTile::new(r.band, size as u32, 2 * size as u32, registry.get(r.band)?.gsd_m as f32, values)?;
        let path = out.join(format!("recon_{index:04}_b{:02}.fmtl", r.band.0));
        raster::write_tile(&tile, &path)?;
        files.push(json!({"band": r.band, "file": path, "masked_patches": r.masked.iter().filter(|&&m| m).count(),
            "patches": r.masked.len()}));
    }
    println!("{}", serde_json::to_string_pretty(&json!({"sample": mb.samples[0].sample_id, "loss": loss, "tiles": files}))?);
    Ok(())
}

fn synth(cli: &Cli, families: usize, samples: usize, tile_size: usize) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
    let seed = cli.seed.unwrap_or(7);
    let registry = BandRegistry::canonical();
    let corpus = raster::synth_pretraining_corpus(&registry, samples, tile_size, families, seed)?;
    let mut refs = Vec::new();
    for ds in &corpus {
        let dir = slug(&ds.name);
        raster::write_dataset(ds, &out.join(&dir))?;
        refs.push(DatasetRef {
            manifest: PathBuf::from(dir).join("manifest.json"),
            weight: None,
        });
        info!("wrote {} ({} samples, {} bands)", ds.name, ds.samples.len(), ds.bands.len());
    }

    let s2 = registry.sensor_bands("Sentinel-2");
    let mut probe = SynthSpec::new("probe", s2.clone(), samples, tile_size, families, seed ^ 0x5eed);
    probe.weight = 1.0;
    raster::write_dataset(&raster::synth_dataset(&probe, &registry)?, &out.join("probe"))?;
    let seg = SynthSpec::new("seg", s2[..4].to_vec(), samples, tile_size, 2, seed ^ 0x5e9);
    raster::write_dataset(&raster::synth_segmentation(&seg, &registry)?, &out.join("seg"))?;

    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.corpus = CorpusConfig::Manifests { datasets: refs };
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let plan = json!({
        "dataset": "probe/manifest.json",
        "task": "cls",
        "subsets": [[s2[0]], [s2[0], s2[1]], s2[..4].to_vec(), s2.clone()],
    });
    fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
    println!(
        "{}",
        json!({"config": out.join("config.json"), "probe": out.join("probe/manifest.json"),
               "seg": out.join("seg/manifest.json"), "plan": out.join("plan.json")})
    );
    Ok(())
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .trim_matches('-')
        .to_string()
}
