use fomo_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use fomo_core::config::{CorpusConfig, RunConfig};
use fomo_core::mae::{loss_and_grads, LossReduction, ModelConfig};
use fomo_core::raster::Dataset;
use fomo_core::sampler::{MicroBatch, Sampler};
use fomo_core::tensor::Precision;
use fomo_core::train::{accumulate, mask_rng, MetricsRecord, Trainer};

fn tiny_run(v: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        dim: 16,
        depth: 2,
        heads: 2,
        decoder_depth: 1,
        decoder_width: 16,
        decoder_heads: 2,
        ..ModelConfig::default()
    };
    cfg.corpus = CorpusConfig::Synthetic {
        families: 4,
        samples_per_dataset: 6,
        tile_size: 12,
        seed: 3,
    };
    cfg.sampler.train_size = 8;
    cfg.sampler.micro_batch_size = 2;
    cfg.accumulation.micro_batches = v;
    cfg.steps_per_epoch = 40;
    cfg.precision = Precision::F64;
    cfg.optimizer.base_lr = 1e-3;
    cfg.seed = 9;
    cfg.workers = 2;
    cfg
}

fn corpus(cfg: &RunConfig) -> Vec<Dataset> {
    cfg.datasets(&cfg.registry().unwrap()).unwrap()
}

fn window(cfg: &RunConfig, ds: &[Dataset], n: usize) -> Vec<MicroBatch> {
    let mut s = Sampler::new(cfg.sampler_config(), ds).unwrap();
    (0..n).map(|_| s.sample_microbatch(ds).unwrap()).collect()
}

fn strip_time(mut r: MetricsRecord) -> MetricsRecord {
    r.wall_ms = 0.0;
    r
}

#[test]
fn accumulated_update_equals_step_on_summed_gradients() {
    for reduction in [LossReduction::Sum, LossReduction::Mean] {
        let mut cfg = tiny_run(4);
        cfg.mae.reduction = reduction;
        let ds = corpus(&cfg);
        let win = window(&cfg, &ds, 4);

        let mut a = Trainer::<f64>::new(cfg.clone()).unwrap();
        a.apply_window(&win, &mut |_| Ok(())).unwrap();

        let mut b = Trainer::<f64>::new(cfg.clone()).unwrap();
        let mut sums = b.params.zeros_like();
        for (i, mb) in win.iter().enumerate() {
            let r = loss_and_grads(&b.net, &b.params, mb, &cfg.mae, &mut mask_rng(cfg.seed, i as u64)).unwrap();
            accumulate(&mut sums, &r.grads).unwrap();
        }
        let lr = cfg.schedule.resolve(cfg.total_steps(), cfg.optimizer.base_lr).unwrap().lr_at(0).unwrap();
        b.step_with(&mut sums, lr).unwrap();
        assert_eq!(a.params.hash(), b.params.hash(), "{reduction:?}");
    }
}

#[test]
fn worker_count_does_not_change_the_update() {
    let ds = corpus(&tiny_run(4));
    let hashes: Vec<String> = [1, 3]
        .into_iter()
        .map(|w| {
            let mut cfg = tiny_run(4);
            cfg.workers = w;
            let mut t = Trainer::<f64>::new(cfg).unwrap();
            t.run(&ds, 3, &mut |_| Ok(())).unwrap();
            t.params.hash()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn identical_runs_log_identical_metrics() {
    let cfg = tiny_run(2);
    let ds = corpus(&cfg);
    let logs: Vec<Vec<MetricsRecord>> = (0..2)
        .map(|_| {
            let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
            let mut log = Vec::new();
            t.run(&ds, 5, &mut |r| {
                log.push(strip_time(r.clone()));
                Ok(())
            })
            .unwrap();
            log
        })
        .collect();
    assert_eq!(logs[0].len(), 10);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = tiny_run(2);
    let ds = corpus(&cfg);
    let (s, extra) = (4, 10);

    let mut full = Trainer::<f64>::new(cfg.clone()).unwrap();
    let mut full_log = Vec::new();
    full.run(&ds, s + extra, &mut |r| {
        full_log.push(strip_time(r.clone()));
        Ok(())
    })
    .unwrap();

    let mut first = Trainer::<f64>::new(cfg.clone()).unwrap();
    first.run(&ds, s, &mut |_| Ok(())).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let mut resumed = Trainer::<f64>::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, s);
    let mut tail = Vec::new();
    resumed
        .run(&ds, extra, &mut |r| {
            tail.push(strip_time(r.clone()));
            Ok(())
        })
        .unwrap();

    assert_eq!(resumed.params.hash(), full.params.hash());
    assert_eq!(tail, full_log[(s as usize) * 2..]);
    assert_eq!(
        encode_checkpoint(&resumed.checkpoint()).unwrap(),
        encode_checkpoint(&full.checkpoint()).unwrap()
    );
}

#[test]
fn schedule_bounds_the_run() {
    let mut cfg = tiny_run(1);
    cfg.steps_per_epoch = 3;
    let ds = corpus(&cfg);
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    let summary = t.run(&ds, 100, &mut |_| Ok(())).unwrap();
    assert_eq!(summary.final_step, 3);
    assert_eq!(t.remaining_steps(), 0);
}
