use fomo_core::config::RunConfig;
use fomo_core::mae::{loss_and_grads, FomoNet};
use fomo_core::params::ParamStore;
use fomo_core::sampler::Sampler;
use fomo_core::train::{adamw_step, init_rng, mask_rng, OptimizerState};

#[test]
fn single_microbatch_overfits() {
    // Desk model, one fixed micro-batch and mask plan, constant lr 1e-3.
    let cfg = RunConfig::default();
    let ds = cfg.datasets(&cfg.registry().unwrap()).unwrap();
    let mut store = ParamStore::<f32>::new();
    let net = FomoNet::init(&cfg.model, &mut store, &mut init_rng(0)).unwrap();
    let mb = Sampler::new(cfg.sampler_config(), &ds).unwrap().sample_microbatch(&ds).unwrap();
    let mut opt = OptimizerState::new(&store);
    let mut losses = Vec::new();
    for _ in 0..=200 {
        let r = loss_and_grads(&net, &store, &mb, &cfg.mae, &mut mask_rng(0, 0)).unwrap();
        losses.push(r.loss);
        let mut g = r.grads;
        adamw_step(&mut store, &mut g, &mut opt, &cfg.optimizer, 1e-3).unwrap();
    }
    let (first, last) = (losses[0], losses[200]);
    assert!(last <= 0.1 * first, "loss {first:.4} -> {last:.4} (k = {})", mb.k());
}
