use fomo_core::bands::BandRegistry;
use fomo_core::raster::{synth_pretraining_corpus, Dataset};
use fomo_core::sampler::{chi_square_gof, empirical_check, Sampler, SamplerConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn corpus() -> &'static [Dataset] {
    static C: OnceLock<Vec<Dataset>> = OnceLock::new();
    C.get_or_init(|| synth_pretraining_corpus(&BandRegistry::canonical(), 4, 16, 4, 1).unwrap())
}

fn config(k_max: usize, size: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        k_max,
        train_size: size,
        micro_batch_size: 3,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn microbatches_respect_their_source(seed in any::<u64>(), k_max in 1usize..=4, size in prop::sample::select(vec![4usize, 8, 12, 16])) {
        let ds = corpus();
        let mut s = Sampler::new(config(k_max, size, seed), ds).unwrap();
        for _ in 0..4 {
            let mb = s.sample_microbatch(ds).unwrap();
            let src = ds.iter().find(|d| d.name == mb.dataset).unwrap();
            prop_assert!(mb.k() >= 1 && mb.k() <= k_max.min(src.bands.len()));
            for b in &mb.bands {
                prop_assert!(src.bands.contains(b), "band {b} not in {}", src.name);
            }
            for sample in &mb.samples {
                prop_assert_eq!(sample.rasters.len(), mb.k());
                for r in &sample.rasters {
                    prop_assert_eq!(r.len(), size * size);
                    prop_assert!(r.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sequence(seed in any::<u64>()) {
        let ds = corpus();
        let mut a = Sampler::new(config(4, 8, seed), ds).unwrap();
        let mut b = Sampler::new(config(4, 8, seed), ds).unwrap();
        for _ in 0..3 {
            prop_assert_eq!(a.sample_microbatch(ds).unwrap(), b.sample_microbatch(ds).unwrap());
        }
    }
}

#[test]
fn band_count_is_uniform_up_to_k_max() {
    // S2 alone: 13 bands, k_max 4 → k ∈ {1..4}, each 1/4 ± 3σ over 10k draws.
    let ds: Vec<Dataset> = corpus()
        .iter()
        .filter(|d| d.bands.len() >= 13)
        .take(1)
        .cloned()
        .map(|mut d| {
            d.weight = 1.0;
            d
        })
        .collect();
    let n = 10_000usize;
    let report = empirical_check(n, &config(4, 8, 5), &ds).unwrap();
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    assert_eq!(report.k_freq.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for (k, (freq, p)) in &report.k_freq {
        assert_eq!(*p, 0.25);
        assert!((freq * n as f64 - 2500.0).abs() <= 3.0 * sd, "k={k}: {freq}");
    }
    assert_eq!(report.chi_square_p, 1.0, "single dataset fits trivially");
}

#[test]
fn skewed_counts_are_detected() {
    let p = [0.2, 0.2, 0.2, 0.1, 0.2, 0.1];
    let (_, pv) = chi_square_gof(&[10_000, 0, 0, 0, 0, 0], &p);
    assert!(pv < 1e-6);
    let (_, pv) = chi_square_gof(&[2000, 2000, 2000, 1000, 2000, 1000], &p);
    assert!((pv - 1.0).abs() < 1e-12);
}

#[test]
fn chi_square_matches_closed_form_for_two_categories() {
    // df = 1: p = erfc(sqrt(stat / 2)).
    let (stat, p) = chi_square_gof(&[60, 40], &[0.5, 0.5]);
    assert!((stat - 4.0).abs() < 1e-12);
    assert!((p - 0.045_500_263_896_358_4).abs() < 1e-9, "{p}");
}

#[test]
fn too_few_draws_is_a_validation_error() {
    assert!(empirical_check(999, &config(4, 8, 0), corpus()).unwrap_err().is_validation());
}
