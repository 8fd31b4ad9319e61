use fomo_core::bands::{BandId, BandRegistry};
use fomo_core::mae::{FomoNet, ModelConfig};
use fomo_core::params::ParamStore;
use fomo_core::probe::{
    classification_metrics, extract_features, fit_probe, multilabel_metrics, segmentation_metrics, ProbeConfig, Targets,
};
use fomo_core::raster::{synth_dataset, SynthSpec};
use fomo_core::train::init_rng;
use proptest::prelude::*;

fn labels(classes: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(move |n| (prop::collection::vec(0..classes, n), prop::collection::vec(0..classes, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn permuting_class_ids_permutes_per_class_entries((pred, target) in labels(4), shift in 1usize..4) {
        let perm = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
        let a = segmentation_metrics(&pred, &target, 4).unwrap();
        let b = segmentation_metrics(&perm(&pred), &perm(&target), 4).unwrap();
        prop_assert_eq!(a.f1_micro, b.f1_micro);
        prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
        prop_assert!((a.miou.unwrap() - b.miou.unwrap()).abs() < 1e-12);
        for c in 0..4 {
            let (x, y) = (&a.per_class[c], &b.per_class[(c + shift) % 4]);
            prop_assert_eq!(x.f1, y.f1);
            prop_assert_eq!(x.iou, y.iou);
            prop_assert_eq!(x.support, y.support);
        }
    }

    #[test]
    fn iou_follows_from_f1((pred, target) in labels(5)) {
        let r = segmentation_metrics(&pred, &target, 5).unwrap();
        for c in &r.per_class {
            prop_assert!(c.iou <= c.f1 + 1e-12);
            prop_assert!((c.iou - c.f1 / (2.0 - c.f1)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_label_micro_f1_is_accuracy((pred, target) in labels(3)) {
        let r = classification_metrics(&pred, &target, 3).unwrap();
        prop_assert!((r.f1_micro - r.accuracy.unwrap()).abs() < 1e-12);
        prop_assert_eq!(r.macro_classes + r.excluded_classes, 3);
    }
}

#[test]
fn all_negative_multilabel_predictions_score_zero() {
    let target = vec![vec![true, false, true], vec![false, true, false]];
    let pred = vec![vec![false; 3]; 2];
    let r = multilabel_metrics(&pred, &target).unwrap();
    assert_eq!(r.f1_micro, 0.0);
    assert_eq!(r.f1_macro, 0.0);
}

#[test]
fn absent_classes_are_excluded_from_macro_f1() {
    let r = classification_metrics(&[0, 1, 1, 0], &[0, 1, 0, 0], 4).unwrap();
    assert_eq!(r.macro_classes, 2);
    assert_eq!(r.excluded_classes, 2);
    let f1_0 = 2.0 * 2.0 / (2.0 * 2.0 + 0.0 + 1.0);
    let f1_1 = 2.0 * 1.0 / (2.0 * 1.0 + 1.0 + 0.0);
    assert!((r.f1_macro - (f1_0 + f1_1) / 2.0).abs() < 1e-12);
}

#[test]
fn probe_leaves_backbone_untouched_and_separates_easy_features() {
    let reg = BandRegistry::canonical();
    let cfg = ModelConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        decoder_depth: 1,
        decoder_width: 16,
        decoder_heads: 2,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = FomoNet::init(&cfg, &mut store, &mut init_rng(1)).unwrap();
    let bands = vec![BandId(2), BandId(3)];
    let ds = synth_dataset(&SynthSpec::new("p", bands.clone(), 12, 8, 3, 4), &reg).unwrap();
    let before = store.hash();
    let fb = extract_features(&net, &store, &ds, &bands, 8).unwrap();
    assert_eq!(store.hash(), before);
    assert_eq!(fb.features.len(), 12);
    assert!(fb.features.iter().all(|f| f.len() == 16));

    // Linearly separable toy features: the probe must fit them exactly.
    let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64 * 2.0 - 2.0, (i as f64 * 0.37).sin()]).collect();
    let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let probe = fit_probe(&x, &Targets::Single { labels: y.clone(), classes: 3 }, &ProbeConfig::default()).unwrap();
    assert_eq!(probe.predict(&x).unwrap(), y);
}
