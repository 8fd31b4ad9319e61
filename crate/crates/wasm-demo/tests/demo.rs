use fomo_wasm_demo::{lr_curve, sampler_distribution, Demo};
use serde_json::Value;

#[test]
fn lr_curve_warms_up_then_decays() {
    let v: Value = serde_json::from_str(&lr_curve(100, 1e-3, 0.1, 0.0).ok().unwrap()).unwrap();
    let lr: Vec<f64> = v["lr"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(lr.len(), 101);
    assert_eq!(v["warmup_steps"], 10);
    assert_eq!(lr[0], 0.0);
    assert!((lr[10] - 1e-3).abs() < 1e-12);
    assert!(lr[100].abs() < 1e-12);
}

#[test]
fn sampler_distribution_reports_all_datasets() {
    let v: Value = serde_json::from_str(&sampler_distribution(2000, 4, 3).ok().unwrap()).unwrap();
    assert_eq!(v["dataset_freq"].as_array().unwrap().len(), 6);
    assert_eq!(v["draws"], 2000);
}

#[test]
fn training_lowers_loss_and_reconstructs() {
    let mut demo = Demo::new(0).ok().unwrap();
    let first = demo.train(10).ok().unwrap();
    for _ in 0..5 {
        demo.train(10).ok().unwrap();
    }
    let last = demo.train(10).ok().unwrap();
    assert!(last < first, "{first} -> {last}");
    let r: Value = serde_json::from_str(&demo.reconstruct_json(0, 0.75, 1).unwrap()).unwrap();
    let band = &r["bands"][0];
    assert_eq!(band["target"].as_array().unwrap().len(), 256);
    assert_eq!(band["masked"].as_array().unwrap().len(), 16);
}
