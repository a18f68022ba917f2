mod common;

use common::{dataset, pretrained};
use gradsynth::harness::evaluate;
use gradsynth::objectives::loss_gd;
use gradsynth::{ModelDims, TinyLM};

#[test]
fn pretraining_reaches_the_target_baseline() {
    for seed in 0..3 {
        let data = dataset(seed);
        let model = pretrained(seed, &data);
        let f = evaluate(&model, &data.forget_probes).unwrap().accuracy;
        let r = evaluate(&model, &data.retain_probes).unwrap().accuracy;
        assert!(f >= 0.9 && r >= 0.9, "seed {seed}: forget {f}, retain {r}");
    }
}

#[test]
fn retain_descent_is_monotone_for_small_steps() {
    let data = dataset(9);
    let batch: Vec<_> = data.retain.sequences[..8].to_vec();
    let mut model = TinyLM::init(9, ModelDims::default()).unwrap();
    let mut previous = f64::INFINITY;
    let mut increases = 0;
    for _ in 0..50 {
        let report = loss_gd(&model, &batch).unwrap();
        if report.loss > previous {
            increases += 1;
        }
        previous = report.loss;
        model.apply_update(&report.grads, 1e-2).unwrap();
    }
    assert!(increases <= 2, "{increases} non-monotone steps");
}

#[test]
fn untrained_model_is_near_chance_on_probes() {
    let data = dataset(10);
    let model = TinyLM::init(10, ModelDims::default()).unwrap();
    let f = evaluate(&model, &data.forget_probes).unwrap().accuracy;
    assert!(f <= 0.5, "{f}");
}
