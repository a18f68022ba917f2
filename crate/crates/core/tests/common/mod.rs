#![allow(dead_code)]

use gradsynth::data::{generate, CorpusSpec, Dataset};
use gradsynth::harness::{pretrain, PretrainConfig};
use gradsynth::{ModelDims, TinyLM};

pub fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        vocab_size: 32,
        n_forget_facts: 6,
        n_retain_facts: 6,
        sequences_per_fact: 6,
        probes_per_fact: 3,
        shared_grammar_fraction: 0.5,
        context: 2,
    }
}

pub fn dataset(seed: u64) -> Dataset {
    generate(&small_spec(seed)).unwrap().dataset
}

pub fn pretrained(seed: u64, data: &Dataset) -> TinyLM {
    let model = TinyLM::init(seed, ModelDims::default()).unwrap();
    let cfg = PretrainConfig {
        steps: 1500,
        eta: 0.5,
        batch_size: None,
        seed,
    };
    pretrain(&model, data, &cfg).unwrap().0
}

pub fn max_param_diff(a: &TinyLM, b: &TinyLM) -> f64 {
    a.flat_parameters()
        .iter()
        .zip(b.flat_parameters())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
