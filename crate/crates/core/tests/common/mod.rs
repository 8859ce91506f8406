#![allow(dead_code)]

use bitemporal_core::dataset::{generate_corpus, Dataset, GeneratorConfig, Split};
use bitemporal_core::evalkit::{evaluate_captioning, evaluate_retrieval};
use bitemporal_core::model::{Model, ModelConfig};
use bitemporal_core::objective::{BagOfWords, FnMode, LossConfig};
use bitemporal_core::trainer::{train, TrainConfig, TrainOutcome};
use bitemporal_core::vocab::Vocabulary;

pub const IMAGE: usize = 32;

/// Desk-scale model: 32x32 images, three backbone stages (4x4 grid), D=32.
pub fn small_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        image_size: IMAGE,
        backbone_channels: vec![8, 16, 32],
        d_model: 32,
        heads: 2,
        hsa_layers: 1,
        ffn_dim: 64,
        uni_layers: 1,
        multi_layers: 1,
        max_len: 16,
        vocab_size,
        tie_embeddings: true,
    }
}

/// Even smaller model for gradient and property checks.
pub fn tiny_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        image_size: IMAGE,
        backbone_channels: vec![4, 6, 8],
        d_model: 8,
        heads: 2,
        hsa_layers: 1,
        ffn_dim: 12,
        uni_layers: 1,
        multi_layers: 1,
        max_len: 12,
        vocab_size,
        tie_embeddings: true,
    }
}

pub fn generator(num_items: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        image_size: IMAGE,
        num_items,
        seed,
        ..Default::default()
    }
}

/// Training corpus and held-out corpus used by the ordering experiments.
pub struct Benchmark {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
}

pub const BENCH_ITEMS: usize = 512;
pub const BENCH_SEED: u64 = 100;
pub const HELD_OUT_ITEMS: usize = 400;
pub const HELD_OUT_SEED: u64 = 999;

pub fn benchmark() -> Benchmark {
    let corpus = generate_corpus(&generator(BENCH_ITEMS, BENCH_SEED)).unwrap();
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let test = generate_corpus(&generator(HELD_OUT_ITEMS, HELD_OUT_SEED))
        .unwrap()
        .all();
    let vocab = Vocabulary::build(&train.all_captions(), 5).unwrap();
    Benchmark {
        train,
        val,
        test,
        vocab,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunSpec {
    pub mode: FnMode,
    pub seed: u64,
    pub hard_negatives: Option<usize>,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub recall5: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub outcome: TrainOutcome,
}

pub const BENCH_EPOCHS: usize = 50;
pub const BENCH_LR: f64 = 1e-3;

pub fn run(bench: &Benchmark, spec: RunSpec) -> RunResult {
    let mut model = Model::new(small_model(bench.vocab.len()), spec.seed).unwrap();
    let cfg = TrainConfig {
        epochs: BENCH_EPOCHS,
        batch_size: 32,
        target_lr: BENCH_LR,
        seed: spec.seed,
        hard_negatives: spec.hard_negatives,
        loss: LossConfig {
            mode: spec.mode,
            theta: 1.0,
            lambda: spec.lambda,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut bow = BagOfWords::new();
    let outcome = train(
        &mut model,
        &bench.vocab,
        &cfg,
        &bench.train,
        &bench.val,
        &mut bow,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let r = evaluate_retrieval(&model, &bench.vocab, &bench.test, &mut bow, 1.0, &[5]).unwrap();
    let c = evaluate_captioning(&model, &bench.vocab, &bench.test).unwrap();
    RunResult {
        recall5: r[0].recall,
        bleu4: c.bleu[3],
        cider: c.cider,
        outcome,
    }
}
