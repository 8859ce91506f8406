//! Manifests, images, dataset directories, checkpoints and config files.

use std::fs;

use bitemporal::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use bitemporal::config::RunConfig;
use bitemporal::dataset_dir::{load_ledger, load_split, write_corpus};
use bitemporal::error::IoError;
use bitemporal::images::{load_png, save_png};
use bitemporal::manifest::{load_manifest, write_manifest};
use bitemporal::metrics_log::MetricsLog;
use bitemporal_core::dataset::{generate_corpus, DatasetManifest, GeneratorConfig, Image, ManifestItem, Split};
use bitemporal_core::model::{Model, ModelConfig};
use bitemporal_core::trainer::EpochRecord;
use bitemporal_core::vocab::Vocabulary;
use bitemporal_core::Error;
use proptest::prelude::*;

fn item(id: u64, captions: usize) -> ManifestItem {
    ManifestItem {
        pair_id: id,
        before: format!("images/{id}_a.png"),
        after: format!("images/{id}_b.png"),
        captions: (0..captions).map(|i| format!("caption {i} of {id}")).collect(),
    }
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.jsonl");
    let m = DatasetManifest {
        split: Split::Val,
        items: (0..7).map(|i| item(i * 3, 5)).collect(),
    };
    write_manifest(&m, &path).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), m);
}

#[test]
fn wrong_caption_count_names_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let m = DatasetManifest {
        split: Split::Train,
        items: vec![item(1, 5), item(42, 4)],
    };
    write_manifest(&m, &path).unwrap();
    match load_manifest(&path) {
        Err(IoError::Core(Error::Validation(msg))) => assert!(msg.contains("pair 42"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn empty_manifest_file_has_no_items() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    fs::write(&path, "").unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.split, Split::Test);
    assert!(m.items.is_empty());
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    let good = serde_json::to_string(&item(0, 5)).unwrap();
    fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
    assert!(matches!(load_manifest(&path), Err(IoError::Parse { line: 2, .. })));
}

#[test]
fn repeated_pair_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let m = DatasetManifest {
        split: Split::Train,
        items: vec![item(5, 5), item(5, 5)],
    };
    write_manifest(&m, &path).unwrap();
    assert!(matches!(load_manifest(&path), Err(IoError::Core(Error::Validation(_)))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn png_round_trip_is_lossless_after_quantization(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut s = seed;
        let data = (0..h * w * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 40) as f64 / (1u64 << 24) as f64
            })
            .collect();
        let img = Image { height: h, width: w, data };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        prop_assert_eq!(&back, &img.quantized());
        prop_assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn dataset_directory_round_trips() {
    let cfg = GeneratorConfig {
        image_size: 32,
        num_items: 30,
        seed: 3,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, &cfg, dir.path()).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let expected = corpus.split(split);
        let loaded = load_split(dir.path(), split).unwrap();
        assert_eq!(loaded.len(), expected.len());
        for (a, b) in loaded.items.iter().zip(&expected.items) {
            assert_eq!(a.pair_id, b.pair_id);
            assert_eq!(a.captions, b.captions);
            assert_eq!(a.pair.before, b.pair.before.quantized());
            assert_eq!(a.pair.after, b.pair.after.quantized());
        }
    }
    let ledger = load_ledger(dir.path()).unwrap();
    assert_eq!(ledger.pairs, corpus.duplicate_ledger().into_iter().collect::<Vec<_>>());
}

fn tiny_model(v: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone_channels: vec![4, 6, 8],
        d_model: 8,
        heads: 2,
        hsa_layers: 1,
        ffn_dim: 12,
        uni_layers: 1,
        multi_layers: 1,
        max_len: 12,
        vocab_size: v,
        tie_embeddings: true,
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let vocab = Vocabulary::build(&["a building appears at the top", "a road is built"], 1).unwrap();
    let model = Model::new(tiny_model(vocab.len()), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.btck");
    save_checkpoint(&path, &model, &vocab, serde_json::json!({ "epoch": 3 })).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.vocab, vocab);
    assert_eq!(ck.model.config, model.config);
    assert_eq!(ck.header.meta["epoch"], 3);
    for ((_, a), (_, b)) in ck.model.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        let bits = |m: &bitemporal_core::tensor::Mat| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn checkpoint_version_and_magic_are_checked() {
    let vocab = Vocabulary::build(&["a road"], 1).unwrap();
    let model = Model::new(tiny_model(vocab.len()), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.btck");
    save_checkpoint(&path, &model, &vocab, serde_json::Value::Null).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path) {
        Err(IoError::Version { found, expected }) => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(IoError::Format { .. })));
    fs::write(&path, &bytes[..10]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_echo_round_trips_and_rejects_unknown_keys() {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 7;
    cfg.train.loss.theta = 0.8;
    cfg.model.d_model = 16;
    let dir = tempfile::tempdir().unwrap();
    cfg.echo(dir.path()).unwrap();
    let loaded = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(loaded.config, cfg);
    assert!(loaded.theta_set);

    let partial = RunConfig::from_toml("[train]\nepochs = 3\n", dir.path()).unwrap();
    assert_eq!(partial.config.train.epochs, 3);
    assert!(!partial.theta_set);
    assert!(RunConfig::from_toml("[train]\nepoch = 3\n", dir.path()).is_err());
}

#[test]
fn metrics_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let log = MetricsLog::create(&path).unwrap();
    let records: Vec<EpochRecord> = (0..3)
        .map(|e| EpochRecord {
            epoch: e,
            steps: 4 * (e + 1),
            train_loss: 1.0 / (e + 1) as f64,
            train_caption_loss: 0.5,
            train_contrastive_loss: 0.25,
            val_loss: 0.1 * e as f64,
            val_recall: 12.5,
            lr: 1e-3,
        })
        .collect();
    for r in &records {
        log.append(r).unwrap();
    }
    assert_eq!(MetricsLog::read(&path).unwrap(), records);
}
