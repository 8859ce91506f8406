//! Encoder and decoder structural properties.

mod common;

use bitemporal_core::autograd::{Graph, LAYER_NORM_EPS};
use bitemporal_core::dataset::{Image, ImagePair};
use bitemporal_core::decoder::OutputHead;
use bitemporal_core::encoder::fuse;
use bitemporal_core::model::{BackboneFinetune, Model, ModelConfig};
use bitemporal_core::nn::Linear;
use bitemporal_core::params::{Grads, ParamStore};
use bitemporal_core::tensor::Mat;
use bitemporal_core::vocab::{END, PAD, START};
use common::{tiny_model, IMAGE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 20;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    Image {
        height: IMAGE,
        width: IMAGE,
        data: (0..IMAGE * IMAGE * 3).map(|_| rng.random::<f64>()).collect(),
    }
}

fn random_pair(seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePair {
        pair_id: seed,
        before: random_image(&mut rng),
        after: random_image(&mut rng),
    }
}

fn random_ids(rng: &mut ChaCha8Rng, body: usize) -> Vec<u32> {
    let mut ids = vec![START];
    ids.extend((0..body).map(|_| rng.random_range(4..V as u32)));
    ids.push(END);
    ids
}

#[test]
fn hsa_swapping_inputs_swaps_outputs() {
    let model = Model::new(tiny_model(V), 3).unwrap();
    let hw = model.encoder.grid_size().pow(2);
    let d = model.config.d_model;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f1, f2) = (random_mat(&mut rng, hw, d), random_mat(&mut rng, hw, d));
        let mut g = Graph::new(&model.params);
        let (a, b) = (g.input(f1.clone()), g.input(f2.clone()));
        let (i1, i2) = model.encoder.hierarchical_self_attention(&mut g, a, b).unwrap();
        let (j1, j2) = model.encoder.hierarchical_self_attention(&mut g, b, a).unwrap();
        assert!(g.value(i1).max_abs_diff(g.value(j2)) <= 1e-6);
        assert!(g.value(i2).max_abs_diff(g.value(j1)) <= 1e-6);
    }
}

fn set_identity(store: &mut ParamStore, lin: &Linear) {
    let w = store.get_mut(lin.weight);
    let n = w.rows();
    *w = Mat::identity(n);
    if let Some(b) = lin.bias {
        store.get_mut(b).data_mut().fill(0.0);
    }
}

fn zero(store: &mut ParamStore, lin: &Linear) {
    for id in lin.params() {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

fn layer_norm_by_hand(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
}

// Every token of both grids equals the same vector c. Softmax weights over
// identical keys are uniform and the values are all c, so each attention
// block returns c and the residual gives 2c. With zero feed-forward weights
// the last block only renormalises.
#[test]
fn hsa_constant_grid_matches_hand_trace() {
    let cfg = ModelConfig {
        d_model: 4,
        heads: 1,
        hsa_layers: 1,
        ffn_dim: 6,
        ..tiny_model(V)
    };
    let mut model = Model::new(cfg, 0).unwrap();
    let layer = model.encoder.hsa[0].clone();
    for attn in [&layer.self_attn, &layer.cross_attn] {
        for lin in [&attn.query, &attn.key, &attn.value, &attn.output] {
            set_identity(&mut model.params, lin);
        }
    }
    zero(&mut model.params, &layer.ffn.hidden);
    zero(&mut model.params, &layer.ffn.output);

    let c = [0.5, -1.0, 2.0, 0.25];
    let hw = model.encoder.grid_size().pow(2);
    let grid = Mat::from_vec(hw, 4, c.iter().copied().cycle().take(hw * 4).collect()).unwrap();

    let double = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
    let after_self = layer_norm_by_hand(&double(&c));
    let after_cross = layer_norm_by_hand(&double(&after_self));
    let expected = layer_norm_by_hand(&after_cross);

    let mut g = Graph::new(&model.params);
    let (a, b) = (g.input(grid.clone()), g.input(grid));
    let (i1, i2) = model.encoder.hierarchical_self_attention(&mut g, a, b).unwrap();
    assert_eq!(g.value(i1), g.value(i2));
    for r in 0..hw {
        for (x, y) in g.value(i1).row(r).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-9, "token {r}: {x} vs {y}");
        }
    }
}

proptest! {
    #[test]
    fn cosine_mask_is_bounded(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..6, zero_row in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_mat(&mut rng, rows, cols);
        let b = random_mat(&mut rng, rows, cols);
        if zero_row {
            a.row_mut(0).fill(0.0);
        }
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let mask = g.row_cosine(va, vb);
        for &m in g.value(mask).data() {
            prop_assert!((-1.0..=1.0).contains(&m));
        }
        if zero_row {
            prop_assert_eq!(g.value(mask).get(0, 0), 0.0);
        }
        let fused = fuse(&mut g, va, vb).unwrap();
        let f = g.value(fused);
        let m = g.value(mask);
        for r in 0..rows {
            prop_assert_eq!(f.get(r, 0), a.get(r, 0) + m.get(r, 0));
            prop_assert_eq!(f.get(r, cols), b.get(r, 0) + m.get(r, 0));
        }
    }
}

#[test]
fn random_inputs_stay_finite() {
    for seed in 0..100 {
        let model = Model::new(tiny_model(V), seed).unwrap();
        let pair = random_pair(seed + 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = random_ids(&mut rng, 1 + seed as usize % 9);
        let mut g = Graph::new(&model.params);
        let s = model.forward_sample(&mut g, &pair, &ids).unwrap();
        for v in [s.e_con, s.s_end, s.logits, s.nll] {
            assert!(g.value(v).is_finite(), "seed {seed}");
        }
    }
}

#[test]
fn swapping_before_and_after_changes_the_embedding() {
    let model = Model::new(tiny_model(V), 1).unwrap();
    let pair = random_pair(7);
    let a = model.encode_pair(&pair).unwrap().e_con;
    let b = model.encode_pair(&pair.swapped()).unwrap().e_con;
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "max difference {diff}");
}

#[test]
fn backbone_is_shared_between_the_two_images() {
    let model = Model::new(tiny_model(V), 0).unwrap();
    let backbone: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.contains("backbone"))
        .map(|(_, p)| p.name.clone())
        .collect();
    // Weight and bias per stage plus the projection.
    assert_eq!(backbone.len(), 2 * model.config.backbone_channels.len() + 2);
    assert!(backbone.iter().all(|n| !n.contains("before") && !n.contains("after")));
}

#[test]
fn last_two_stages_policy_zeroes_early_stage_gradients() {
    let mut model = Model::new(tiny_model(V), 2).unwrap();
    model.apply_finetune(BackboneFinetune::LastTwo);
    let pair = random_pair(3);
    let mut g = Graph::new(&model.params);
    let s = model.forward_sample(&mut g, &pair, &[START, 5, 6, END]).unwrap();
    let mut grads = Grads::zeros_like(&model.params);
    g.backward(&[(s.nll, &Mat::filled(1, 1, 1.0))], &mut grads);
    let n = model.config.backbone_channels.len();
    for id in model.encoder.stage_params(0) {
        assert_eq!(grads.get(id).sum_sq(), 0.0);
    }
    let late: f64 = (n - 2..n)
        .flat_map(|i| model.encoder.stage_params(i).collect::<Vec<_>>())
        .map(|id| grads.get(id).sum_sq())
        .sum();
    assert!(late > 0.0);
}

#[test]
fn different_image_grids_give_different_logits() {
    let model = Model::new(tiny_model(V), 4).unwrap();
    let hw = model.encoder.grid_size().pow(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = random_ids(&mut rng, 5);
    let (e1, e2) = (random_mat(&mut rng, hw, 8), random_mat(&mut rng, hw, 8));
    let logits = |e: Mat| {
        let mut g = Graph::new(&model.params);
        let e = g.input(e);
        let out = model.decoder.forward(&mut g, &ids, ids.len(), e).unwrap();
        g.value(out.logits).clone()
    };
    assert!(logits(e1).max_abs_diff(&logits(e2)) > 1e-6);
}

#[test]
fn sentence_vector_ignores_content_past_the_length() {
    let model = Model::new(tiny_model(V), 5).unwrap();
    let hw = model.encoder.grid_size().pow(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e_cap = random_mat(&mut rng, hw, 8);
    let real = random_ids(&mut rng, 4);
    let length = real.len();
    let s_end = |tail: &[u32]| {
        let mut ids = real.clone();
        ids.extend_from_slice(tail);
        let mut g = Graph::new(&model.params);
        let e = g.input(e_cap.clone());
        let out = model.decoder.forward(&mut g, &ids, length, e).unwrap();
        g.value(out.s_end).clone()
    };
    let padded = s_end(&[PAD; 5]);
    for trial in 0..10 {
        let tail: Vec<u32> = (0..5).map(|_| rng.random_range(0..V as u32)).collect();
        assert!(padded.max_abs_diff(&s_end(&tail)) <= 1e-12, "trial {trial}");
    }
    let direct = model.embed_caption(&[real.clone(), vec![PAD; 3]].concat()).unwrap();
    assert!(padded.max_abs_diff(&Mat::row_vector(direct)) <= 1e-12);
}

#[test]
fn tied_output_head_reuses_the_embedding_table() {
    let tied = Model::new(tiny_model(V), 0).unwrap();
    let untied = Model::new(
        ModelConfig {
            tie_embeddings: false,
            ..tiny_model(V)
        },
        0,
    )
    .unwrap();
    assert!(matches!(tied.decoder.head, OutputHead::Tied { .. }));
    assert!(tied.params.find("decoder.output.weight").is_none());
    assert!(untied.params.find("decoder.output.weight").is_some());
    let d = tied.config.d_model;
    assert_eq!(untied.params.num_scalars() - tied.params.num_scalars(), d * V);

    // The logit for token t is x . emb[t] + bias[t].
    let mut g = Graph::new(&tied.params);
    let hw = tied.encoder.grid_size().pow(2);
    let e = g.input(Mat::filled(hw, d, 0.1));
    let out = tied.decoder.forward(&mut g, &[START, 5], 2, e).unwrap();
    assert_eq!(g.shape(out.logits), (2, V));
    let table = tied.params.get(tied.decoder.embedding);
    assert_eq!(table.shape(), (V, d));
}
