//! Joint training: per-sample graphs for the captioning term, an analytic
//! batch-level contrastive term, AdamW with warmup, optional per-epoch hard
//! negative mining and best-validation-loss model selection.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{make_batches, BatchMember, Dataset, HardNegativePlan};
use crate::error::{Error, Result};
use crate::evalkit::{self, RelevanceSet};
use crate::model::{BackboneFinetune, Model};
use crate::objective::{build_pair_labels, info_nce, total_loss, LossConfig, SimilarityProvider, TextVector};
use crate::optim::{clip_global_norm, lr_schedule, warmup_steps, AdamW, AdamWConfig};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, Mat};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub target_lr: f64,
    pub warmup_fraction: f64,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Mined negatives per anchor; `None` disables mining.
    pub hard_negatives: Option<usize>,
    pub loss: LossConfig,
    pub backbone_finetune: BackboneFinetune,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Retrieval cutoff reported in the epoch log.
    pub log_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            target_lr: 1e-4,
            warmup_fraction: 0.05,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            hard_negatives: None,
            loss: LossConfig::default(),
            backbone_finetune: BackboneFinetune::Full,
            max_steps: None,
            log_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size {} < 2", self.batch_size)));
        }
        if !(self.target_lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("learning rate must be > 0 and warmup in [0, 1]"));
        }
        if self.hard_negatives == Some(0) {
            return Err(Error::config("hard negative count must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Token ids and similarity vectors for every caption of every item,
/// computed once per dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tokens: Vec<Vec<Vec<u32>>>,
    pub sims: Vec<Vec<TextVector>>,
}

pub fn prepare(
    dataset: &Dataset,
    vocab: &Vocabulary,
    max_len: usize,
    provider: &mut dyn SimilarityProvider,
) -> Result<Prepared> {
    let mut tokens = Vec::with_capacity(dataset.len());
    let mut sims = Vec::with_capacity(dataset.len());
    for it in &dataset.items {
        tokens.push(
            it.captions
                .iter()
                .map(|c| vocab.encode(c, max_len))
                .collect::<Result<Vec<_>>>()?,
        );
        sims.push(it.captions.iter().map(|c| provider.embed(c)).collect());
    }
    Ok(Prepared { tokens, sims })
}

/// Loss terms of one batch, with gradients when requested.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub caption_loss: f64,
    pub contrastive_loss: f64,
    pub grads: Option<Grads>,
}

/// `L_cap + lambda * L_con` for the given members. The caption term is the
/// mean token NLL over the whole batch.
pub fn batch_loss(
    model: &Model,
    dataset: &Dataset,
    prepared: &Prepared,
    members: &[BatchMember],
    loss_cfg: &LossConfig,
    with_grads: bool,
) -> Result<BatchLoss> {
    batch_loss_inner(model, dataset, prepared, members, loss_cfg, with_grads, None)
}

/// Loss value plus the ReLU activation pattern of every sample's graph.
pub fn batch_probe(
    model: &Model,
    dataset: &Dataset,
    prepared: &Prepared,
    members: &[BatchMember],
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<bool>)> {
    let mut pattern = Vec::new();
    let l = batch_loss_inner(model, dataset, prepared, members, loss_cfg, false, Some(&mut pattern))?;
    Ok((l.loss, pattern))
}

fn batch_loss_inner(
    model: &Model,
    dataset: &Dataset,
    prepared: &Prepared,
    members: &[BatchMember],
    loss_cfg: &LossConfig,
    with_grads: bool,
    mut pattern: Option<&mut Vec<bool>>,
) -> Result<BatchLoss> {
    let n = members.len();
    if n == 0 {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let d = model.config.d_model;
    let mut graphs = Vec::with_capacity(n);
    let mut e = Mat::zeros(n, d);
    let mut s = Mat::zeros(n, d);
    let mut nll_sum = 0.0;
    let mut tokens = 0usize;
    for (r, m) in members.iter().enumerate() {
        let mut g = Graph::new(&model.params);
        let ids = &prepared.tokens[m.item][m.caption];
        let vars = model.forward_sample(&mut g, &dataset.items[m.item].pair, ids)?;
        e.row_mut(r).copy_from_slice(g.value(vars.e_con).data());
        s.row_mut(r).copy_from_slice(g.value(vars.s_end).data());
        nll_sum += g.value(vars.nll).data()[0];
        tokens += vars.tokens;
        if let Some(p) = pattern.as_deref_mut() {
            p.extend(g.relu_pattern());
        }
        graphs.push((g, vars));
    }
    let labels: Vec<u64> = members.iter().map(|m| dataset.items[m.item].pair_id).collect();
    let t: Vec<TextVector> = members
        .iter()
        .map(|m| prepared.sims[m.item][m.caption].clone())
        .collect();
    let pl = build_pair_labels(&labels, &t, loss_cfg.theta, loss_cfg.mode)?;
    let con = info_nce(&e, &s, &pl, loss_cfg.tau)?;
    let caption_loss = nll_sum / tokens as f64;
    let loss = total_loss(caption_loss, con.loss, loss_cfg.lambda)?;

    let grads = if with_grads {
        let mut grads = Grads::zeros_like(&model.params);
        let cap_seed = Mat::filled(1, 1, 1.0 / tokens as f64);
        for (r, (g, vars)) in graphs.iter().enumerate() {
            let mut seeds: Vec<(crate::autograd::Var, Mat)> = alloc::vec![(vars.nll, cap_seed.clone())];
            if loss_cfg.lambda > 0.0 {
                let mut ge = Mat::row_vector(con.grad_e.row(r).to_vec());
                ge.scale_in_place(loss_cfg.lambda);
                let mut gs = Mat::row_vector(con.grad_s.row(r).to_vec());
                gs.scale_in_place(loss_cfg.lambda);
                seeds.push((vars.e_con, ge));
                seeds.push((vars.s_end, gs));
            }
            let seed_refs: Vec<(crate::autograd::Var, &Mat)> = seeds.iter().map(|(v, m)| (*v, m)).collect();
            g.backward(&seed_refs, &mut grads);
        }
        Some(grads)
    } else {
        None
    };
    Ok(BatchLoss {
        loss,
        caption_loss,
        contrastive_loss: con.loss,
        grads,
    })
}

/// For each anchor (caption 0 of item `i`), the `m` highest-cosine pairs
/// that are not relevant to it. Ties go to the smaller pair id.
pub fn mine_from_embeddings(
    pair_vecs: &[Vec<f64>],
    query_vecs: &[Vec<f64>],
    ids: &[u64],
    relevance: &RelevanceSet,
    m: usize,
) -> Result<HardNegativePlan> {
    let n = pair_vecs.len();
    if m == 0 || m >= n {
        return Err(Error::config(format!(
            "hard negative count {m} must be in 1..{n} for a dataset of {n} items"
        )));
    }
    let mut plan = HardNegativePlan::default();
    for (i, q) in query_vecs.iter().enumerate() {
        let scores: Vec<f64> = pair_vecs.iter().map(|p| dot(q, p)).collect();
        let ranked = evalkit::rank_by_score(ids, &scores);
        let chosen: Vec<usize> = ranked
            .into_iter()
            .filter(|id| !relevance.sets[i].contains(id))
            .take(m)
            .map(|id| ids.iter().position(|&x| x == id).expect("known id"))
            .collect();
        plan.negatives.insert(i, chosen);
    }
    Ok(plan)
}

/// Mines `m` negatives per item for this epoch. `anchor_captions[i]` is the
/// caption item `i` is trained with; both its text vector and its
/// relevance set come from that caption.
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives(
    model: &Model,
    vocab: &Vocabulary,
    dataset: &Dataset,
    prepared: &Prepared,
    anchor_captions: &[usize],
    theta: f64,
    m: usize,
) -> Result<HardNegativePlan> {
    if m == 0 || m >= dataset.len() {
        return Err(Error::config(format!(
            "hard negative count {m} must be in 1..{}",
            dataset.len()
        )));
    }
    if anchor_captions.len() != dataset.len() {
        return Err(Error::shape("one anchor caption per item"));
    }
    let ids: Vec<u64> = dataset.items.iter().map(|i| i.pair_id).collect();
    let pairs = evalkit::embed_pairs(model, dataset)?;
    let queries: Vec<Vec<f64>> = dataset
        .items
        .iter()
        .zip(anchor_captions)
        .map(|(it, &c)| evalkit::embed_text(model, vocab, &it.captions[c]))
        .collect::<Result<_>>()?;
    let query_sims: Vec<TextVector> = anchor_captions
        .iter()
        .enumerate()
        .map(|(i, &c)| prepared.sims[i][c].clone())
        .collect();
    let relevance = RelevanceSet::build(&ids, &query_sims, &prepared.sims, theta);
    mine_from_embeddings(&pairs, &queries, &ids, &relevance, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_caption_loss: f64,
    pub train_contrastive_loss: f64,
    pub val_loss: f64,
    /// Validation recall at `log_k`, x100.
    pub val_recall: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters of the best epoch.
    pub best_params: ParamStore,
    pub steps: usize,
}

/// Mean total loss over `dataset` with fixed batching and caption choice.
pub fn evaluate_loss(
    model: &Model,
    dataset: &Dataset,
    prepared: &Prepared,
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("cannot evaluate loss on an empty set".into()));
    }
    let batches = make_batches(dataset, batch_size.max(2), 0, 0, None)?;
    let mut total = 0.0;
    for b in &batches {
        let l = batch_loss(model, dataset, prepared, &b.members, loss_cfg, false)?;
        total += l.loss * b.members.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

fn diagnostic(dataset: &Dataset, members: &[BatchMember], what: &str) -> String {
    let mut s = format!("{what}; offending batch:");
    for m in members {
        let it = &dataset.items[m.item];
        s.push_str(&format!(
            "\n  pair {} caption {}: {:?}",
            it.pair_id, m.caption, it.captions[m.caption]
        ));
    }
    s
}

/// Trains `model` in place; it ends holding the best-epoch parameters.
/// `on_epoch` sees every epoch record with the current model, for logging
/// or checkpointing.
pub fn train(
    model: &mut Model,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    provider: &mut dyn SimilarityProvider,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    model.apply_finetune(cfg.backbone_finetune);
    let max_len = model.config.max_len;
    let train_prep = prepare(train_set, vocab, max_len, provider)?;
    let val_prep = prepare(val_set, vocab, max_len, provider)?;

    // Warmup is sized from the batch count without mined negatives; with a
    // plan, epochs hold more batches but training still runs all epochs.
    let per_epoch = make_batches(train_set, cfg.batch_size, cfg.seed, 0, None)?.len();
    let mut planned_steps = per_epoch * cfg.epochs;
    if let Some(ms) = cfg.max_steps {
        planned_steps = planned_steps.min(ms);
    }
    let warm = warmup_steps(planned_steps, cfg.warmup_fraction);
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let plan = match cfg.hard_negatives {
            Some(m) => {
                // Caption choice does not depend on the plan.
                let mut anchor_captions = alloc::vec![0; train_set.len()];
                for b in make_batches(train_set, cfg.batch_size, cfg.seed, epoch as u64, None)? {
                    for mb in b.members {
                        anchor_captions[mb.item] = mb.caption;
                    }
                }
                Some(mine_hard_negatives(
                    model,
                    vocab,
                    train_set,
                    &train_prep,
                    &anchor_captions,
                    cfg.loss.theta,
                    m,
                )?)
            }
            None => None,
        };
        let batches = make_batches(train_set, cfg.batch_size, cfg.seed, epoch as u64, plan.as_ref())?;
        let (mut sum, mut sum_cap, mut sum_con, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for b in &batches {
            if step >= step_limit {
                break;
            }
            let out = batch_loss(model, train_set, &train_prep, &b.members, &cfg.loss, true)?;
            let mut grads = out.grads.expect("requested");
            if !out.loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(diagnostic(
                    train_set,
                    &b.members,
                    &format!(
                        "non-finite loss at epoch {epoch} step {step}: total {} caption {} contrastive {}",
                        out.loss, out.caption_loss, out.contrastive_loss
                    ),
                )));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            step += 1;
            lr = lr_schedule(step, warm, cfg.target_lr);
            opt.step(&mut model.params, &grads, lr);
            let w = b.members.len() as f64;
            sum += out.loss * w;
            sum_cap += out.caption_loss * w;
            sum_con += out.contrastive_loss * w;
            count += b.members.len();
        }
        if count == 0 {
            break 'epochs;
        }
        let (val_loss, val_recall) = if val_set.is_empty() {
            (sum / count as f64, 0.0)
        } else {
            let vl = evaluate_loss(model, val_set, &val_prep, cfg.batch_size, &cfg.loss)?;
            let r = evalkit::evaluate_retrieval(model, vocab, val_set, provider, cfg.loss.theta, &[cfg.log_k])?;
            (vl, r[0].recall)
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch,
            steps: step,
            train_loss: sum / count as f64,
            train_caption_loss: sum_cap / count as f64,
            train_contrastive_loss: sum_con / count as f64,
            val_loss,
            val_recall,
            lr,
        };
        on_epoch(&rec, model)?;
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params.clone()));
        }
        log.push(rec);
        if step >= step_limit {
            break;
        }
    }
    let (best_epoch, best_val_loss, best_params) =
        best.ok_or_else(|| Error::Empty("no training step was taken".into()))?;
    model.params = best_params.clone();
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
        best_params,
        steps: step,
    })
}

/// One analytic-versus-numeric comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// A ReLU changed sides between the two evaluations, so the central
    /// difference straddles a kink and is not a valid reference.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Maximum over entries without a kink.
    pub max_rel_error: f64,
}

impl FdReport {
    pub fn smooth(&self) -> usize {
        self.entries.iter().filter(|e| !e.kink).count()
    }

    pub fn kinks(&self) -> usize {
        self.entries.len() - self.smooth()
    }
}

/// Absolute scale below which gradient differences are not amplified into
/// large relative errors.
pub const FD_REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + libm::fabs(numeric)).max(FD_REL_FLOOR)
}

/// `count` distinct coordinates drawn uniformly from the trainable
/// parameters accepted by `filter`, ordered by parameter then index.
pub fn sample_coordinates(
    store: &ParamStore,
    count: usize,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable && filter(&p.name))
        .flat_map(|(id, p)| (0..p.value.len()).map(move |k| (id, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: BTreeSet<usize> = sample(&mut rng, pool.len(), count.min(pool.len())).into_iter().collect();
    picks.into_iter().map(|i| pool[i]).collect()
}

/// Central differences of `loss_of(model)` at each coordinate, compared
/// with the given analytic gradient. `loss_of` also returns the ReLU
/// activation pattern used to flag kinks.
pub fn finite_difference_check(
    model: &mut Model,
    grads: &Grads,
    coords: &[(ParamId, usize)],
    h: f64,
    loss_of: &mut dyn FnMut(&Model) -> Result<(f64, Vec<bool>)>,
) -> Result<FdReport> {
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel_error: f64 = 0.0;
    for &(id, k) in coords {
        let orig = model.params.get(id).data()[k];
        model.params.get_mut(id).data_mut()[k] = orig + h;
        let lp = loss_of(model);
        model.params.get_mut(id).data_mut()[k] = orig - h;
        let lm = loss_of(model);
        model.params.get_mut(id).data_mut()[k] = orig;
        let ((lp, pp), (lm, pm)) = (lp?, lm?);
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.get(id).data()[k];
        let rel_error = relative_error(analytic, numeric);
        let kink = pp != pm;
        if !kink {
            max_rel_error = max_rel_error.max(rel_error);
        }
        entries.push(FdEntry {
            param: model.params.param(id).name.clone(),
            index: k,
            analytic,
            numeric,
            rel_error,
            kink,
        });
    }
    Ok(FdReport {
        entries,
        max_rel_error,
    })
}

/// Gradient check of the joint loss on one batch.
pub fn check_batch_gradients(
    model: &mut Model,
    dataset: &Dataset,
    prepared: &Prepared,
    members: &[BatchMember],
    loss_cfg: &LossConfig,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<FdReport> {
    let grads = batch_loss(model, dataset, prepared, members, loss_cfg, true)?
        .grads
        .expect("requested");
    finite_difference_check(model, &grads, coords, h, &mut |m| {
        batch_probe(m, dataset, prepared, members, loss_cfg)
    })
}
