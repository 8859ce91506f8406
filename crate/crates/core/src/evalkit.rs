//! Retrieval metrics under threshold-merged relevance and caption quality
//! metrics (BLEU, ROUGE-L, CIDEr-D). All scores are scaled by 100.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{SimilarityProvider, TextVector};
use crate::tensor::{dot, norm};
use crate::vocab::{tokenize, Vocabulary};

/// Stand-in id for ranking slots beyond the end of a short corpus.
pub const SENTINEL: u64 = u64::MAX;

pub fn precision_at_k(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(100.0 * hits as f64 / k as f64)
}

pub fn recall_at_k(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if relevant.is_empty() {
        return Err(Error::Empty("recall needs a non-empty relevant set".into()));
    }
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(100.0 * hits as f64 / relevant.len() as f64)
}

pub fn reciprocal_rank_at_k(ranked: &[u64], relevant: &BTreeSet<u64>, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|id| relevant.contains(id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn mrr_at_k(ranked: &[Vec<u64>], relevant: &[BTreeSet<u64>], k: usize) -> Result<f64> {
    if ranked.is_empty() || ranked.len() != relevant.len() {
        return Err(Error::shape(format!(
            "{} rankings for {} relevance sets",
            ranked.len(),
            relevant.len()
        )));
    }
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let sum: f64 = ranked
        .iter()
        .zip(relevant)
        .map(|(r, rel)| reciprocal_rank_at_k(r, rel, k))
        .sum();
    Ok(100.0 * sum / ranked.len() as f64)
}

/// Ids ordered by descending score; ties go to the smaller id.
pub fn rank_by_score(ids: &[u64], scores: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    order.into_iter().map(|i| ids[i]).collect()
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn tokenized<S: AsRef<str>>(texts: &[S]) -> Vec<Vec<String>> {
    texts.iter().map(|t| tokenize(t.as_ref())).collect()
}

/// Corpus-level BLEU-n: clipped n-gram precisions pooled over the corpus,
/// uniform geometric mean over orders `1..=n`, brevity penalty against the
/// closest reference length (shorter wins ties).
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[Vec<R>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::config(format!("BLEU order {n} outside 1..=4")));
    }
    if candidates.len() != references.len() {
        return Err(Error::shape("one reference set per candidate"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokenize(cand.as_ref());
        let refs = tokenized(refs);
        c_len += c.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for order in 1..=n {
            let cc = ngram_counts(&c, order);
            let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
            for r in &refs {
                for (g, k) in ngram_counts(r, order) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[order - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[order - 1] += k;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 0..n {
        if matched[order] == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched[order] as f64 / total[order] as f64);
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        libm::exp(1.0 - r_len as f64 / c_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_sum / n as f64))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: LCS precision and recall, each maximised over the
/// references, combined into an F-measure with `beta = 1.2`.
pub fn rouge_l<R: AsRef<str>>(candidate: &str, references: &[R]) -> f64 {
    let c = tokenize(candidate);
    if c.is_empty() || references.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in tokenized(references) {
        if r.is_empty() {
            continue;
        }
        let l = lcs(&c, &r) as f64;
        p_max = p_max.max(l / c.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l_corpus<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[Vec<R>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::shape("one reference set per candidate"));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c.as_ref(), r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_N: usize = 4;

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    /// Bigram count, used by the length penalty.
    length: f64,
}

fn tfidf(tokens: &[String], df: &BTreeMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
    let mut vec: [BTreeMap<Vec<String>, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for n in 1..=CIDER_N {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = libm::log(df.get(g).copied().unwrap_or(0.0).max(1.0));
            let w = tf as f64 * (log_n - d);
            norm[n - 1] += w * w;
            vec[n - 1].insert(g.to_vec(), w);
            if n == 2 {
                length += tf as f64;
            }
        }
    }
    for v in &mut norm {
        *v = libm::sqrt(*v);
    }
    TfIdf { vec, norm, length }
}

/// Per-item CIDEr-D scores (each already multiplied by 10, as in the
/// standard definition, and then by 100 for reporting).
pub fn cider_scores<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[Vec<R>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::shape("one reference set per candidate"));
    }
    if candidates.len() < 2 {
        return Err(Error::config("CIDEr needs a corpus of at least 2 items"));
    }
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|r| tokenized(r)).collect();
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for set in &refs {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in set {
            for n in 1..=CIDER_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_default() += 1.0;
        }
    }
    let log_n = libm::log(candidates.len() as f64);
    let mut scores = Vec::with_capacity(candidates.len());
    for (cand, set) in candidates.iter().zip(&refs) {
        if set.is_empty() {
            return Err(Error::Empty("candidate without references".into()));
        }
        let h = tfidf(&tokenize(cand.as_ref()), &df, log_n);
        let mut acc = [0.0; CIDER_N];
        for r in set {
            let r = tfidf(r, &df, log_n);
            let delta = h.length - r.length;
            let penalty = libm::exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
            for n in 0..CIDER_N {
                let mut val = 0.0;
                for (g, &wh) in &h.vec[n] {
                    let wr = r.vec[n].get(g).copied().unwrap_or(0.0);
                    val += wh.min(wr) * wr;
                }
                if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
                    val /= h.norm[n] * r.norm[n];
                }
                acc[n] += val * penalty;
            }
        }
        let mean = acc.iter().sum::<f64>() / CIDER_N as f64;
        scores.push(100.0 * 10.0 * mean / set.len() as f64);
    }
    Ok(scores)
}

pub fn cider<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[Vec<R>]) -> Result<f64> {
    let s = cider_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Relevant pair ids per query: the query's own pair plus every pair with a
/// caption whose similarity to the query caption reaches `theta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceSet {
    pub sets: Vec<BTreeSet<u64>>,
}

impl RelevanceSet {
    /// `query_vecs[i]` is query `i`'s caption vector; `item_vecs[j]` holds
    /// all caption vectors of item `j`.
    pub fn build(ids: &[u64], query_vecs: &[TextVector], item_vecs: &[Vec<TextVector>], theta: f64) -> Self {
        let sets = query_vecs
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let mut set = BTreeSet::new();
                set.insert(ids[i]);
                for (j, caps) in item_vecs.iter().enumerate() {
                    if caps.iter().any(|t| q.dot(t) >= theta) {
                        set.insert(ids[j]);
                    }
                }
                set
            })
            .collect();
        Self { sets }
    }

    /// Queries are caption 0 of each item.
    pub fn for_dataset(dataset: &Dataset, provider: &mut dyn SimilarityProvider, theta: f64) -> Self {
        let ids: Vec<u64> = dataset.items.iter().map(|i| i.pair_id).collect();
        let item_vecs: Vec<Vec<TextVector>> = dataset
            .items
            .iter()
            .map(|i| i.captions.iter().map(|c| provider.embed(c)).collect())
            .collect();
        let queries: Vec<TextVector> = item_vecs.iter().map(|v| v[0].clone()).collect();
        Self::build(&ids, &queries, &item_vecs, theta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    /// Candidates equal to one of their references after normalisation.
    pub exact_match: usize,
    pub items: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: Vec<RetrievalAtK>,
    pub captioning: Option<CaptionScores>,
}

impl EvalReport {
    /// `(key, value)` rows in the order P@k, R@k, MRR@k per k, then
    /// BLEU-1..4, ROUGE-L, CIDEr.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for r in &self.retrieval {
            out.push((format!("P@{}", r.k), r.precision));
            out.push((format!("R@{}", r.k), r.recall));
            out.push((format!("MRR@{}", r.k), r.mrr));
        }
        if let Some(c) = &self.captioning {
            for (i, b) in c.bleu.iter().enumerate() {
                out.push((format!("BLEU-{}", i + 1), *b));
            }
            out.push((String::from("ROUGE-L"), c.rouge_l));
            out.push((String::from("CIDEr"), c.cider));
        }
        out
    }

    pub fn at(&self, k: usize) -> Option<&RetrievalAtK> {
        self.retrieval.iter().find(|r| r.k == k)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Normalised contrastive vectors of every pair, in dataset order.
pub fn embed_pairs(model: &Model, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .items
        .iter()
        .map(|it| Ok(unit(&model.encode_pair(&it.pair)?.e_con)))
        .collect()
}

pub fn embed_text(model: &Model, vocab: &Vocabulary, text: &str) -> Result<Vec<f64>> {
    let ids = vocab.encode(text, model.config.max_len)?;
    Ok(unit(&model.embed_caption(&ids)?))
}

/// Ranks every pair of `dataset` for each query vector.
pub fn rank_all(pair_vecs: &[Vec<f64>], ids: &[u64], queries: &[Vec<f64>]) -> Vec<Vec<u64>> {
    queries
        .iter()
        .map(|q| {
            let scores: Vec<f64> = pair_vecs.iter().map(|p| dot(q, p)).collect();
            rank_by_score(ids, &scores)
        })
        .collect()
}

/// P/R/MRR at each `k`, averaged over queries.
pub fn retrieval_metrics(ranked: &[Vec<u64>], relevance: &RelevanceSet, ks: &[usize]) -> Result<Vec<RetrievalAtK>> {
    if ranked.is_empty() {
        return Err(Error::Empty("no queries".into()));
    }
    let q = ranked.len() as f64;
    ks.iter()
        .map(|&k| {
            let mut p = 0.0;
            let mut r = 0.0;
            for (rank, rel) in ranked.iter().zip(&relevance.sets) {
                p += precision_at_k(rank, rel, k)?;
                r += recall_at_k(rank, rel, k)?;
            }
            Ok(RetrievalAtK {
                k,
                precision: p / q,
                recall: r / q,
                mrr: mrr_at_k(ranked, &relevance.sets, k)?,
            })
        })
        .collect()
}

/// Text-to-pair retrieval with caption 0 of each item as its query.
pub fn evaluate_retrieval(
    model: &Model,
    vocab: &Vocabulary,
    dataset: &Dataset,
    provider: &mut dyn SimilarityProvider,
    theta: f64,
    ks: &[usize],
) -> Result<Vec<RetrievalAtK>> {
    let ids: Vec<u64> = dataset.items.iter().map(|i| i.pair_id).collect();
    let pairs = embed_pairs(model, dataset)?;
    let queries: Vec<Vec<f64>> = dataset
        .items
        .iter()
        .map(|it| embed_text(model, vocab, &it.captions[0]))
        .collect::<Result<_>>()?;
    let ranked = rank_all(&pairs, &ids, &queries);
    let relevance = RelevanceSet::for_dataset(dataset, provider, theta);
    retrieval_metrics(&ranked, &relevance, ks)
}

/// Scores generated captions against normalised references.
pub fn score_captions<S: AsRef<str>>(candidates: &[S], references: &[Vec<String>]) -> Result<CaptionScores> {
    let mut bleu_scores = [0.0; 4];
    for (n, b) in bleu_scores.iter_mut().enumerate() {
        *b = bleu(candidates, references, n + 1)?;
    }
    let exact_match = candidates
        .iter()
        .zip(references)
        .filter(|(c, refs)| {
            let c = crate::vocab::normalize(c.as_ref());
            refs.iter().any(|r| crate::vocab::normalize(r) == c)
        })
        .count();
    Ok(CaptionScores {
        bleu: bleu_scores,
        rouge_l: rouge_l_corpus(candidates, references)?,
        cider: if candidates.len() >= 2 {
            cider(candidates, references)?
        } else {
            0.0
        },
        exact_match,
        items: candidates.len(),
    })
}

/// Greedy caption for every pair, decoded to text.
pub fn generate_captions(model: &Model, vocab: &Vocabulary, dataset: &Dataset) -> Result<Vec<String>> {
    dataset
        .items
        .iter()
        .map(|it| Ok(vocab.decode(&model.caption(&it.pair)?)))
        .collect()
}

pub fn evaluate_captioning(model: &Model, vocab: &Vocabulary, dataset: &Dataset) -> Result<CaptionScores> {
    let candidates = generate_captions(model, vocab, dataset)?;
    let references: Vec<Vec<String>> = dataset.items.iter().map(|i| i.captions.clone()).collect();
    score_captions(&candidates, &references)
}
