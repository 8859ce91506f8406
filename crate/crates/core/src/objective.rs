//! Contrastive and captioning losses with caption-similarity-driven
//! false-negative handling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::vocab::tokenize;

/// Sparse caption vector: `(feature index, weight)` sorted by index.
/// Vectors are compared by cosine, so weights may be left unnormalised;
/// integer counts then give exact cosines, in particular exactly 1 for
/// identical or reordered texts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextVector {
    pub entries: Vec<(u32, f64)>,
}

impl TextVector {
    pub fn from_dense(v: &[f64]) -> Self {
        Self {
            entries: v
                .iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(i, &x)| (i as u32, x))
                .collect(),
        }
    }

    fn raw_dot(&self, other: &TextVector) -> f64 {
        let (a, b) = (&self.entries, &other.entries);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum()
    }

    /// Cosine similarity `t_i . t_j` of the normalised vectors; 0 if either
    /// is empty.
    pub fn dot(&self, other: &TextVector) -> f64 {
        let denom = libm::sqrt(self.norm_sq() * other.norm_sq());
        if denom == 0.0 {
            0.0
        } else {
            self.raw_dot(other) / denom
        }
    }

    /// Unit-norm copy.
    pub fn unit(&self) -> TextVector {
        let n = libm::sqrt(self.norm_sq());
        TextVector {
            entries: self
                .entries
                .iter()
                .map(|&(i, w)| (i, if n > 0.0 { w / n } else { 0.0 }))
                .collect(),
        }
    }

    /// Euclidean norm of the normalised vector (1, or 0 when empty).
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.unit().norm_sq())
    }
}

/// Maps caption text to a vector whose cosines score caption
/// similarity. Implementations must be deterministic in the text.
pub trait SimilarityProvider {
    fn embed(&mut self, text: &str) -> TextVector;
}

pub const STOPWORDS: [&str; 16] = [
    "a", "an", "the", "at", "in", "on", "of", "is", "are", "has", "have", "been", "there", "to",
    "from", "as",
];

/// Term-count vector over content words, compared by cosine. Word indices are
/// assigned on first sight; results are cached per text.
#[derive(Clone, Debug, Default)]
pub struct BagOfWords {
    words: BTreeMap<String, u32>,
    cache: BTreeMap<String, TextVector>,
}

impl BagOfWords {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn content_words(text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
            .collect()
    }
}

impl SimilarityProvider for BagOfWords {
    fn embed(&mut self, text: &str) -> TextVector {
        if let Some(v) = self.cache.get(text) {
            return v.clone();
        }
        let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
        for w in Self::content_words(text) {
            let next = self.words.len() as u32;
            let id = *self.words.entry(w).or_insert(next);
            *counts.entry(id).or_default() += 1.0;
        }
        let v = TextVector {
            entries: counts.into_iter().collect(),
        };
        self.cache.insert(String::from(text), v.clone());
        v
    }
}

pub fn compute_similarity_embeddings<S: AsRef<str>>(
    provider: &mut dyn SimilarityProvider,
    captions: &[S],
) -> Vec<TextVector> {
    captions.iter().map(|c| provider.embed(c.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FnMode {
    #[default]
    None,
    Fne,
    Fna,
}

impl core::str::FromStr for FnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "fne" => Ok(Self::Fne),
            "fna" => Ok(Self::Fna),
            _ => Err(Error::config(format!("unknown fn-mode {s:?} (none, fne, fna)"))),
        }
    }
}

impl FnMode {
    pub fn name(self) -> &'static str {
        match self {
            FnMode::None => "none",
            FnMode::Fne => "fne",
            FnMode::Fna => "fna",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub theta: f64,
    pub mode: FnMode,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            theta: 1.0,
            mode: FnMode::None,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::config(format!("theta {} outside (0, 1]", self.theta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairStatus {
    Positive,
    Negative,
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLabelMatrix {
    n: usize,
    status: Vec<PairStatus>,
}

impl PairLabelMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> PairStatus) -> Self {
        let mut status = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                status.push(f(i, j));
            }
        }
        Self { n, status }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> PairStatus {
        self.status[i * self.n + j]
    }

    pub fn count(&self, s: PairStatus) -> usize {
        self.status.iter().filter(|&&x| x == s).count()
    }
}

/// Positive where labels match; otherwise negative unless the captions'
/// similarity reaches `theta`, in which case FNE excludes the pair and FNA
/// makes it positive.
pub fn build_pair_labels(
    labels: &[u64],
    t: &[TextVector],
    theta: f64,
    mode: FnMode,
) -> Result<PairLabelMatrix> {
    if labels.len() != t.len() {
        return Err(Error::shape(format!(
            "{} labels but {} similarity vectors",
            labels.len(),
            t.len()
        )));
    }
    Ok(PairLabelMatrix::from_fn(labels.len(), |i, j| {
        if labels[i] == labels[j] {
            return PairStatus::Positive;
        }
        if mode == FnMode::None || t[i].dot(&t[j]) < theta {
            return PairStatus::Negative;
        }
        match mode {
            FnMode::Fne => PairStatus::Excluded,
            _ => PairStatus::Positive,
        }
    }))
}

/// Loss value with gradients with respect to the raw (unnormalised) inputs.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_e: Mat,
    pub grad_s: Mat,
}

fn normalize_rows(m: &Mat, what: &str) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = crate::tensor::norm(m.row(i));
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what} row {i} has norm {n}, cannot normalise"
            )));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// `d/dx (x/|x|)^T g = (g - x̂ (x̂·g)) / |x|`, row by row.
fn normalize_backward(unit: &Mat, norms: &[f64], grad: &mut Mat) {
    for i in 0..unit.rows() {
        let u = unit.row(i);
        let proj = crate::tensor::dot(u, grad.row(i));
        for (g, &ui) in grad.row_mut(i).iter_mut().zip(u) {
            *g = (*g - ui * proj) / norms[i];
        }
    }
}

/// One softmax direction: adds the loss of every row of `z` (with status
/// read through `status(i, j)`) and writes `dL/dz` into `dz`.
fn direction(
    z: &Mat,
    status: impl Fn(usize, usize) -> PairStatus,
    scale: f64,
    dz: &mut Mat,
    which: &str,
) -> Result<f64> {
    let n = z.rows();
    let mut total = 0.0;
    let mut probs = alloc::vec![0.0; n];
    for i in 0..n {
        let zi = z.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut n_pos = 0usize;
        for j in 0..n {
            match status(i, j) {
                PairStatus::Excluded => {}
                PairStatus::Positive => {
                    n_pos += 1;
                    max = max.max(zi[j]);
                }
                PairStatus::Negative => max = max.max(zi[j]),
            }
        }
        if n_pos == 0 {
            return Err(Error::DegenerateBatch(format!(
                "{which} row {i} has no positive"
            )));
        }
        let mut denom = 0.0;
        for j in 0..n {
            probs[j] = if status(i, j) == PairStatus::Excluded {
                0.0
            } else {
                libm::exp(zi[j] - max)
            };
            denom += probs[j];
        }
        let log_denom = max + libm::log(denom);
        let inv_pos = 1.0 / n_pos as f64;
        let dzi = dz.row_mut(i);
        for j in 0..n {
            let p = probs[j] / denom;
            let pos = status(i, j) == PairStatus::Positive;
            if pos {
                total -= inv_pos * (zi[j] - log_denom);
            }
            dzi[j] += scale * (p - if pos { inv_pos } else { 0.0 });
        }
    }
    Ok(total)
}

/// Symmetric multi-positive InfoNCE over L2-normalised rows of `e` and `s`.
/// Row `i` of each is the pair / caption of batch member `i`; excluded
/// entries leave both numerator and denominator. The total is the sum of
/// both directions divided by `N`.
pub fn info_nce(e: &Mat, s: &Mat, labels: &PairLabelMatrix, tau: f64) -> Result<ContrastiveOutput> {
    let n = e.rows();
    if s.shape() != e.shape() || labels.len() != n {
        return Err(Error::shape(format!(
            "info_nce: e {:?}, s {:?}, labels {}",
            e.shape(),
            s.shape(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::config("tau must be positive"));
    }
    let (eu, en) = normalize_rows(e, "image embedding")?;
    let (su, sn) = normalize_rows(s, "text embedding")?;
    debug_assert!((0..n).all(|i| libm::fabs(crate::tensor::norm(eu.row(i)) - 1.0) < 1e-9));

    let mut z = eu.matmul(&su.transpose());
    z.scale_in_place(1.0 / tau);
    let zt = z.transpose();
    let inv_n = 1.0 / n as f64;

    let mut dz = Mat::zeros(n, n);
    let l_i2t = direction(&z, |i, j| labels.get(i, j), inv_n, &mut dz, "image-to-text")?;
    let mut dzt = Mat::zeros(n, n);
    let l_t2i = direction(&zt, |j, i| labels.get(i, j), inv_n, &mut dzt, "text-to-image")?;
    dz.add_assign(&dzt.transpose());
    let loss = (l_i2t + l_t2i) * inv_n;

    // z = eu su^T / tau
    dz.scale_in_place(1.0 / tau);
    let mut grad_e = dz.matmul(&su);
    let mut grad_s = dz.transpose().matmul(&eu);
    normalize_backward(&eu, &en, &mut grad_e);
    normalize_backward(&su, &sn, &mut grad_s);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss is {loss}")));
    }
    Ok(ContrastiveOutput {
        loss,
        grad_e,
        grad_s,
    })
}

/// Mean token negative log-likelihood of `targets` under row-wise softmax
/// of `logits`, skipping positions whose target is `pad_id`.
pub fn caption_loss(logits: &Mat, targets: &[u32], pad_id: u32) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = logits.row(i);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Index(format!("target {t} >= {} classes", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("caption target is all padding".into()));
    }
    Ok(total / count as f64)
}

/// Teacher-forcing targets: the input shifted left by one, padded at the
/// end.
pub fn shifted_targets(ids: &[u32], pad_id: u32) -> Vec<u32> {
    let mut t: Vec<u32> = ids.iter().skip(1).copied().collect();
    t.push(pad_id);
    t
}

pub fn total_loss(l_cap: f64, l_con: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda {lambda} must be >= 0")));
    }
    Ok(l_cap + lambda * l_con)
}
