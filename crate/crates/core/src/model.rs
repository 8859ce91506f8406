//! Encoder and decoder bundled with their shared parameter store.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::ImagePair;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::vocab::sequence_length;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub hsa_layers: usize,
    pub ffn_dim: usize,
    pub uni_layers: usize,
    pub multi_layers: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone_channels: alloc::vec![32, 64, 128],
            d_model: 128,
            heads: 4,
            hsa_layers: 2,
            ffn_dim: 256,
            uni_layers: 2,
            multi_layers: 2,
            max_len: 40,
            vocab_size: 0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn grid_size(&self) -> usize {
        self.image_size >> self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let stages = self.backbone_channels.len();
        if stages == 0 {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.image_size == 0 || self.image_size % (1 << stages) != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by 2^{stages}",
                self.image_size
            )));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len must be at least 3"));
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS {
            return Err(Error::config(format!(
                "vocabulary size {} leaves no words",
                self.vocab_size
            )));
        }
        if self.ffn_dim == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneFinetune {
    #[serde(rename = "frozen")]
    Frozen,
    #[serde(rename = "last2")]
    LastTwo,
    #[default]
    #[serde(rename = "full")]
    Full,
}

impl core::str::FromStr for BackboneFinetune {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "last2" => Ok(Self::LastTwo),
            "full" => Ok(Self::Full),
            _ => Err(Error::config(format!(
                "unknown backbone policy {s:?} (frozen, last2, full)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Graph handles for one (image pair, caption) training sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub e_con: Var,
    pub s_end: Var,
    pub logits: Var,
    /// Summed token negative log-likelihood, `1 x 1`.
    pub nll: Var,
    /// Number of predicted (non-pad) target tokens.
    pub tokens: usize,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, decoder) = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            let encoder = Encoder::new(&mut pb, &config);
            let decoder = Decoder::new(&mut pb, &config);
            (encoder, decoder)
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn apply_finetune(&mut self, policy: BackboneFinetune) {
        self.encoder.apply_finetune(&mut self.params, policy);
    }

    /// Teacher-forced forward pass. `ids` is an encoded caption, possibly
    /// padded; the decoder sees `start .. end` and predicts each next token.
    pub fn forward_sample(&self, g: &mut Graph, pair: &ImagePair, ids: &[u32]) -> Result<SampleVars> {
        let length = sequence_length(ids);
        if length < 2 {
            return Err(Error::Validation(format!(
                "pair {}: caption has no target tokens",
                pair.pair_id
            )));
        }
        let ids = &ids[..length];
        let enc = self.encoder.forward(g, pair)?;
        let dec = self.decoder.forward(g, ids, length, enc.e_cap)?;
        let targets: Vec<Option<usize>> = (0..length)
            .map(|i| ids.get(i + 1).map(|&t| t as usize))
            .collect();
        let nll = g.cross_entropy_sum(dec.logits, &targets);
        Ok(SampleVars {
            e_con: enc.e_con,
            s_end: dec.s_end,
            logits: dec.logits,
            nll,
            tokens: length - 1,
        })
    }

    pub fn encode_pair(&self, pair: &ImagePair) -> Result<EncoderOutput> {
        self.encoder.encode_pair(&self.params, pair)
    }

    /// Contrastive text vector `S_end` of an encoded caption.
    pub fn embed_caption(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let length = sequence_length(ids);
        self.decoder.text_embedding(&self.params, ids, length)
    }

    /// Greedy caption body tokens for a pair.
    pub fn caption(&self, pair: &ImagePair) -> Result<Vec<u32>> {
        let enc = self.encode_pair(pair)?;
        self.decoder
            .generate(&self.params, &enc.e_cap.data, self.config.max_len)
    }
}
