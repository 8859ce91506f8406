//! Bi-temporal image-pair encoder.
//!
//! Both images go through the same convolutional backbone (siamese), receive
//! a shared learnable positional grid, and are mixed by stacked
//! self/cross-attention layers whose weights are shared between the two
//! streams. The two streams are fused by channel concatenation plus a
//! per-location cosine mask, projected back to `D` channels and refined by a
//! residual block. The result `E_cap` feeds the caption decoder; a
//! single-query attention pool collapses it into the contrastive vector
//! `E_con`.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::dataset::{Image, ImagePair};
use crate::error::{Error, Result};
use crate::model::{BackboneFinetune, ModelConfig};
use crate::nn::{attend, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Mat;

/// A spatial grid of feature vectors stored as `(h*w) x D`, row-major over
/// `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub data: Mat,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.data.row(y * self.w + x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub e_cap: FeatureGrid,
    pub e_con: Vec<f64>,
}

/// Graph handles produced by a differentiable encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub e_cap: Var,
    pub e_con: Var,
}

#[derive(Clone, Debug)]
pub struct HsaLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl HsaLayer {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope(name);
        Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", cfg.d_model, cfg.heads),
            norm1: LayerNorm::new(&mut s, "norm1", cfg.d_model),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", cfg.d_model, cfg.heads),
            norm2: LayerNorm::new(&mut s, "norm2", cfg.d_model),
            ffn: FeedForward::new(&mut s, "ffn", cfg.d_model, cfg.ffn_dim),
            norm3: LayerNorm::new(&mut s, "norm3", cfg.d_model),
        }
    }

    /// One layer applied to both streams with the same weights: self
    /// attention within each image, cross attention to the other image,
    /// then a feed-forward block; post-norm residuals around each.
    pub fn forward(&self, g: &mut Graph, a: Var, b: Var) -> (Var, Var) {
        let sa = |g: &mut Graph, x: Var| {
            let y = self.self_attn.forward(g, x, x, false);
            let y = g.add(x, y);
            self.norm1.forward(g, y)
        };
        let a1 = sa(g, a);
        let b1 = sa(g, b);
        let ca = |g: &mut Graph, x: Var, other: Var| {
            let y = self.cross_attn.forward(g, x, other, false);
            let y = g.add(x, y);
            self.norm2.forward(g, y)
        };
        let a2 = ca(g, a1, b1);
        let b2 = ca(g, b1, a1);
        let ff = |g: &mut Graph, x: Var| {
            let y = self.ffn.forward(g, x);
            let y = g.add(x, y);
            self.norm3.forward(g, y)
        };
        (ff(g, a2), ff(g, b2))
    }
}

/// Single learned query attending over all grid tokens.
#[derive(Clone, Debug)]
pub struct AttentivePool {
    pub query: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentivePool {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            query: s.normal("query", 1, d, 1.0 / libm::sqrt(d as f64), false),
            key: Linear::new(&mut s, "key", d, d),
            value: Linear::new(&mut s, "value", d, d),
            output: Linear::new(&mut s, "output", d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Var {
        let q = g.param(self.query);
        let k = self.key.forward(g, tokens);
        let v = self.value.forward(g, tokens);
        let pooled = attend(g, q, k, v, self.heads, false);
        self.output.forward(g, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub reduce: Conv2d,
    pub spatial: Conv2d,
    pub expand: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Conv2d>,
    pub projection: Linear,
    pub positional: ParamId,
    pub hsa: Vec<HsaLayer>,
    pub fuse_projection: Conv2d,
    pub residual: ResidualBlock,
    pub pool: AttentivePool,
    image_size: usize,
    grid: usize,
    d_model: usize,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut s = pb.scope("encoder");
        let d = cfg.d_model;
        let mut stages = Vec::with_capacity(cfg.backbone_channels.len());
        let mut c_in = 3;
        for (i, &c_out) in cfg.backbone_channels.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            stages.push(Conv2d::new(&mut s, &name, c_in, c_out, 3, 2, 1, true));
            c_in = c_out;
        }
        let projection = Linear::new(&mut s, "backbone.projection", c_in, d);
        let grid = cfg.grid_size();
        let positional = s.normal("positional", grid * grid, d, 0.02, false);
        let hsa = (0..cfg.hsa_layers)
            .map(|i| HsaLayer::new(&mut s, &format!("hsa{i}"), cfg))
            .collect();
        let fuse_projection = Conv2d::new(&mut s, "fuse_projection", 2 * d, d, 1, 1, 0, false);
        let residual = ResidualBlock {
            reduce: Conv2d::new(&mut s, "residual.conv1", d, d, 1, 1, 0, true),
            spatial: Conv2d::new(&mut s, "residual.conv2", d, d, 3, 1, 1, true),
            expand: Conv2d::new(&mut s, "residual.conv3", d, d, 1, 1, 0, false),
        };
        let pool = AttentivePool::new(&mut s, "pool", d, cfg.heads);
        Self {
            stages,
            projection,
            positional,
            hsa,
            fuse_projection,
            residual,
            pool,
            image_size: cfg.image_size,
            grid,
            d_model: d,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    /// Parameters of backbone stage `i`.
    pub fn stage_params(&self, i: usize) -> impl Iterator<Item = ParamId> {
        self.stages[i].linear.params()
    }

    pub fn apply_finetune(&self, store: &mut ParamStore, policy: BackboneFinetune) {
        let n = self.stages.len();
        for i in 0..n {
            let trainable = match policy {
                BackboneFinetune::Full => true,
                BackboneFinetune::LastTwo => i + 2 >= n,
                BackboneFinetune::Frozen => false,
            };
            for p in self.stage_params(i) {
                store.set_trainable(p, trainable);
            }
        }
    }

    /// Siamese convolutional feature extractor followed by a linear head
    /// to `D` channels: `H x W x 3 -> (h*w) x D`.
    pub fn backbone_forward(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::shape(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height, image.width, self.image_size, self.image_size
            )));
        }
        let mut x = g.input(image.to_mat());
        let (mut h, mut w) = (image.height, image.width);
        for stage in &self.stages {
            let (y, nh, nw) = stage.forward(g, x, h, w);
            x = g.relu(y);
            h = nh;
            w = nw;
        }
        debug_assert_eq!((h, w), (self.grid, self.grid));
        Ok(self.projection.forward(g, x))
    }

    pub fn add_positional(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let pos = g.param(self.positional);
        add_positional(g, features, pos)
    }

    pub fn hierarchical_self_attention(&self, g: &mut Graph, f1: Var, f2: Var) -> Result<(Var, Var)> {
        if g.shape(f1) != g.shape(f2) {
            return Err(Error::shape("HSA inputs must have equal shapes"));
        }
        let (mut a, mut b) = (f1, f2);
        for layer in &self.hsa {
            (a, b) = layer.forward(g, a, b);
        }
        Ok((a, b))
    }

    /// `C = conv1x1(F_fus)`, `E_cap = ReLU(ResBlock(C) + C)`.
    pub fn project_residual(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let hw = self.grid * self.grid;
        if g.shape(fused) != (hw, 2 * self.d_model) {
            return Err(Error::shape(format!(
                "fused grid is {:?}, expected ({hw}, {})",
                g.shape(fused),
                2 * self.d_model
            )));
        }
        let (n, gs) = (self.grid, self.grid);
        let (c, _, _) = self.fuse_projection.forward(g, fused, n, gs);
        let (r, _, _) = self.residual.reduce.forward(g, c, n, gs);
        let r = g.relu(r);
        let (r, _, _) = self.residual.spatial.forward(g, r, n, gs);
        let r = g.relu(r);
        let (r, _, _) = self.residual.expand.forward(g, r, n, gs);
        let sum = g.add(r, c);
        Ok(g.relu(sum))
    }

    pub fn attentive_pool(&self, g: &mut Graph, e_cap: Var) -> Result<Var> {
        if g.shape(e_cap).1 != self.d_model {
            return Err(Error::shape("pooling input has wrong channel count"));
        }
        Ok(self.pool.forward(g, e_cap))
    }

    pub fn forward(&self, g: &mut Graph, pair: &ImagePair) -> Result<EncoderVars> {
        pair.validate()?;
        let f1 = self.backbone_forward(g, &pair.before)?;
        let f2 = self.backbone_forward(g, &pair.after)?;
        let f1 = self.add_positional(g, f1)?;
        let f2 = self.add_positional(g, f2)?;
        let (i1, i2) = self.hierarchical_self_attention(g, f1, f2)?;
        let fused = fuse(g, i1, i2)?;
        let e_cap = self.project_residual(g, fused)?;
        let e_con = self.attentive_pool(g, e_cap)?;
        Ok(EncoderVars { e_cap, e_con })
    }

    pub fn encode_pair(&self, store: &ParamStore, pair: &ImagePair) -> Result<EncoderOutput> {
        let mut g = Graph::new(store);
        let vars = self.forward(&mut g, pair)?;
        Ok(EncoderOutput {
            e_cap: FeatureGrid {
                h: self.grid,
                w: self.grid,
                data: g.value(vars.e_cap).clone(),
            },
            e_con: g.value(vars.e_con).data().to_vec(),
        })
    }
}

pub fn add_positional(g: &mut Graph, features: Var, positional: Var) -> Result<Var> {
    if g.shape(features) != g.shape(positional) {
        return Err(Error::shape(format!(
            "features {:?} vs positional grid {:?}",
            g.shape(features),
            g.shape(positional)
        )));
    }
    Ok(g.add(features, positional))
}

/// `[I1; I2] + Cos(I1, I2)`: channel concatenation with the per-location
/// cosine similarity broadcast over all `2D` channels.
pub fn fuse(g: &mut Graph, i1: Var, i2: Var) -> Result<Var> {
    if g.shape(i1) != g.shape(i2) {
        return Err(Error::shape("fusion inputs must have equal shapes"));
    }
    let cat = g.concat_cols(&[i1, i2]);
    let mask = g.row_cosine(i1, i2);
    Ok(g.add_col(cat, mask))
}
