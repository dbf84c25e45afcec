//! Image encoder: a small strided-conv backbone, multi-scale fusion with a
//! 1x1 channel projection, and a global self-attention block over the
//! h*w token grid.

use rand_chacha::ChaCha8Rng;

use loca_tensor::{Scalar, Tape, Tensor, TensorError, VarId};

use crate::config::ModelConfig;
use crate::error::LocaError;
use crate::layers::{
    sinusoidal_pos_enc, Conv2dLayer, Ctx, FeedForward, LayerNormLayer, MhaLayer, Param, ParamWalk,
};

/// Encoded image features with provenance.
pub struct EncodedImage<T: Scalar> {
    /// Materialized [h, w, d] feature map.
    pub features: Tensor<T>,
    /// The same features as a node of the producing tape.
    pub var: VarId,
    pub source_id: u64,
    pub config_hash: u64,
}

struct BackboneBlock<T: Scalar> {
    entry: Conv2dLayer<T>, // stride-2
    inner: Conv2dLayer<T>, // stride-1
}

impl<T: Scalar> BackboneBlock<T> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        BackboneBlock {
            entry: Conv2dLayer::new(rng, 3, cin, cout, 2, 1),
            inner: Conv2dLayer::new(rng, 3, cout, cout, 1, 1),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId, TensorError> {
        let x = self.entry.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.inner.forward(tape, x)?;
        Ok(tape.relu(x))
    }
}

impl<T: Scalar> ParamWalk<T> for BackboneBlock<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.entry.walk(&format!("{prefix}.entry"), f);
        self.inner.walk(&format!("{prefix}.inner"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.entry.walk_mut(&format!("{prefix}.entry"), f);
        self.inner.walk_mut(&format!("{prefix}.inner"), f);
    }
}

struct EncoderLayer<T: Scalar> {
    norm_attn: LayerNormLayer<T>,
    attn: MhaLayer<T>,
    norm_ffn: LayerNormLayer<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, ffn_hidden: usize) -> Self {
        EncoderLayer {
            norm_attn: LayerNormLayer::new(dim),
            attn: MhaLayer::new(rng, dim, heads),
            norm_ffn: LayerNormLayer::new(dim),
            ffn: FeedForward::new(rng, dim, ffn_hidden),
        }
    }

    /// Pre-norm layer; positional encoding feeds queries and keys only.
    fn forward(
        &self,
        tape: &mut Tape<T>,
        x: VarId,
        pos: Option<VarId>,
        dropout: f64,
        ctx: &mut Ctx,
    ) -> Result<VarId, TensorError> {
        let normed = self.norm_attn.forward(tape, x)?;
        let qk = match pos {
            Some(p) => tape.add(normed, p)?,
            None => normed,
        };
        let attended = self.attn.forward(tape, qk, qk, normed)?;
        let attended = maybe_dropout(tape, attended, dropout, ctx)?;
        let x = tape.add(x, attended)?;

        let normed = self.norm_ffn.forward(tape, x)?;
        let ff = self.ffn.forward(tape, normed)?;
        let ff = maybe_dropout(tape, ff, dropout, ctx)?;
        tape.add(x, ff)
    }
}

impl<T: Scalar> ParamWalk<T> for EncoderLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.norm_attn.walk(&format!("{prefix}.norm_attn"), f);
        self.attn.walk(&format!("{prefix}.attn"), f);
        self.norm_ffn.walk(&format!("{prefix}.norm_ffn"), f);
        self.ffn.walk(&format!("{prefix}.ffn"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.norm_attn.walk_mut(&format!("{prefix}.norm_attn"), f);
        self.attn.walk_mut(&format!("{prefix}.attn"), f);
        self.norm_ffn.walk_mut(&format!("{prefix}.norm_ffn"), f);
        self.ffn.walk_mut(&format!("{prefix}.ffn"), f);
    }
}

pub(crate) fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: VarId,
    rate: f64,
    ctx: &mut Ctx,
) -> Result<VarId, TensorError> {
    if ctx.train && rate > 0.0 {
        tape.dropout(x, rate, &mut ctx.rng)
    } else {
        Ok(x)
    }
}

pub struct Encoder<T: Scalar> {
    blocks: Vec<BackboneBlock<T>>,
    projection: Conv2dLayer<T>,
    layers: Vec<EncoderLayer<T>>,
    pos_enc: Option<Tensor<T>>,
    cfg: ModelConfig,
    config_hash: u64,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let widths = cfg.backbone_widths;
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for &w in &widths {
            blocks.push(BackboneBlock::new(rng, cin, w));
            cin = w;
        }
        let fused_channels = widths[1] + widths[2] + widths[3];
        let projection = Conv2dLayer::new(rng, 1, fused_channels, cfg.channels, 1, 0);
        let layers = (0..cfg.attn_layers)
            .map(|_| EncoderLayer::new(rng, cfg.channels, cfg.heads, cfg.ffn_hidden))
            .collect();
        let pos_enc = cfg
            .pos_enc
            .then(|| sinusoidal_pos_enc(cfg.feature_size, cfg.feature_size, cfg.channels));
        Encoder {
            blocks,
            projection,
            layers,
            pos_enc,
            cfg: cfg.clone(),
            config_hash: cfg.hash(),
        }
    }

    /// Run a single backbone block on an arbitrary [h, w, c] input; used by
    /// the gradient-check suite to isolate one stage.
    pub fn backbone_block_forward(
        &self,
        tape: &mut Tape<T>,
        x: VarId,
        index: usize,
    ) -> Result<VarId, LocaError> {
        Ok(self.blocks[index].forward(tape, x)?)
    }

    /// Multi-scale maps at strides 4, 8 and 16 (blocks 2..4 of the backbone).
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<T>,
        image: VarId,
    ) -> Result<Vec<VarId>, LocaError> {
        let expect = [self.cfg.input_size, self.cfg.input_size, 3];
        if tape.shape(image) != expect {
            return Err(LocaError::Tensor(TensorError::ShapeMismatch {
                op: "backbone_forward",
                lhs: tape.shape(image).to_vec(),
                rhs: expect.to_vec(),
            }));
        }
        let mut scales = Vec::with_capacity(3);
        let mut x = image;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x)?;
            if i >= 1 {
                scales.push(x);
            }
        }
        Ok(scales)
    }

    /// Resize all scales to (h, w), concatenate channels, project to d.
    pub fn fuse_and_project(
        &self,
        tape: &mut Tape<T>,
        scales: &[VarId],
    ) -> Result<VarId, LocaError> {
        if scales.len() != 3 {
            return Err(LocaError::Tensor(TensorError::invalid(
                "fuse_and_project",
                format!("expected 3 scales, got {}", scales.len()),
            )));
        }
        let side = self.cfg.feature_size;
        let mut resized = Vec::with_capacity(3);
        for &scale in scales {
            resized.push(tape.bilinear_resize(scale, side, side)?);
        }
        let stacked = tape.concat(&resized, 2)?;
        Ok(self.projection.forward(tape, stacked)?)
    }

    /// Global self-attention over the token grid; returns [h, w, d].
    pub fn global_self_attention(
        &self,
        tape: &mut Tape<T>,
        x: VarId,
        ctx: &mut Ctx,
    ) -> Result<VarId, LocaError> {
        let side = self.cfg.feature_size;
        let dim = self.cfg.channels;
        let mut tokens = tape.reshape(x, &[side * side, dim])?;
        let pos = match &self.pos_enc {
            Some(pe) => Some(tape.constant(pe)),
            None => None,
        };
        for layer in &self.layers {
            tokens = layer.forward(tape, tokens, pos, self.cfg.dropout, ctx)?;
        }
        Ok(tape.reshape(tokens, &[side, side, dim])?)
    }

    /// Full encode: backbone, fusion, attention.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        image: VarId,
        source_id: u64,
        ctx: &mut Ctx,
    ) -> Result<EncodedImage<T>, LocaError> {
        let scales = self.backbone_forward(tape, image)?;
        let fused = self.fuse_and_project(tape, &scales)?;
        let var = self.global_self_attention(tape, fused, ctx)?;
        Ok(EncodedImage {
            features: tape.tensor(var),
            var,
            source_id,
            config_hash: self.config_hash,
        })
    }

    pub fn positional_encoding(&self) -> Option<&Tensor<T>> {
        self.pos_enc.as_ref()
    }
}

impl<T: Scalar> ParamWalk<T> for Encoder<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.walk(&format!("{prefix}.backbone{i}"), f);
        }
        self.projection.walk(&format!("{prefix}.projection"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.walk(&format!("{prefix}.attn{i}"), f);
        }
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.walk_mut(&format!("{prefix}.backbone{i}"), f);
        }
        self.projection.walk_mut(&format!("{prefix}.projection"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.walk_mut(&format!("{prefix}.attn{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_encoder() -> Encoder<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Encoder::new(&ModelConfig::toy(), &mut rng)
    }

    #[test]
    fn backbone_scales_have_stride_4_8_16_extents() {
        let enc = toy_encoder();
        let mut tape = Tape::new();
        let img = tape.constant(&Tensor::zeros(&[32, 32, 3]));
        let scales = enc.backbone_forward(&mut tape, img).unwrap();
        assert_eq!(tape.shape(scales[0])[..2], [8, 8]);
        assert_eq!(tape.shape(scales[1])[..2], [4, 4]);
        assert_eq!(tape.shape(scales[2])[..2], [2, 2]);
    }

    #[test]
    fn backbone_rejects_wrong_input_shape() {
        let enc = toy_encoder();
        let mut tape = Tape::new();
        let img = tape.constant(&Tensor::<f32>::zeros(&[16, 16, 3]));
        assert!(enc.backbone_forward(&mut tape, img).is_err());
    }

    #[test]
    fn zero_image_encodes_to_finite_features() {
        let enc = toy_encoder();
        let mut tape = Tape::new();
        let img = tape.constant(&Tensor::zeros(&[32, 32, 3]));
        let encoded = enc
            .encode(&mut tape, img, 0, &mut Ctx::eval())
            .unwrap();
        assert_eq!(encoded.features.shape(), &[4, 4, 16]);
        assert!(encoded.features.is_finite());
    }

    #[test]
    fn fuse_rejects_wrong_scale_count() {
        let enc = toy_encoder();
        let mut tape = Tape::new();
        let img = tape.constant(&Tensor::zeros(&[32, 32, 3]));
        let scales = enc.backbone_forward(&mut tape, img).unwrap();
        assert!(enc.fuse_and_project(&mut tape, &scales[..2]).is_err());
    }

    #[test]
    fn eval_mode_encoding_is_deterministic() {
        let enc = toy_encoder();
        let run = || {
            let mut tape = Tape::new();
            let img = tape.constant(&Tensor::from_fn(&[32, 32, 3], |i| (i as f32 * 0.37).sin().abs()));
            let encoded = enc.encode(&mut tape, img, 0, &mut Ctx::eval()).unwrap();
            encoded.features.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
