//! Object prototype extraction: exemplar shape and appearance queries are
//! fused with image-wide features by a recursive sequence of cross-attention
//! blocks into n object prototypes. A zero-shot path replaces the exemplar
//! queries with trainable objectness queries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use loca_tensor::{Scalar, Tape, Tensor, TensorError, VarId};

use crate::config::ModelConfig;
use crate::encoder::EncodedImage;
use crate::error::LocaError;
use crate::layers::{FeedForward, LayerNormLayer, Linear, MhaLayer, Param, ParamWalk};

/// Annotated exemplar bounding box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExemplarBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ExemplarBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, LocaError> {
        let b = ExemplarBox { x1, y1, x2, y2 };
        b.validate().map(|_| b)
    }

    pub fn validate(&self) -> Result<(), LocaError> {
        let inside = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| (0.0..=1.0).contains(v));
        if !inside || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(LocaError::config(format!(
                "invalid exemplar box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn region(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn flipped_horizontal(&self) -> Self {
        ExemplarBox {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMode {
    FewShot,
    ZeroShot,
}

/// The n adapted object prototypes plus every intermediate adaptation state
/// (retained for auxiliary supervision).
pub struct PrototypeSet<T: Scalar> {
    /// n materialized prototypes of shape [s, s, d].
    pub prototypes: Vec<Tensor<T>>,
    /// The same prototypes as tape nodes.
    pub proto_vars: Vec<VarId>,
    /// Adaptation states Q_1..Q_L as [n*s*s, d] tape nodes.
    pub intermediates: Vec<VarId>,
    pub mode: PrototypeMode,
}

impl<T: Scalar> PrototypeSet<T> {
    fn from_final(
        tape: &mut Tape<T>,
        intermediates: Vec<VarId>,
        n: usize,
        s: usize,
        dim: usize,
        mode: PrototypeMode,
    ) -> Result<Self, TensorError> {
        let last = *intermediates.last().expect("at least one iteration");
        let mut proto_vars = Vec::with_capacity(n);
        let mut prototypes = Vec::with_capacity(n);
        for i in 0..n {
            let rows = tape.slice(last, 0, i * s * s, s * s)?;
            let proto = tape.reshape(rows, &[s, s, dim])?;
            prototypes.push(tape.tensor(proto));
            proto_vars.push(proto);
        }
        Ok(PrototypeSet { prototypes, proto_vars, intermediates, mode })
    }

    pub fn len(&self) -> usize {
        self.proto_vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proto_vars.is_empty()
    }

    /// Split an intermediate state into n per-prototype [s, s, d] nodes.
    pub fn split_intermediate(
        &self,
        tape: &mut Tape<T>,
        level: usize,
        s: usize,
        dim: usize,
    ) -> Result<Vec<VarId>, TensorError> {
        let state = self.intermediates[level];
        let n = self.len();
        (0..n)
            .map(|i| {
                let rows = tape.slice(state, 0, i * s * s, s * s)?;
                tape.reshape(rows, &[s, s, dim])
            })
            .collect()
    }
}

/// Nonlinear map from an exemplar's (width, height) to an s*s*d shape query.
pub struct ShapeQueryNet<T: Scalar> {
    lin1: Linear<T>,
    lin2: Linear<T>,
    lin3: Linear<T>,
    proto_size: usize,
    dim: usize,
}

impl<T: Scalar> ShapeQueryNet<T> {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let s2d = cfg.proto_size * cfg.proto_size * cfg.channels;
        ShapeQueryNet {
            lin1: Linear::new(rng, 2, cfg.shape_hidden),
            lin2: Linear::new(rng, cfg.shape_hidden, cfg.channels),
            lin3: Linear::new(rng, cfg.channels, s2d),
            proto_size: cfg.proto_size,
            dim: cfg.channels,
        }
    }

    /// wh is a [1, 2] node holding (width, height); output is [s, s, d].
    pub fn forward(&self, tape: &mut Tape<T>, wh: VarId) -> Result<VarId, TensorError> {
        let x = self.lin1.forward(tape, wh)?;
        let x = tape.relu(x);
        let x = self.lin2.forward(tape, x)?;
        let x = tape.relu(x);
        let x = self.lin3.forward(tape, x)?;
        let x = tape.relu(x);
        let s = self.proto_size;
        tape.reshape(x, &[s, s, self.dim])
    }
}

impl<T: Scalar> ParamWalk<T> for ShapeQueryNet<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.lin1.walk(&format!("{prefix}.lin1"), f);
        self.lin2.walk(&format!("{prefix}.lin2"), f);
        self.lin3.walk(&format!("{prefix}.lin3"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.lin1.walk_mut(&format!("{prefix}.lin1"), f);
        self.lin2.walk_mut(&format!("{prefix}.lin2"), f);
        self.lin3.walk_mut(&format!("{prefix}.lin3"), f);
    }
}

/// One adaptation iteration's weights: exemplar cross-attention, image
/// cross-attention, and the feed-forward refinement, each pre-normed.
struct AdaptBlock<T: Scalar> {
    norm_exemplar: LayerNormLayer<T>,
    attn_exemplar: MhaLayer<T>,
    norm_image: LayerNormLayer<T>,
    attn_image: MhaLayer<T>,
    norm_ffn: LayerNormLayer<T>,
    ffn: FeedForward<T>,
}

impl<T: Scalar> AdaptBlock<T> {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.channels;
        AdaptBlock {
            norm_exemplar: LayerNormLayer::new(d),
            attn_exemplar: MhaLayer::new(rng, d, cfg.heads),
            norm_image: LayerNormLayer::new(d),
            attn_image: MhaLayer::new(rng, d, cfg.heads),
            norm_ffn: LayerNormLayer::new(d),
            ffn: FeedForward::new(rng, d, cfg.ffn_hidden),
        }
    }

    fn exemplar_attention(
        &self,
        tape: &mut Tape<T>,
        state: VarId,
        appearance: VarId,
    ) -> Result<VarId, TensorError> {
        let normed = self.norm_exemplar.forward(tape, state)?;
        let attended = self.attn_exemplar.forward(tape, normed, appearance, appearance)?;
        tape.add(attended, state)
    }

    fn image_attention(
        &self,
        tape: &mut Tape<T>,
        state: VarId,
        image_tokens: VarId,
        image_keys: VarId,
    ) -> Result<VarId, TensorError> {
        let normed = self.norm_image.forward(tape, state)?;
        let attended = self.attn_image.forward(tape, normed, image_keys, image_tokens)?;
        tape.add(attended, state)
    }

    fn refine(&self, tape: &mut Tape<T>, state: VarId) -> Result<VarId, TensorError> {
        let normed = self.norm_ffn.forward(tape, state)?;
        let ff = self.ffn.forward(tape, normed)?;
        tape.add(ff, state)
    }
}

impl<T: Scalar> ParamWalk<T> for AdaptBlock<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.norm_exemplar.walk(&format!("{prefix}.norm_exemplar"), f);
        self.attn_exemplar.walk(&format!("{prefix}.attn_exemplar"), f);
        self.norm_image.walk(&format!("{prefix}.norm_image"), f);
        self.attn_image.walk(&format!("{prefix}.attn_image"), f);
        self.norm_ffn.walk(&format!("{prefix}.norm_ffn"), f);
        self.ffn.walk(&format!("{prefix}.ffn"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.norm_exemplar.walk_mut(&format!("{prefix}.norm_exemplar"), f);
        self.attn_exemplar.walk_mut(&format!("{prefix}.attn_exemplar"), f);
        self.norm_image.walk_mut(&format!("{prefix}.norm_image"), f);
        self.attn_image.walk_mut(&format!("{prefix}.attn_image"), f);
        self.norm_ffn.walk_mut(&format!("{prefix}.norm_ffn"), f);
        self.ffn.walk_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Which first-block behavior the adaptation runs with. The alternates
/// exist for the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptVariant {
    /// Exemplar cross-attention every iteration.
    Full,
    /// First iteration replaces the exemplar attention with Q^A + Q^S.
    SimpleSum,
    /// Shape queries ignored: state starts from Q^A, exemplar attention
    /// skipped entirely.
    NoShape,
}

pub struct Ope<T: Scalar> {
    pub shape_net: ShapeQueryNet<T>,
    blocks: Vec<AdaptBlock<T>>,
    /// Trainable zero-shot queries, [n_zs * s * s, d].
    pub objectness: Param<T>,
    cfg: ModelConfig,
}

impl<T: Scalar> Ope<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let shape_net = ShapeQueryNet::new(rng, cfg);
        let block_count = if cfg.shared_adapt_weights { 1 } else { cfg.adapt_iters };
        let blocks = (0..block_count).map(|_| AdaptBlock::new(rng, cfg)).collect();
        let s2 = cfg.proto_size * cfg.proto_size;
        let objectness = Param::new(Tensor::from_fn(
            &[cfg.zero_shot_queries * s2, cfg.channels],
            |_| T::from_f64(rng.gen_range(-0.1..0.1)),
        ));
        Ope { shape_net, blocks, objectness, cfg: cfg.clone() }
    }

    fn block(&self, iter: usize) -> &AdaptBlock<T> {
        if self.cfg.shared_adapt_weights {
            &self.blocks[0]
        } else {
            &self.blocks[iter]
        }
    }

    /// Shape query from a box: a function of (width, height) only.
    pub fn shape_query(
        &self,
        tape: &mut Tape<T>,
        exemplar: &ExemplarBox,
    ) -> Result<VarId, LocaError> {
        exemplar.validate()?;
        let wh = Tensor::from_vec(
            &[1, 2],
            vec![T::from_f64(exemplar.width()), T::from_f64(exemplar.height())],
        )
        .expect("2-element tensor");
        let wh = tape.constant(&wh);
        Ok(self.shape_net.forward(tape, wh)?)
    }

    /// Appearance query: image features pooled from the box into s*s*d,
    /// shape-agnostic by construction.
    pub fn appearance_query(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        exemplar: &ExemplarBox,
    ) -> Result<VarId, LocaError> {
        exemplar.validate()?;
        Ok(tape.roi_pool(encoded.var, exemplar.region(), self.cfg.proto_size)?)
    }

    /// Flatten per-exemplar [s, s, d] queries into one [n*s*s, d] matrix.
    fn stack_queries(&self, tape: &mut Tape<T>, queries: &[VarId]) -> Result<VarId, TensorError> {
        let s2 = self.cfg.proto_size * self.cfg.proto_size;
        let d = self.cfg.channels;
        let rows: Vec<VarId> = queries
            .iter()
            .map(|&q| tape.reshape(q, &[s2, d]))
            .collect::<Result<_, _>>()?;
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        tape.concat(&rows, 0)
    }

    /// Image tokens [h*w, d] and, when enabled, the same tokens with the
    /// positional encoding added (used as attention keys).
    fn image_tokens(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        pos_enc: Option<&Tensor<T>>,
    ) -> Result<(VarId, VarId), TensorError> {
        let side = self.cfg.feature_size;
        let tokens = tape.reshape(encoded.var, &[side * side, self.cfg.channels])?;
        let keys = match pos_enc {
            Some(pe) => {
                let pe = tape.constant(pe);
                tape.add(tokens, pe)?
            }
            None => tokens,
        };
        Ok((tokens, keys))
    }

    fn run_iterations(
        &self,
        tape: &mut Tape<T>,
        initial: VarId,
        appearance: Option<VarId>,
        variant: AdaptVariant,
        tokens: VarId,
        keys: VarId,
    ) -> Result<Vec<VarId>, TensorError> {
        let iters = self.cfg.adapt_iters;
        let mut state = initial;
        let mut intermediates = Vec::with_capacity(iters);
        for l in 0..iters {
            let block = self.block(l);
            let after_exemplar = match (variant, appearance) {
                (AdaptVariant::NoShape, _) | (_, None) => state,
                (AdaptVariant::SimpleSum, Some(app)) if l == 0 => tape.add(app, state)?,
                (_, Some(app)) => block.exemplar_attention(tape, state, app)?,
            };
            let after_image = block.image_attention(tape, after_exemplar, tokens, keys)?;
            state = block.refine(tape, after_image)?;
            intermediates.push(state);
        }
        Ok(intermediates)
    }

    /// Few-shot adaptation (the default `Full` variant); `SimpleSum` and
    /// `NoShape` select the ablation behaviors.
    pub fn iterative_adapt(
        &self,
        tape: &mut Tape<T>,
        shape_queries: &[VarId],
        appearance_queries: &[VarId],
        encoded: &EncodedImage<T>,
        pos_enc: Option<&Tensor<T>>,
        variant: AdaptVariant,
    ) -> Result<PrototypeSet<T>, LocaError> {
        if shape_queries.len() != appearance_queries.len() || shape_queries.is_empty() {
            return Err(LocaError::config(format!(
                "query count mismatch: {} shape vs {} appearance",
                shape_queries.len(),
                appearance_queries.len()
            )));
        }
        let n = shape_queries.len();
        let appearance = self.stack_queries(tape, appearance_queries)?;
        let initial = match variant {
            AdaptVariant::NoShape => appearance,
            _ => self.stack_queries(tape, shape_queries)?,
        };
        let (tokens, keys) = self.image_tokens(tape, encoded, pos_enc)?;
        let intermediates =
            self.run_iterations(tape, initial, Some(appearance), variant, tokens, keys)?;
        Ok(PrototypeSet::from_final(
            tape,
            intermediates,
            n,
            self.cfg.proto_size,
            self.cfg.channels,
            PrototypeMode::FewShot,
        )?)
    }

    /// Zero-shot adaptation: the exemplar attention is skipped and the
    /// state starts from the trainable objectness queries.
    pub fn zero_shot_adapt(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        pos_enc: Option<&Tensor<T>>,
    ) -> Result<PrototypeSet<T>, LocaError> {
        let initial = self.objectness.on(tape);
        let (tokens, keys) = self.image_tokens(tape, encoded, pos_enc)?;
        let intermediates =
            self.run_iterations(tape, initial, None, AdaptVariant::Full, tokens, keys)?;
        Ok(PrototypeSet::from_final(
            tape,
            intermediates,
            self.cfg.zero_shot_queries,
            self.cfg.proto_size,
            self.cfg.channels,
            PrototypeMode::ZeroShot,
        )?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

impl<T: Scalar> ParamWalk<T> for Ope<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.shape_net.walk(&format!("{prefix}.shape_net"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.walk(&format!("{prefix}.adapt{i}"), f);
        }
        f(format!("{prefix}.objectness"), &self.objectness);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.shape_net.walk_mut(&format!("{prefix}.shape_net"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.walk_mut(&format!("{prefix}.adapt{i}"), f);
        }
        f(format!("{prefix}.objectness"), &mut self.objectness);
    }
}
