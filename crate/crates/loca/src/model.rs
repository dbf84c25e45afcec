//! Full counting model: encode, extract prototypes, correlate each
//! prototype with the image features, fuse responses by per-element max,
//! and regress the density map.

use rand_chacha::ChaCha8Rng;

use loca_tensor::{Scalar, Tape, Tensor, TensorError, VarId};

use crate::config::ModelConfig;
use crate::density::DensityMap;
use crate::encoder::{EncodedImage, Encoder};
use crate::error::LocaError;
use crate::layers::{Conv2dLayer, Ctx, Param, ParamWalk};
use crate::ope::{AdaptVariant, ExemplarBox, Ope, PrototypeMode, PrototypeSet};

/// How many exemplars an inference consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountingMode {
    Few,
    One,
    Zero,
}

impl CountingMode {
    pub fn parse(s: &str) -> Result<Self, LocaError> {
        match s {
            "few" => Ok(CountingMode::Few),
            "one" => Ok(CountingMode::One),
            "zero" => Ok(CountingMode::Zero),
            other => Err(LocaError::config(format!("unknown mode {other:?} (few|one|zero)"))),
        }
    }

    pub fn exemplar_count(&self) -> usize {
        match self {
            CountingMode::Few => 3,
            CountingMode::One => 1,
            CountingMode::Zero => 0,
        }
    }

    /// The exemplars an inference in this mode actually consumes.
    pub fn select<'a>(&self, boxes: &'a [ExemplarBox]) -> &'a [ExemplarBox] {
        &boxes[..self.exemplar_count().min(boxes.len())]
    }
}

/// Architecture ablations; `Full` is the real model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Full,
    /// Shape queries removed; adaptation starts from appearance queries.
    NoShape,
    /// First-iteration exemplar attention replaced by elementwise sum.
    SimpleSum,
    /// Prototype extraction removed; prototypes are the pooled features.
    NoOpe,
}

impl ModelVariant {
    pub fn parse(s: &str) -> Result<Self, LocaError> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "no_shape" => Ok(ModelVariant::NoShape),
            "simple_sum" => Ok(ModelVariant::SimpleSum),
            "no_ope" => Ok(ModelVariant::NoOpe),
            other => Err(LocaError::config(format!(
                "unknown variant {other:?} (full|no_shape|simple_sum|no_ope)"
            ))),
        }
    }
}

/// Density regression head: three [3x3 conv, leaky ReLU, 2x bilinear
/// upsample] blocks, then a 1x1 conv with a final leaky ReLU. The leaky
/// activation permits slightly negative densities on untrained nets;
/// counts are reported unclamped unless the caller opts in.
struct DensityHead<T: Scalar> {
    convs: [Conv2dLayer<T>; 3],
    final_conv: Conv2dLayer<T>,
    slope: f64,
}

impl<T: Scalar> DensityHead<T> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2, w3] = cfg.decoder_widths;
        let mut final_conv = Conv2dLayer::new(rng, 1, w3, 1, 1, 0);
        // Start the density output on the linear side of the final leaky
        // activation: once outputs collapse below zero the 0.01 slope
        // starves the whole decoder of gradient and training stalls at
        // the all-zero prediction.
        final_conv.bias.value.data_mut()[0] = T::from_f64(0.1);
        DensityHead {
            convs: [
                Conv2dLayer::new(rng, 3, cfg.channels, w1, 1, 1),
                Conv2dLayer::new(rng, 3, w1, w2, 1, 1),
                Conv2dLayer::new(rng, 3, w2, w3, 1, 1),
            ],
            final_conv,
            slope: 0.01,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, fused: VarId) -> Result<VarId, TensorError> {
        let slope = T::from_f64(self.slope);
        let mut x = fused;
        for conv in &self.convs {
            x = conv.forward(tape, x)?;
            x = tape.leaky_relu(x, slope);
            let shape = tape.shape(x).to_vec();
            x = tape.bilinear_resize(x, shape[0] * 2, shape[1] * 2)?;
        }
        x = self.final_conv.forward(tape, x)?;
        x = tape.leaky_relu(x, slope);
        let shape = tape.shape(x).to_vec();
        tape.reshape(x, &[shape[0], shape[1]])
    }
}

impl<T: Scalar> ParamWalk<T> for DensityHead<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.walk(&format!("{prefix}.conv{i}"), f);
        }
        self.final_conv.walk(&format!("{prefix}.final"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.walk_mut(&format!("{prefix}.conv{i}"), f);
        }
        self.final_conv.walk_mut(&format!("{prefix}.final"), f);
    }
}

/// One full forward pass, kept on its tape so losses can extend the graph.
pub struct ForwardOutput<T: Scalar> {
    pub encoded: EncodedImage<T>,
    pub prototypes: PrototypeSet<T>,
    /// Final density map node, [H_IN, W_IN].
    pub main_map: VarId,
    /// Density maps regressed from intermediate adaptation states
    /// (iterations 1..L-1), for auxiliary supervision.
    pub aux_maps: Vec<VarId>,
}

pub struct LocaModel<T: Scalar> {
    pub encoder: Encoder<T>,
    pub ope: Ope<T>,
    head: DensityHead<T>,
    pub cfg: ModelConfig,
}

impl<T: Scalar> LocaModel<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, LocaError> {
        cfg.validate()?;
        Ok(LocaModel {
            encoder: Encoder::new(cfg, rng),
            ope: Ope::new(cfg, rng),
            head: DensityHead::new(cfg, rng),
            cfg: cfg.clone(),
        })
    }

    /// Depth-wise correlate every prototype against the encoded features.
    pub fn correlate_all(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        prototypes: &[VarId],
    ) -> Result<Vec<VarId>, LocaError> {
        if prototypes.is_empty() {
            return Err(LocaError::Tensor(TensorError::EmptyInput { op: "correlate_all" }));
        }
        prototypes
            .iter()
            .map(|&p| Ok(tape.depthwise_correlate(encoded.var, p)?))
            .collect()
    }

    /// Per-channel, per-pixel max over the n response tensors.
    pub fn fuse(&self, tape: &mut Tape<T>, responses: &[VarId]) -> Result<VarId, LocaError> {
        Ok(tape.max_over_set(responses)?)
    }

    /// Regress a fused response tensor into an [H_IN, W_IN] density map.
    pub fn regress_density(&self, tape: &mut Tape<T>, fused: VarId) -> Result<VarId, LocaError> {
        let side = self.cfg.feature_size;
        let expect = [side, side, self.cfg.channels];
        if tape.shape(fused) != expect {
            return Err(LocaError::Tensor(TensorError::ShapeMismatch {
                op: "regress_density",
                lhs: tape.shape(fused).to_vec(),
                rhs: expect.to_vec(),
            }));
        }
        Ok(self.head.forward(tape, fused)?)
    }

    fn decode_map(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        prototypes: &[VarId],
    ) -> Result<VarId, LocaError> {
        let responses = self.correlate_all(tape, encoded, prototypes)?;
        let fused = self.fuse(tape, &responses)?;
        self.regress_density(tape, fused)
    }

    fn extract_prototypes(
        &self,
        tape: &mut Tape<T>,
        encoded: &EncodedImage<T>,
        boxes: &[ExemplarBox],
        variant: ModelVariant,
    ) -> Result<PrototypeSet<T>, LocaError> {
        let pos = self.encoder.positional_encoding();
        if boxes.is_empty() {
            return self.ope.zero_shot_adapt(tape, encoded, pos);
        }
        if variant == ModelVariant::NoOpe {
            // Prototypes are the RoI-pooled features themselves; nothing is
            // adapted, so there are no intermediate states to supervise.
            let mut proto_vars = Vec::with_capacity(boxes.len());
            let mut prototypes = Vec::with_capacity(boxes.len());
            for b in boxes {
                let q = self.ope.appearance_query(tape, encoded, b)?;
                prototypes.push(tape.tensor(q));
                proto_vars.push(q);
            }
            return Ok(PrototypeSet {
                prototypes,
                proto_vars,
                intermediates: Vec::new(),
                mode: PrototypeMode::FewShot,
            });
        }
        let adapt_variant = match variant {
            ModelVariant::Full => AdaptVariant::Full,
            ModelVariant::NoShape => AdaptVariant::NoShape,
            ModelVariant::SimpleSum => AdaptVariant::SimpleSum,
            ModelVariant::NoOpe => unreachable!("handled above"),
        };
        let mut shape_qs = Vec::with_capacity(boxes.len());
        let mut app_qs = Vec::with_capacity(boxes.len());
        for b in boxes {
            shape_qs.push(self.ope.shape_query(tape, b)?);
            app_qs.push(self.ope.appearance_query(tape, encoded, b)?);
        }
        self.ope
            .iterative_adapt(tape, &shape_qs, &app_qs, encoded, pos, adapt_variant)
    }

    /// Full forward pass. An empty box list selects the zero-shot path.
    /// `with_aux` additionally regresses a density map from every
    /// intermediate adaptation state except the last.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        image: VarId,
        boxes: &[ExemplarBox],
        variant: ModelVariant,
        with_aux: bool,
        source_id: u64,
        ctx: &mut Ctx,
    ) -> Result<ForwardOutput<T>, LocaError> {
        let size = self.cfg.input_size;
        let image = if tape.shape(image) == [size, size, 3] {
            image
        } else {
            tape.bilinear_resize(image, size, size)?
        };
        let encoded = self.encoder.encode(tape, image, source_id, ctx)?;
        let prototypes = self.extract_prototypes(tape, &encoded, boxes, variant)?;
        let main_map = self.decode_map(tape, &encoded, &prototypes.proto_vars)?;

        let mut aux_maps = Vec::new();
        if with_aux && !prototypes.intermediates.is_empty() {
            let (s, d) = (self.cfg.proto_size, self.cfg.channels);
            for level in 0..prototypes.intermediates.len() - 1 {
                let protos = prototypes.split_intermediate(tape, level, s, d)?;
                aux_maps.push(self.decode_map(tape, &encoded, &protos)?);
            }
        }
        Ok(ForwardOutput { encoded, prototypes, main_map, aux_maps })
    }

    /// Inference: returns the density map and its count (unclamped).
    pub fn predict(
        &self,
        image: &Tensor<T>,
        boxes: &[ExemplarBox],
    ) -> Result<(DensityMap<T>, f64), LocaError> {
        let out = self.predict_with_variant(image, boxes, ModelVariant::Full)?;
        Ok(out)
    }

    pub fn predict_with_variant(
        &self,
        image: &Tensor<T>,
        boxes: &[ExemplarBox],
        variant: ModelVariant,
    ) -> Result<(DensityMap<T>, f64), LocaError> {
        for b in boxes {
            b.validate()?;
        }
        let mut tape = Tape::new();
        let img = tape.constant(image);
        let mut ctx = Ctx::eval();
        let out = self.forward(&mut tape, img, boxes, variant, false, 0, &mut ctx)?;
        let map = DensityMap::new(tape.tensor(out.main_map))?;
        let count = map.count();
        Ok((map, count))
    }
}

impl<T: Scalar> ParamWalk<T> for LocaModel<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.encoder.walk(&format!("{prefix}.encoder"), f);
        self.ope.walk(&format!("{prefix}.ope"), f);
        self.head.walk(&format!("{prefix}.head"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.encoder.walk_mut(&format!("{prefix}.encoder"), f);
        self.ope.walk_mut(&format!("{prefix}.ope"), f);
        self.head.walk_mut(&format!("{prefix}.head"), f);
    }
}
