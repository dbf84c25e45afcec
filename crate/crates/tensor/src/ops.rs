//! Forward constructors for every differentiable primitive. Each method
//! validates shapes, computes the value, and records the op on the tape.

use rand::Rng;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::{roi_bin_taps, MhaWeights, Op, Tape, VarId};

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.same_shape("add", a, b)?;
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, "add", shape, value, needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.same_shape("sub", a, b)?;
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, "sub", shape, value, needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.same_shape("mul", a, b)?;
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, "mul", shape, value, needs))
    }

    pub fn scale(&mut self, x: VarId, factor: T) -> VarId {
        let value: Vec<T> = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_needs_grad(&[x]);
        self.push(Op::Scale { x, factor }, "scale", shape, value, needs)
    }

    /// x: [.., d] plus bias: [d], broadcast over leading dimensions.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, TensorError> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or(TensorError::EmptyInput { op: "add_bias" })?;
        if self.shape(bias) != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let rows = self.value(x).len() / dim;
        let bv = self.value(bias).to_vec();
        let value: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % dim])
            .collect();
        let needs = self.any_needs_grad(&[x, bias]);
        Ok(self.push(Op::AddBias { x, bias, rows, dim }, "add_bias", shape, value, needs))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_needs_grad(&[x]);
        self.push(Op::Relu { x }, "relu", shape, value, needs)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: T) -> VarId {
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_needs_grad(&[x]);
        self.push(Op::LeakyRelu { x, slope }, "leaky_relu", shape, value, needs)
    }

    /// Inverted-scaling dropout. Training-only: callers skip it in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: VarId,
        rate: f64,
        rng: &mut R,
    ) -> Result<VarId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} not in [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<bool> = (0..self.value(x).len())
            .map(|_| rng.gen::<f64>() >= rate)
            .collect();
        let value: Vec<T> = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &keep)| if keep { v * scale } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Dropout { x, mask, scale }, "dropout", shape, value, needs))
    }

    /// a: [m, k] times b: [k, n].
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, "matmul", vec![m, n], value, needs))
    }

    /// a: [m, k] times b-transposed with b: [n, k].
    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "matmul_tb", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let value = kernels::matmul_tb(self.value(a), self.value(b), m, k, n);
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(
            Op::MatmulTransposeB { a, b, m, k, n },
            "matmul_tb",
            vec![m, n],
            value,
            needs,
        ))
    }

    /// Row-wise softmax over the last dimension, stabilized by max-subtraction.
    pub fn softmax_lastdim(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(TensorError::EmptyInput { op: "softmax_lastdim" })?;
        if cols == 0 || self.value(x).is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax_lastdim" });
        }
        let rows = self.value(x).len() / cols;
        let xv = self.value(x);
        let mut value = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in value[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                let e = (v - max).exp_fast();
                *o = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for o in value[r * cols..(r + 1) * cols].iter_mut() {
                *o *= inv;
            }
        }
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Softmax { x, rows, cols }, "softmax_lastdim", shape, value, needs))
    }

    /// Per-row normalization over the last dimension, then affine by gain/bias.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: T,
    ) -> Result<VarId, TensorError> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or(TensorError::EmptyInput { op: "layer_norm" })?;
        if self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = self.value(x).len() / dim;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let inv_dim = T::one() / T::from_f64(dim as f64);
        let mut value = vec![T::zero(); rows * dim];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_dim;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_dim;
            let inv_std = T::one() / (var + eps).sqrt();
            for c in 0..dim {
                value[r * dim + c] = (row[c] - mean) * inv_std * gv[c] + bv[c];
            }
        }
        let needs = self.any_needs_grad(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, rows, dim, eps },
            "layer_norm",
            shape,
            value,
            needs,
        ))
    }

    /// Standard multi-head attention: per-head scaled dot-product attention
    /// over projected q/k/v, head outputs concatenated then output-projected.
    /// q: [Nq, d], k/v: [Nk, d].
    pub fn multi_head_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        weights: &MhaWeights,
    ) -> Result<VarId, TensorError> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sq[1] != sv[1] {
            return Err(TensorError::ShapeMismatch { op: "multi_head_attention", lhs: sq, rhs: sk });
        }
        if sk[0] != sv[0] {
            return Err(TensorError::ShapeMismatch { op: "multi_head_attention", lhs: sk, rhs: sv });
        }
        let dim = sq[1];
        if weights.heads == 0 || dim % weights.heads != 0 {
            return Err(TensorError::invalid(
                "multi_head_attention",
                format!("model dim {dim} not divisible by {} heads", weights.heads),
            ));
        }
        let head_dim = dim / weights.heads;
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());

        let qp = self.matmul(q, weights.wq)?;
        let qp = self.add_bias(qp, weights.bq)?;
        let kp = self.matmul(k, weights.wk)?;
        let kp = self.add_bias(kp, weights.bk)?;
        let vp = self.matmul(v, weights.wv)?;
        let vp = self.add_bias(vp, weights.bv)?;

        let merged = self.mha_core(qp, kp, vp, weights.heads, scale)?;
        let out = self.matmul(merged, weights.wo)?;
        self.add_bias(out, weights.bo)
    }

    /// Fused per-head scaled dot-product attention over already-projected
    /// inputs: q [nq, d], k/v [nk, d] with d split into `heads` slices.
    /// Output is the concatenation of head outputs, [nq, d].
    pub fn mha_core(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        scale: T,
    ) -> Result<VarId, TensorError> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(TensorError::ShapeMismatch { op: "mha_core", lhs: sq, rhs: sk });
        }
        let (nq, dim, nk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::invalid(
                "mha_core",
                format!("model dim {dim} not divisible by {heads} heads"),
            ));
        }
        let hd = dim / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut attn = vec![T::zero(); heads * nq * nk];
        let mut value = vec![T::zero(); nq * dim];
        // Per-head transposed key/value copies keep every inner loop a
        // contiguous nk-wide pass.
        let mut k_t = vec![T::zero(); hd * nk];
        let mut v_t = vec![T::zero(); hd * nk];
        for h in 0..heads {
            let off = h * hd;
            for j in 0..nk {
                for c in 0..hd {
                    k_t[c * nk + j] = kv[j * dim + off + c];
                    v_t[c * nk + j] = vv[j * dim + off + c];
                }
            }
            for i in 0..nq {
                let q_row = &qv[i * dim + off..i * dim + off + hd];
                let a_row = &mut attn[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for (c, &qc) in q_row.iter().enumerate() {
                    let k_row = &k_t[c * nk..(c + 1) * nk];
                    for (s, &kv_c) in a_row.iter_mut().zip(k_row.iter()) {
                        *s += qc * kv_c;
                    }
                }
                let mut max = T::neg_infinity();
                for s in a_row.iter() {
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in a_row.iter_mut() {
                    *s = (*s * scale - max * scale).exp_fast();
                    sum += *s;
                }
                let inv = T::one() / sum;
                for s in a_row.iter_mut() {
                    *s *= inv;
                }
                let out_row = &mut value[i * dim + off..i * dim + off + hd];
                for (c, o) in out_row.iter_mut().enumerate() {
                    let v_row = &v_t[c * nk..(c + 1) * nk];
                    let mut acc = T::zero();
                    for (&a, &vv_c) in a_row.iter().zip(v_row.iter()) {
                        acc += a * vv_c;
                    }
                    *o = acc;
                }
            }
        }
        let needs = self.any_needs_grad(&[q, k, v]);
        Ok(self.push(
            Op::MhaCore { q, k, v, heads, scale, attn },
            "mha_core",
            vec![nq, dim],
            value,
            needs,
        ))
    }

    /// Per-channel 2-D cross-correlation, stride 1, zero padding (s-1)/2.
    /// features: [h, w, d], kernel: [s, s, d] with odd s; output [h, w, d].
    pub fn depthwise_correlate(
        &mut self,
        features: VarId,
        kernel: VarId,
    ) -> Result<VarId, TensorError> {
        let fs = self.shape(features).to_vec();
        let ks = self.shape(kernel).to_vec();
        if fs.len() != 3 || ks.len() != 3 || ks[0] != ks[1] {
            return Err(TensorError::ShapeMismatch { op: "depthwise_correlate", lhs: fs, rhs: ks });
        }
        let (h, w, ch) = (fs[0], fs[1], fs[2]);
        let s = ks[0];
        if s % 2 == 0 {
            return Err(TensorError::invalid(
                "depthwise_correlate",
                format!("kernel spatial size {s} must be odd"),
            ));
        }
        if ks[2] != ch {
            return Err(TensorError::ShapeMismatch { op: "depthwise_correlate", lhs: fs, rhs: ks });
        }
        let pad = (s - 1) / 2;
        let (fv, kv) = (self.value(features), self.value(kernel));
        let mut value = vec![T::zero(); h * w * ch];
        for y in 0..h {
            for x in 0..w {
                let out = (y * w + x) * ch;
                for u in 0..s {
                    let fy = y as isize + u as isize - pad as isize;
                    if fy < 0 || fy >= h as isize {
                        continue;
                    }
                    for v in 0..s {
                        let fx = x as isize + v as isize - pad as isize;
                        if fx < 0 || fx >= w as isize {
                            continue;
                        }
                        let fo = (fy as usize * w + fx as usize) * ch;
                        let ko = (u * s + v) * ch;
                        for c in 0..ch {
                            value[out + c] += fv[fo + c] * kv[ko + c];
                        }
                    }
                }
            }
        }
        let needs = self.any_needs_grad(&[features, kernel]);
        Ok(self.push(
            Op::DepthwiseCorrelate { features, kernel, h, w, ch, s },
            "depthwise_correlate",
            fs,
            value,
            needs,
        ))
    }

    /// Elementwise maximum over n same-shape inputs. Gradient routes to the
    /// argmax input; ties go to the lowest index.
    pub fn max_over_set(&mut self, inputs: &[VarId]) -> Result<VarId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInput { op: "max_over_set" });
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &other in &inputs[1..] {
            self.same_shape("max_over_set", inputs[0], other)?;
        }
        let n = self.value(inputs[0]).len();
        let mut value = self.value(inputs[0]).to_vec();
        let mut argmax = vec![0u32; n];
        for (slot, &input) in inputs.iter().enumerate().skip(1) {
            let iv = self.value(input);
            for e in 0..n {
                if iv[e] > value[e] {
                    value[e] = iv[e];
                    argmax[e] = slot as u32;
                }
            }
        }
        let needs = self.any_needs_grad(inputs);
        Ok(self.push(
            Op::MaxOverSet { inputs: inputs.to_vec(), argmax },
            "max_over_set",
            shape,
            value,
            needs,
        ))
    }

    /// Bilinear RoI pooling of a normalized region into a fixed s*s*d tensor,
    /// sampling one point at each bin center.
    pub fn roi_pool(
        &mut self,
        features: VarId,
        region: [f64; 4],
        s: usize,
    ) -> Result<VarId, TensorError> {
        let fs = self.shape(features).to_vec();
        if fs.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "roi_pool", lhs: fs, rhs: vec![] });
        }
        let [x1, y1, x2, y2] = region;
        if !(x2 > x1 && y2 > y1) {
            return Err(TensorError::invalid(
                "roi_pool",
                format!("degenerate region [{x1}, {y1}, {x2}, {y2}]"),
            ));
        }
        if s == 0 {
            return Err(TensorError::invalid("roi_pool", "bin count must be positive"));
        }
        let (h, w, ch) = (fs[0], fs[1], fs[2]);
        let taps = roi_bin_taps(&region, h, w, s);
        let fv = self.value(features);
        let mut value = vec![T::zero(); s * s * ch];
        for (bin, t) in taps.iter().enumerate() {
            let w00 = T::from_f64((1.0 - t.wy) * (1.0 - t.wx));
            let w01 = T::from_f64((1.0 - t.wy) * t.wx);
            let w10 = T::from_f64(t.wy * (1.0 - t.wx));
            let w11 = T::from_f64(t.wy * t.wx);
            for c in 0..ch {
                value[bin * ch + c] = fv[(t.y0 * w + t.x0) * ch + c] * w00
                    + fv[(t.y0 * w + t.x1) * ch + c] * w01
                    + fv[(t.y1 * w + t.x0) * ch + c] * w10
                    + fv[(t.y1 * w + t.x1) * ch + c] * w11;
            }
        }
        let needs = self.any_needs_grad(&[features]);
        Ok(self.push(
            Op::RoiPool { features, h, w, ch, s, region },
            "roi_pool",
            vec![s, s, ch],
            value,
            needs,
        ))
    }

    /// Bilinear interpolation to a new spatial size (align-corners false).
    pub fn bilinear_resize(
        &mut self,
        x: VarId,
        out_h: usize,
        out_w: usize,
    ) -> Result<VarId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "bilinear_resize", lhs: xs, rhs: vec![] });
        }
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::invalid("bilinear_resize", "target extents must be positive"));
        }
        let (h, w, ch) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut value = vec![T::zero(); out_h * out_w * ch];
        for oy in 0..out_h {
            let gy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
            for ox in 0..out_w {
                let gx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
                let t = kernels::bilinear_taps(gy, gx, h, w);
                let w00 = T::from_f64((1.0 - t.wy) * (1.0 - t.wx));
                let w01 = T::from_f64((1.0 - t.wy) * t.wx);
                let w10 = T::from_f64(t.wy * (1.0 - t.wx));
                let w11 = T::from_f64(t.wy * t.wx);
                let out = (oy * out_w + ox) * ch;
                for c in 0..ch {
                    value[out + c] = xv[(t.y0 * w + t.x0) * ch + c] * w00
                        + xv[(t.y0 * w + t.x1) * ch + c] * w01
                        + xv[(t.y1 * w + t.x0) * ch + c] * w10
                        + xv[(t.y1 * w + t.x1) * ch + c] * w11;
                }
            }
        }
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(
            Op::BilinearResize { x, h, w, ch, out_h, out_w },
            "bilinear_resize",
            vec![out_h, out_w, ch],
            value,
            needs,
        ))
    }

    /// Dense 2-D convolution over channels-last input.
    /// input: [h, w, cin], weight: [kh, kw, cin, cout], bias: [cout].
    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId, TensorError> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 3 || ws.len() != 4 || ws[2] != is[2] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: is, rhs: ws });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom {
            h: is[0],
            w: is[1],
            cin: is[2],
            cout: ws[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
        };
        if self.shape(bias) != [geom.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![geom.cout],
            });
        }
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {}x{} larger than padded input", geom.kh, geom.kw),
            ));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let rows = oh * ow;
        let patch = geom.kh * geom.kw * geom.cin;
        let cols = kernels::im2col(self.value(input), &geom);
        let mut value = kernels::matmul(&cols, self.value(weight), rows, patch, geom.cout);
        let bv = self.value(bias);
        for r in 0..rows {
            for (o, &b) in value[r * geom.cout..(r + 1) * geom.cout]
                .iter_mut()
                .zip(bv.iter())
            {
                *o += b;
            }
        }
        let needs = self.any_needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv2d { input, weight, bias, geom },
            "conv2d",
            vec![oh, ow, geom.cout],
            value,
            needs,
        ))
    }

    /// Total sum reduced to a scalar of shape [1].
    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: T = self.value(x).iter().copied().sum();
        let needs = self.any_needs_grad(&[x]);
        self.push(Op::Sum { x }, "sum", vec![1], vec![total], needs)
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let total: T = self.value(x).iter().copied().sum();
        let value = vec![total / T::from_f64(n as f64)];
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Mean { x }, "mean", vec![1], value, needs))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: self.value(x).len() });
        }
        let value = self.value(x).to_vec();
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Reshape { x }, "reshape", shape.to_vec(), value, needs))
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose2d", lhs: xs, rhs: vec![] });
        }
        let (rows, cols) = (xs[0], xs[1]);
        let value = kernels::transpose(self.value(x), rows, cols);
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(
            Op::Transpose2d { x, rows, cols },
            "transpose2d",
            vec![cols, rows],
            value,
            needs,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total_axis = 0usize;
        for &input in inputs {
            let s = self.shape(input);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut value = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for &input in inputs {
            let ext = self.shape(input)[axis];
            let iv = self.value(input);
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let src = o * ext * inner;
                value[dst..dst + ext * inner].copy_from_slice(&iv[src..src + ext * inner]);
            }
            offset += ext;
        }
        let needs = self.any_needs_grad(inputs);
        Ok(self.push(
            Op::Concat { inputs: inputs.to_vec(), axis },
            "concat",
            shape,
            value,
            needs,
        ))
    }

    /// Contiguous slice along `axis`.
    pub fn slice(
        &mut self,
        x: VarId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<VarId, TensorError> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {xs:?}", start + len),
            ));
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let outer: usize = xs[..axis].iter().product();
        let total_axis = xs[axis];
        let xv = self.value(x);
        let mut value = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * total_axis + start) * inner;
            let dst = o * len * inner;
            value[dst..dst + len * inner].copy_from_slice(&xv[src..src + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let needs = self.any_needs_grad(&[x]);
        Ok(self.push(Op::Slice { x, axis, start, len }, "slice", shape, value, needs))
    }
}
