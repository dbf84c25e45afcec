use std::collections::HashMap;

use crate::error::TensorError;
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) u32);

/// Stable identity of a trainable parameter across tapes. Registering the
/// same key twice on one tape returns the same [`VarId`], so weight sharing
/// accumulates gradients into a single buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(pub u64);

/// Dense conv parameters carried by the Conv2d tape entry.
pub type ConvSpec = ConvGeom;

/// Projection weights consumed by [`Tape::multi_head_attention`]. All ids
/// must already live on the same tape; `wq..wo` are `[d, d]`, biases `[d]`.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights {
    pub heads: usize,
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
}

/// One recorded operation. Parents always precede the node on the tape,
/// so the record order is a topological order of the graph.
#[derive(Debug, Clone)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, factor: T },
    AddBias { x: VarId, bias: VarId, rows: usize, dim: usize },
    Relu { x: VarId },
    LeakyRelu { x: VarId, slope: T },
    Dropout { x: VarId, mask: Vec<bool>, scale: T },
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    MatmulTransposeB { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    Softmax { x: VarId, rows: usize, cols: usize },
    /// Per-head scaled dot-product attention over projected q/k/v.
    /// Saves the attention probabilities [heads * nq, nk] for backward.
    MhaCore { q: VarId, k: VarId, v: VarId, heads: usize, scale: T, attn: Vec<T> },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, rows: usize, dim: usize, eps: T },
    DepthwiseCorrelate { features: VarId, kernel: VarId, h: usize, w: usize, ch: usize, s: usize },
    MaxOverSet { inputs: Vec<VarId>, argmax: Vec<u32> },
    RoiPool { features: VarId, h: usize, w: usize, ch: usize, s: usize, region: [f64; 4] },
    BilinearResize { x: VarId, h: usize, w: usize, ch: usize, out_h: usize, out_w: usize },
    Conv2d { input: VarId, weight: VarId, bias: VarId, geom: ConvGeom },
    Sum { x: VarId },
    Mean { x: VarId },
    Reshape { x: VarId },
    Transpose2d { x: VarId, rows: usize, cols: usize },
    Concat { inputs: Vec<VarId>, axis: usize },
    Slice { x: VarId, axis: usize, start: usize, len: usize },
}

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub needs_grad: bool,
}

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. One tape serves one forward/backward cycle.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_ids: HashMap<ParamKey, VarId>,
    backward_done: bool,
    visited: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_ids: HashMap::new(),
            backward_done: false,
            visited: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        op: Op<T>,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        needs_grad: bool,
    ) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            name,
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    pub(crate) fn any_needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0 as usize].needs_grad)
    }

    /// Register a leaf from a tensor, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> VarId {
        self.push(
            Op::Leaf,
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    /// Register a non-differentiated constant leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> VarId {
        self.push(Op::Leaf, "leaf", t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn leaf_from(
        &mut self,
        shape: &[usize],
        data: Vec<T>,
        requires_grad: bool,
    ) -> Result<VarId, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, "leaf", shape.to_vec(), data, requires_grad))
    }

    /// Register a trainable parameter, memoized by key: re-registering the
    /// same key returns the previous id so shared weights share one node.
    pub fn param(&mut self, key: ParamKey, t: &Tensor<T>) -> VarId {
        if let Some(&id) = self.param_ids.get(&key) {
            return id;
        }
        let id = self.push(Op::Leaf, "param", t.shape().to_vec(), t.data().to_vec(), true);
        self.param_ids.insert(key, id);
        id
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id.0 as usize].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0 as usize].shape
    }

    pub fn node_name(&self, id: VarId) -> &'static str {
        self.nodes[id.0 as usize].name
    }

    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads[id.0 as usize].as_deref()
    }

    pub fn grad_of(&self, key: ParamKey) -> Option<&[T]> {
        self.param_ids.get(&key).and_then(|&id| self.grad(id))
    }

    pub fn param_id(&self, key: ParamKey) -> Option<VarId> {
        self.param_ids.get(&key).copied()
    }

    /// Copy a value (and its gradient, if present) out of the tape.
    pub fn tensor(&self, id: VarId) -> Tensor<T> {
        let node = &self.nodes[id.0 as usize];
        let mut t = Tensor::from_vec(&node.shape, node.value.clone())
            .expect("tape node shape/value always consistent");
        t.grad = self.grads[id.0 as usize].clone();
        t
    }

    /// First recorded value containing a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, VarId)> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.value.iter().any(|v| !v.is_finite()) {
                Some((node.name, VarId(i as u32)))
            } else {
                None
            }
        })
    }

    /// Number of nodes whose backward rule ran in the last `backward` call.
    pub fn last_visit_count(&self) -> usize {
        self.visited
    }

    /// Op names of all recorded nodes, in record order.
    pub fn node_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.name)
    }

    /// Reverse sweep from a scalar root. Each recorded operation is
    /// processed at most once, in reverse record order; the root's own
    /// gradient is seeded to 1.
    pub fn backward(&mut self, root: VarId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::invalid("backward", "tape already swept"));
        }
        let root_idx = root.0 as usize;
        if self.nodes[root_idx].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[root_idx].shape.clone(),
            });
        }
        self.backward_done = true;
        self.grads[root_idx] = Some(vec![T::one()]);

        self.visited = 0;
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() {
                continue;
            }
            // Take the upstream gradient out, propagate, then restore it.
            // Parents always have smaller indices, so no aliasing occurs.
            let g = self.grads[idx].take().expect("checked above");
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
            self.visited += 1;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, contribution: &[T]) {
        let idx = id.0 as usize;
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contribution.iter()) {
                    *e += c;
                }
            }
            None => self.grads[idx] = Some(contribution.to_vec()),
        }
    }

    fn accumulate_with(&mut self, id: VarId, len: usize, fill: impl FnOnce(&mut [T])) {
        let idx = id.0 as usize;
        if !self.nodes[idx].needs_grad {
            return;
        }
        let buf = self.grads[idx].get_or_insert_with(|| vec![T::zero(); len]);
        fill(buf);
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0 as usize].needs_grad
    }

    fn apply_backward(&mut self, idx: usize, g: &[T]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }

            Op::Sub { a, b } => {
                self.accumulate(a, g);
                self.accumulate_with(b, g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o -= gv;
                    }
                });
            }

            Op::Mul { a, b } => {
                if self.needs(a) {
                    let db: Vec<T> = g
                        .iter()
                        .zip(self.nodes[b.0 as usize].value.iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, &db);
                }
                if self.needs(b) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.nodes[a.0 as usize].value.iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, &da);
                }
            }

            Op::Scale { x, factor } => {
                self.accumulate_with(x, g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o += gv * factor;
                    }
                });
            }

            Op::AddBias { x, bias, rows, dim } => {
                self.accumulate(x, g);
                self.accumulate_with(bias, dim, |buf| {
                    for r in 0..rows {
                        for (o, &gv) in buf.iter_mut().zip(g[r * dim..(r + 1) * dim].iter()) {
                            *o += gv;
                        }
                    }
                });
            }

            Op::Relu { x } => {
                let xv = &self.nodes[x.0 as usize].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[x.0 as usize].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * slope })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Dropout { x, mask, scale } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &keep)| if keep { gv * scale } else { T::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::Matmul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0 as usize].value;
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_grad_a(g, bv, &mut da, m, k, n);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0 as usize].value;
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_grad_b(av, g, &mut db, m, k, n);
                    self.accumulate(b, &db);
                }
            }

            Op::MatmulTransposeB { a, b, m, k, n } => {
                if self.needs(a) {
                    let bv = &self.nodes[b.0 as usize].value;
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_acc(g, bv, &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0 as usize].value;
                    let mut db = vec![T::zero(); n * k];
                    kernels::matmul_ta_acc(g, av, &mut db, n, m, k);
                    self.accumulate(b, &db);
                }
            }

            Op::Softmax { x, rows, cols } => {
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot += g[base + c] * y[base + c];
                    }
                    for c in 0..cols {
                        dx[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::MhaCore { q, k, v, heads, scale, attn } => {
                let qv = &self.nodes[q.0 as usize].value;
                let kv = &self.nodes[k.0 as usize].value;
                let vv = &self.nodes[v.0 as usize].value;
                let dim = self.nodes[q.0 as usize].shape[1];
                let nq = self.nodes[q.0 as usize].shape[0];
                let nk = self.nodes[k.0 as usize].shape[0];
                let hd = dim / heads;
                let mut dq = vec![T::zero(); nq * dim];
                let mut dk = vec![T::zero(); nk * dim];
                let mut dv = vec![T::zero(); nk * dim];
                // Transposed per-head buffers keep inner loops nk-wide.
                let mut k_t = vec![T::zero(); hd * nk];
                let mut v_t = vec![T::zero(); hd * nk];
                let mut dk_t = vec![T::zero(); hd * nk];
                let mut dv_t = vec![T::zero(); hd * nk];
                let mut dattn = vec![T::zero(); nk];
                for h in 0..heads {
                    let off = h * hd;
                    for j in 0..nk {
                        for c in 0..hd {
                            k_t[c * nk + j] = kv[j * dim + off + c];
                            v_t[c * nk + j] = vv[j * dim + off + c];
                        }
                    }
                    dk_t.iter_mut().for_each(|x| *x = T::zero());
                    dv_t.iter_mut().for_each(|x| *x = T::zero());
                    for i in 0..nq {
                        let a_row = &attn[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let g_row = &g[i * dim + off..i * dim + off + hd];
                        // dattn = sum_c g_c * v_t[c]; dv_t[c] += g_c * attn.
                        dattn.iter_mut().for_each(|x| *x = T::zero());
                        for (c, &gc) in g_row.iter().enumerate() {
                            let v_row = &v_t[c * nk..(c + 1) * nk];
                            for (da, &vc) in dattn.iter_mut().zip(v_row.iter()) {
                                *da += gc * vc;
                            }
                            let dv_row = &mut dv_t[c * nk..(c + 1) * nk];
                            for (o, &a) in dv_row.iter_mut().zip(a_row.iter()) {
                                *o += gc * a;
                            }
                        }
                        let mut dot_sum = T::zero();
                        for (&da, &a) in dattn.iter().zip(a_row.iter()) {
                            dot_sum += da * a;
                        }
                        // Softmax VJP then scaled score gradients, reusing
                        // the dattn buffer for dscores.
                        for (ds, &a) in dattn.iter_mut().zip(a_row.iter()) {
                            *ds = a * (*ds - dot_sum) * scale;
                        }
                        let q_row = &qv[i * dim + off..i * dim + off + hd];
                        let dq_row = &mut dq[i * dim + off..i * dim + off + hd];
                        for (c, dq_c) in dq_row.iter_mut().enumerate() {
                            let k_row = &k_t[c * nk..(c + 1) * nk];
                            let mut acc = T::zero();
                            for (&ds, &kc) in dattn.iter().zip(k_row.iter()) {
                                acc += ds * kc;
                            }
                            *dq_c += acc;
                            let dk_row = &mut dk_t[c * nk..(c + 1) * nk];
                            let qc = q_row[c];
                            for (o, &ds) in dk_row.iter_mut().zip(dattn.iter()) {
                                *o += ds * qc;
                            }
                        }
                    }
                    for j in 0..nk {
                        for c in 0..hd {
                            dk[j * dim + off + c] += dk_t[c * nk + j];
                            dv[j * dim + off + c] += dv_t[c * nk + j];
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }

            Op::LayerNorm { x, gain, bias, rows, dim, eps } => {
                let xv = &self.nodes[x.0 as usize].value;
                let gv = &self.nodes[gain.0 as usize].value;
                let inv_dim = T::one() / T::from_f64(dim as f64);
                let mut dx = vec![T::zero(); rows * dim];
                let mut dgain = vec![T::zero(); dim];
                let mut dbias = vec![T::zero(); dim];
                for r in 0..rows {
                    let row = &xv[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
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

                    // dxhat = g * gain; dx = inv_std*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = gr[c] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[c] += gr[c] * xhat;
                        dbias[c] += gr[c];
                    }
                    let m1 = sum_dxhat * inv_dim;
                    let m2 = sum_dxhat_xhat * inv_dim;
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = gr[c] * gv[c];
                        dx[r * dim + c] = inv_std * (dxhat - m1 - xhat * m2);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }

            Op::DepthwiseCorrelate { features, kernel, h, w, ch, s } => {
                let pad = (s - 1) / 2;
                if self.needs(kernel) {
                    let fv = &self.nodes[features.0 as usize].value;
                    let mut dk = vec![T::zero(); s * s * ch];
                    for u in 0..s {
                        for v in 0..s {
                            for y in 0..h {
                                let fy = y as isize + u as isize - pad as isize;
                                if fy < 0 || fy >= h as isize {
                                    continue;
                                }
                                for x in 0..w {
                                    let fx = x as isize + v as isize - pad as isize;
                                    if fx < 0 || fx >= w as isize {
                                        continue;
                                    }
                                    let go = (y * w + x) * ch;
                                    let fo = (fy as usize * w + fx as usize) * ch;
                                    let ko = (u * s + v) * ch;
                                    for c in 0..ch {
                                        dk[ko + c] += g[go + c] * fv[fo + c];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(kernel, &dk);
                }
                if self.needs(features) {
                    let kv = &self.nodes[kernel.0 as usize].value;
                    let mut df = vec![T::zero(); h * w * ch];
                    for y in 0..h {
                        for x in 0..w {
                            let go = (y * w + x) * ch;
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
                                        df[fo + c] += g[go + c] * kv[ko + c];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(features, &df);
                }
            }

            Op::MaxOverSet { inputs, argmax } => {
                for (slot, input) in inputs.iter().enumerate() {
                    if !self.needs(*input) {
                        continue;
                    }
                    self.accumulate_with(*input, g.len(), |buf| {
                        for (e, (&which, &gv)) in argmax.iter().zip(g.iter()).enumerate() {
                            if which as usize == slot {
                                buf[e] += gv;
                            }
                        }
                    });
                }
            }

            Op::RoiPool { features, h, w, ch, s, region } => {
                if !self.needs(features) {
                    return;
                }
                let taps = roi_bin_taps(&region, h, w, s);
                self.accumulate_with(features, h * w * ch, |buf| {
                    for (bin, t) in taps.iter().enumerate() {
                        let go = bin * ch;
                        let w00 = T::from_f64((1.0 - t.wy) * (1.0 - t.wx));
                        let w01 = T::from_f64((1.0 - t.wy) * t.wx);
                        let w10 = T::from_f64(t.wy * (1.0 - t.wx));
                        let w11 = T::from_f64(t.wy * t.wx);
                        for c in 0..ch {
                            let gv = g[go + c];
                            buf[(t.y0 * w + t.x0) * ch + c] += gv * w00;
                            buf[(t.y0 * w + t.x1) * ch + c] += gv * w01;
                            buf[(t.y1 * w + t.x0) * ch + c] += gv * w10;
                            buf[(t.y1 * w + t.x1) * ch + c] += gv * w11;
                        }
                    }
                });
            }

            Op::BilinearResize { x, h, w, ch, out_h, out_w } => {
                if !self.needs(x) {
                    return;
                }
                self.accumulate_with(x, h * w * ch, |buf| {
                    for oy in 0..out_h {
                        let gy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
                        for ox in 0..out_w {
                            let gx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
                            let t = kernels::bilinear_taps(gy, gx, h, w);
                            let go = (oy * out_w + ox) * ch;
                            let w00 = T::from_f64((1.0 - t.wy) * (1.0 - t.wx));
                            let w01 = T::from_f64((1.0 - t.wy) * t.wx);
                            let w10 = T::from_f64(t.wy * (1.0 - t.wx));
                            let w11 = T::from_f64(t.wy * t.wx);
                            for c in 0..ch {
                                let gv = g[go + c];
                                buf[(t.y0 * w + t.x0) * ch + c] += gv * w00;
                                buf[(t.y0 * w + t.x1) * ch + c] += gv * w01;
                                buf[(t.y1 * w + t.x0) * ch + c] += gv * w10;
                                buf[(t.y1 * w + t.x1) * ch + c] += gv * w11;
                            }
                        }
                    }
                });
            }

            Op::Conv2d { input, weight, bias, geom } => {
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let rows = oh * ow;
                let patch = geom.kh * geom.kw * geom.cin;
                if self.needs(bias) {
                    self.accumulate_with(bias, geom.cout, |buf| {
                        for r in 0..rows {
                            for (o, &gv) in buf
                                .iter_mut()
                                .zip(g[r * geom.cout..(r + 1) * geom.cout].iter())
                            {
                                *o += gv;
                            }
                        }
                    });
                }
                if self.needs(weight) {
                    let cols = kernels::im2col(&self.nodes[input.0 as usize].value, &geom);
                    let mut dw = vec![T::zero(); patch * geom.cout];
                    kernels::matmul_grad_b(&cols, g, &mut dw, rows, patch, geom.cout);
                    self.accumulate(weight, &dw);
                }
                if self.needs(input) {
                    // dcols = g @ w^T, axpy form over the wide patch axis.
                    let wv = &self.nodes[weight.0 as usize].value;
                    let mut dcols = vec![T::zero(); rows * patch];
                    kernels::matmul_grad_a(g, wv, &mut dcols, rows, patch, geom.cout);
                    self.accumulate_with(input, geom.h * geom.w * geom.cin, |buf| {
                        kernels::col2im_acc(&dcols, &geom, buf);
                    });
                }
            }

            Op::Sum { x } => {
                let n = self.nodes[x.0 as usize].value.len();
                self.accumulate_with(x, n, |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }

            Op::Mean { x } => {
                let n = self.nodes[x.0 as usize].value.len();
                let scale = g[0] / T::from_f64(n as f64);
                self.accumulate_with(x, n, |buf| {
                    for o in buf.iter_mut() {
                        *o += scale;
                    }
                });
            }

            Op::Reshape { x } => {
                self.accumulate(x, g);
            }

            Op::Transpose2d { x, rows, cols } => {
                // Gradient of transpose is the transpose of the gradient;
                // g has shape [cols, rows].
                let dx = kernels::transpose(g, cols, rows);
                self.accumulate(x, &dx);
            }

            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let total_axis = out_shape[axis];
                let mut offset = 0usize;
                for input in inputs {
                    let ext = self.nodes[input.0 as usize].shape[axis];
                    if self.needs(input) {
                        let mut dx = vec![T::zero(); outer * ext * inner];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * ext * inner;
                            dx[dst..dst + ext * inner]
                                .copy_from_slice(&g[src..src + ext * inner]);
                        }
                        self.accumulate(input, &dx);
                    }
                    offset += ext;
                }
            }

            Op::Slice { x, axis, start, len } => {
                let in_shape = self.nodes[x.0 as usize].shape.clone();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..axis].iter().product();
                let total_axis = in_shape[axis];
                self.accumulate_with(x, outer * total_axis * inner, |buf| {
                    for o in 0..outer {
                        let dst = (o * total_axis + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                });
            }
        }
    }
}

/// Bilinear taps for the s*s RoI bin centers of a normalized region over an
/// h*w feature grid. Integer grid coordinates sit on pixel centers.
pub(crate) fn roi_bin_taps(
    region: &[f64; 4],
    h: usize,
    w: usize,
    s: usize,
) -> Vec<kernels::BilinearTaps> {
    let [x1, y1, x2, y2] = *region;
    let (bw, bh) = ((x2 - x1) * w as f64, (y2 - y1) * h as f64);
    let (ox, oy) = (x1 * w as f64, y1 * h as f64);
    let mut taps = Vec::with_capacity(s * s);
    for i in 0..s {
        let cy = oy + (i as f64 + 0.5) * bh / s as f64 - 0.5;
        for j in 0..s {
            let cx = ox + (j as f64 + 0.5) * bw / s as f64 - 0.5;
            taps.push(kernels::bilinear_taps(cy, cx, h, w));
        }
    }
    taps
}
