//! Trainable parameters and the small layer vocabulary the model is built
//! from. Parameters register themselves on a tape lazily during forward,
//! memoized by a process-unique key so shared weights (the recursive
//! adaptation blocks, the reused regression head) accumulate gradients
//! into one buffer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use loca_tensor::{ParamKey, Scalar, Tape, Tensor, TensorError, VarId};

static NEXT_PARAM_KEY: AtomicU64 = AtomicU64::new(1);

pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    key: ParamKey,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let mut value = value;
        value.requires_grad = true;
        Param {
            value,
            key: ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)),
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    /// Register on (or fetch from) the given tape.
    pub fn on(&self, tape: &mut Tape<T>) -> VarId {
        tape.param(self.key, &self.value)
    }
}

/// Uniform init in (-bound, bound); draws in f64 so the sequence of RNG
/// consumption is identical in f32 and f64 instantiations.
fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Visit every parameter with its hierarchical name, in declaration order.
/// The order defines the canonical parameter list used by the optimizer
/// and the checkpoint format.
pub trait ParamWalk<T: Scalar> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>));
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));
}

pub fn collect_named<T: Scalar, M: ParamWalk<T>>(module: &M, root: &str) -> Vec<(String, ParamKey)> {
    let mut out = Vec::new();
    module.walk(root, &mut |name, p| out.push((name, p.key())));
    out
}

/// Forward-pass context: training flag plus the RNG driving dropout masks.
pub struct Ctx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx {
            train: false,
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            train: true,
            rng: rand::SeedableRng::seed_from_u64(seed),
        }
    }
}

// ── Linear ──────────────────────────────────────────────────────────

pub struct Linear<T: Scalar> {
    pub weight: Param<T>, // [in, out]
    pub bias: Param<T>,   // [out]
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Linear {
            weight: Param::new(uniform_init(rng, &[inputs, outputs], bound)),
            bias: Param::new(uniform_init(rng, &[outputs], bound)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId, TensorError> {
        let w = self.weight.on(tape);
        let b = self.bias.on(tape);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

impl<T: Scalar> ParamWalk<T> for Linear<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ── Conv ────────────────────────────────────────────────────────────

pub struct Conv2dLayer<T: Scalar> {
    pub weight: Param<T>, // [kh, kw, cin, cout]
    pub bias: Param<T>,   // [cout]
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let bound = (1.0 / fan_in).sqrt();
        Conv2dLayer {
            weight: Param::new(uniform_init(rng, &[kernel, kernel, cin, cout], bound)),
            bias: Param::new(uniform_init(rng, &[cout], bound)),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId, TensorError> {
        let w = self.weight.on(tape);
        let b = self.bias.on(tape);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Scalar> ParamWalk<T> for Conv2dLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ── LayerNorm ───────────────────────────────────────────────────────

pub struct LayerNormLayer<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> LayerNormLayer<T> {
    pub fn new(dim: usize) -> Self {
        LayerNormLayer {
            gain: Param::new(Tensor::filled(&[dim], T::one())),
            bias: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId, TensorError> {
        let g = self.gain.on(tape);
        let b = self.bias.on(tape);
        tape.layer_norm(x, g, b, T::from_f64(1e-5))
    }
}

impl<T: Scalar> ParamWalk<T> for LayerNormLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ── Multi-head attention ────────────────────────────────────────────

pub struct MhaLayer<T: Scalar> {
    pub heads: usize,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

impl<T: Scalar> MhaLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        MhaLayer {
            heads,
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        q: VarId,
        k: VarId,
        v: VarId,
    ) -> Result<VarId, TensorError> {
        let weights = loca_tensor::MhaWeights {
            heads: self.heads,
            wq: self.wq.weight.on(tape),
            bq: self.wq.bias.on(tape),
            wk: self.wk.weight.on(tape),
            bk: self.wk.bias.on(tape),
            wv: self.wv.weight.on(tape),
            bv: self.wv.bias.on(tape),
            wo: self.wo.weight.on(tape),
            bo: self.wo.bias.on(tape),
        };
        tape.multi_head_attention(q, k, v, &weights)
    }
}

impl<T: Scalar> ParamWalk<T> for MhaLayer<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.wq.walk(&format!("{prefix}.q"), f);
        self.wk.walk(&format!("{prefix}.k"), f);
        self.wv.walk(&format!("{prefix}.v"), f);
        self.wo.walk(&format!("{prefix}.o"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.wq.walk_mut(&format!("{prefix}.q"), f);
        self.wk.walk_mut(&format!("{prefix}.k"), f);
        self.wv.walk_mut(&format!("{prefix}.v"), f);
        self.wo.walk_mut(&format!("{prefix}.o"), f);
    }
}

// ── Feed-forward ────────────────────────────────────────────────────

pub struct FeedForward<T: Scalar> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(rng, dim, hidden),
            outer: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: VarId) -> Result<VarId, TensorError> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, h)
    }
}

impl<T: Scalar> ParamWalk<T> for FeedForward<T> {
    fn walk(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.inner.walk(&format!("{prefix}.inner"), f);
        self.outer.walk(&format!("{prefix}.outer"), f);
    }
    fn walk_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.inner.walk_mut(&format!("{prefix}.inner"), f);
        self.outer.walk_mut(&format!("{prefix}.outer"), f);
    }
}

/// Fixed 2-D sinusoidal positional encoding over an h*w token grid:
/// half the channels encode the row index, half the column index, each as
/// interleaved sine/cosine at geometric frequencies.
pub fn sinusoidal_pos_enc<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 4 == 0, "positional encoding needs dim divisible by 4");
    let half = dim / 2;
    let pairs = half / 2;
    Tensor::from_fn(&[h * w, dim], |i| {
        let token = i / dim;
        let c = i % dim;
        let (pos, cc) = if c < half {
            ((token / w) as f64, c)
        } else {
            ((token % w) as f64, c - half)
        };
        let pair = cc / 2;
        let omega = 1.0 / 10000f64.powf(pair as f64 / pairs as f64);
        let angle = pos * omega;
        T::from_f64(if cc % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_keys_are_unique_and_memoized_per_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new(&mut rng, 3, 2);
        assert_ne!(lin.weight.key(), lin.bias.key());
        let mut tape = Tape::new();
        let a = lin.weight.on(&mut tape);
        let b = lin.weight.on(&mut tape);
        assert_eq!(a, b, "same key must map to the same node");
    }

    #[test]
    fn init_is_identical_across_scalar_types() {
        let mut rng32 = ChaCha8Rng::seed_from_u64(42);
        let mut rng64 = ChaCha8Rng::seed_from_u64(42);
        let a = Linear::<f32>::new(&mut rng32, 4, 4);
        let b = Linear::<f64>::new(&mut rng64, 4, 4);
        for (x, y) in a.weight.value.data().iter().zip(b.weight.value.data()) {
            assert_eq!(*x as f64, (*y as f32) as f64);
        }
    }

    #[test]
    fn pos_enc_distinguishes_rows_and_columns() {
        let pe = sinusoidal_pos_enc::<f64>(3, 4, 8);
        assert_eq!(pe.shape(), &[12, 8]);
        // Tokens in the same row share the row half of the encoding.
        let a = &pe.data()[0_usize..4]; // token (0,0), row part
        let b = &pe.data()[8 * 1..8 * 1 + 4]; // token (0,1), row part
        assert_eq!(a, b);
        // ... but differ in the column half.
        let ac = &pe.data()[4..8];
        let bc = &pe.data()[8 + 4..8 + 8];
        assert_ne!(ac, bc);
    }
}
