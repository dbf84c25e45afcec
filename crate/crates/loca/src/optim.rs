//! Adaptive-moment optimizer with decoupled weight decay and global-norm
//! gradient clipping, over the model's canonical parameter order.

use loca_tensor::Scalar;

/// Per-parameter first/second moment buffers.
struct Moments<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct AdamW<T: Scalar> {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(learning_rate: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Allocate moment buffers on first use.
    pub fn ensure_state(&mut self, sizes: &[usize]) {
        if self.moments.is_empty() {
            self.moments = sizes
                .iter()
                .map(|&n| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] })
                .collect();
        }
        assert_eq!(self.moments.len(), sizes.len(), "optimizer state/parameter mismatch");
    }

    /// Advance the step counter; call once per mini-batch before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter in the canonical order. Gradients must already
    /// be averaged and clipped; `None` leaves the parameter frozen.
    pub fn update_one(&mut self, index: usize, param: &mut [T], grad: Option<&[T]>) {
        let Some(grad) = grad else { return };
        let moments = &mut self.moments[index];
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), moments.m.len());
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.learning_rate);
        let wd = T::from_f64(self.learning_rate * self.weight_decay);
        let eps = T::from_f64(self.eps);
        for i in 0..param.len() {
            let g = grad[i];
            moments.m[i] = b1 * moments.m[i] + (one - b1) * g;
            moments.v[i] = b2 * moments.v[i] + (one - b2) * g * g;
            let m_hat = moments.m[i] / bias1;
            let v_hat = moments.v[i] / bias2;
            // Decoupled weight decay, applied directly to the weight.
            param[i] = param[i] - wd * param[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// Convenience single-call update for flat parameter lists.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<Vec<T>>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        self.ensure_state(&sizes);
        self.begin_step();
        for (i, (param, grad)) in params.iter_mut().zip(grads.iter()).enumerate() {
            self.update_one(i, param, grad.as_deref());
        }
    }

    /// Serialize moments in canonical order: (m, v) per parameter.
    pub fn export_moments(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.moments.iter().map(|mo| (mo.m.clone(), mo.v.clone())).collect()
    }

    pub fn import_moments(&mut self, moments: Vec<(Vec<T>, Vec<T>)>, step: u64) {
        self.moments = moments.into_iter().map(|(m, v)| Moments { m, v }).collect();
        self.step = step;
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}
