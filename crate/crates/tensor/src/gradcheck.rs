//! Central finite-difference verification of tape gradients.
//!
//! Callers provide leaf tensors and a closure building a scalar from them;
//! the harness backpropagates once, then perturbs sampled coordinates of
//! each leaf and compares the analytic gradient against the central
//! difference. Meant to run in the f64 shadow mode, where the default
//! epsilon 1e-3 and tolerance 1e-4 are meaningful.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Entries with |analytic| + |numeric| below this are exempt.
    pub dead_zone: f64,
    /// Cap on checked coordinates per input (evenly spaced); None = all.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            epsilon: 1e-3,
            tolerance: 1e-4,
            dead_zone: 1e-8,
            max_coords_per_input: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn eval_scalar<T, F>(inputs: &[Tensor<T>], build: &F) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[VarId]) -> Result<VarId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.constant(t)).collect();
    let root = build(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(TensorError::NotScalar { shape: tape.shape(root).to_vec() });
    }
    Ok(tape.value(root)[0].as_f64())
}

/// Compare analytic gradients of `build` against central finite differences
/// for every provided input tensor.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    build: F,
    settings: GradCheckSettings,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[VarId]) -> Result<VarId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs
        .iter()
        .map(|t| {
            let mut with = t.clone();
            with.requires_grad = true;
            tape.leaf(&with)
        })
        .collect();
    let root = build(&mut tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();

    let eps = settings.epsilon;
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = match settings.max_coords_per_input {
            Some(k) if n > k => (0..k).map(|t| t * n / k).collect(),
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let original = work[i].data()[c];
            work[i].data_mut()[c] = original + T::from_f64(eps);
            let plus = eval_scalar(&work, &build)?;
            work[i].data_mut()[c] = original - T::from_f64(eps);
            let minus = eval_scalar(&work, &build)?;
            work[i].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][c];
            let magnitude = a.abs() + numeric.abs();
            if magnitude < settings.dead_zone {
                continue;
            }
            let rel = (a - numeric).abs() / magnitude.max(settings.dead_zone);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(GradCheckReport { checked, max_rel_err: max_rel, worst })
}
