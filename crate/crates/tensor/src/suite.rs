//! Runnable finite-difference suite covering every differentiable
//! primitive, in f64 shadow mode. The CLI exposes it and the integration
//! tests assert on it, so the two always agree on what "verified" means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::gradcheck::{check_gradients, GradCheckReport, GradCheckSettings};
use crate::tape::{MhaWeights, Tape, VarId};
use crate::tensor::Tensor;

pub struct PrimitiveCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduce to a scalar through fixed random weights so that gradients stay
/// informative even for outputs with per-row constraints (softmax rows).
fn weighted_sum(
    tape: &mut Tape<f64>,
    out: VarId,
    weights: &Tensor<f64>,
) -> Result<VarId, TensorError> {
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    settings: GradCheckSettings,
    build: F,
) -> Result<PrimitiveCheck, TensorError>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId, TensorError>,
{
    let report = check_gradients(&inputs, build, settings)?;
    Ok(PrimitiveCheck { name, report })
}

/// Run the finite-difference check for every differentiable primitive.
/// All inputs are seeded; two runs produce identical reports.
pub fn run_primitive_checks() -> Result<Vec<PrimitiveCheck>, TensorError> {
    let settings = GradCheckSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x10ca);
    let mut out = Vec::new();

    {
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        out.push(check("matmul", vec![a, b], settings, move |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let a = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        out.push(check("matmul_tb", vec![a, b], settings, move |tape, ids| {
            let y = tape.matmul_tb(ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 7]);
        let w = rand_tensor(&mut rng, &[3, 7]);
        out.push(check("softmax_lastdim", vec![x], settings, move |tape, ids| {
            let y = tape.softmax_lastdim(ids[0])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[2, 8]);
        let gain = rand_tensor(&mut rng, &[8]);
        let bias = rand_tensor(&mut rng, &[8]);
        let w = rand_tensor(&mut rng, &[2, 8]);
        out.push(check(
            "layer_norm",
            vec![x, gain, bias],
            settings,
            move |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_sum(tape, y, &w)
            },
        )?);
    }
    {
        // q 3x8, k/v 5x8, 2 heads; all projections checked too.
        let dims = [
            vec![3, 8],
            vec![5, 8],
            vec![5, 8],
            vec![8, 8],
            vec![8],
            vec![8, 8],
            vec![8],
            vec![8, 8],
            vec![8],
            vec![8, 8],
            vec![8],
        ];
        let inputs: Vec<Tensor<f64>> =
            dims.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let w = rand_tensor(&mut rng, &[3, 8]);
        out.push(check(
            "multi_head_attention",
            inputs,
            settings,
            move |tape, ids| {
                let weights = MhaWeights {
                    heads: 2,
                    wq: ids[3],
                    bq: ids[4],
                    wk: ids[5],
                    bk: ids[6],
                    wv: ids[7],
                    bv: ids[8],
                    wo: ids[9],
                    bo: ids[10],
                };
                let y = tape.multi_head_attention(ids[0], ids[1], ids[2], &weights)?;
                weighted_sum(tape, y, &w)
            },
        )?);
    }
    {
        let f = rand_tensor(&mut rng, &[4, 4, 2]);
        let k = rand_tensor(&mut rng, &[3, 3, 2]);
        let w = rand_tensor(&mut rng, &[4, 4, 2]);
        out.push(check(
            "depthwise_correlate",
            vec![f, k],
            settings,
            move |tape, ids| {
                let y = tape.depthwise_correlate(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            },
        )?);
    }
    {
        let inputs: Vec<Tensor<f64>> =
            (0..3).map(|_| rand_tensor(&mut rng, &[2, 3, 2])).collect();
        let w = rand_tensor(&mut rng, &[2, 3, 2]);
        out.push(check("max_over_set", inputs, settings, move |tape, ids| {
            let y = tape.max_over_set(ids)?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let f = rand_tensor(&mut rng, &[8, 8, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 3]);
        let region = [0.21, 0.13, 0.68, 0.84];
        out.push(check("roi_pool", vec![f], settings, move |tape, ids| {
            let y = tape.roi_pool(ids[0], region, 3)?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[5, 4, 2]);
        let w = rand_tensor(&mut rng, &[7, 9, 2]);
        out.push(check("bilinear_resize", vec![x], settings, move |tape, ids| {
            let y = tape.bilinear_resize(ids[0], 7, 9)?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[6, 6, 2]);
        let kw = rand_tensor(&mut rng, &[3, 3, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[6, 6, 3]);
        out.push(check(
            "conv2d",
            vec![x, kw, b],
            settings,
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                weighted_sum(tape, y, &w)
            },
        )?);
    }
    {
        let x = rand_tensor(&mut rng, &[7, 5, 2]);
        let kw = rand_tensor(&mut rng, &[3, 3, 2, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[4, 3, 4]);
        out.push(check(
            "conv2d_stride2",
            vec![x, kw, b],
            settings,
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                weighted_sum(tape, y, &w)
            },
        )?);
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        out.push(check("add", vec![a, b], settings, {
            let w = w.clone();
            move |tape, ids| {
                let y = tape.add(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            }
        })?);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        out.push(check("sub", vec![a, b], settings, {
            let w = w.clone();
            move |tape, ids| {
                let y = tape.sub(ids[0], ids[1])?;
                weighted_sum(tape, y, &w)
            }
        })?);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        out.push(check("mul", vec![a, b], settings, move |tape, ids| {
            let y = tape.mul(ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        out.push(check("add_bias", vec![x, b], settings, move |tape, ids| {
            let y = tape.add_bias(ids[0], ids[1])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[5, 5]);
        let w = rand_tensor(&mut rng, &[5, 5]);
        out.push(check("relu", vec![x], settings, {
            let w = w.clone();
            move |tape, ids| {
                let y = tape.relu(ids[0]);
                weighted_sum(tape, y, &w)
            }
        })?);
        let x = rand_tensor(&mut rng, &[5, 5]);
        out.push(check("leaky_relu", vec![x], settings, {
            let w = w.clone();
            move |tape, ids| {
                let y = tape.leaky_relu(ids[0], 0.01);
                weighted_sum(tape, y, &w)
            }
        })?);
        let x = rand_tensor(&mut rng, &[5, 5]);
        out.push(check("scale", vec![x], settings, move |tape, ids| {
            let y = tape.scale(ids[0], -1.75);
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        // Mask redrawn from a fixed seed on every evaluation so the
        // perturbed passes see the same dropout pattern.
        let x = rand_tensor(&mut rng, &[6, 4]);
        let w = rand_tensor(&mut rng, &[6, 4]);
        out.push(check("dropout", vec![x], settings, move |tape, ids| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
            let y = tape.dropout(ids[0], 0.3, &mut mask_rng)?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[2, 6]);
        out.push(check("sum", vec![x], settings, |tape, ids| Ok(tape.sum(ids[0])))?);
        let x = rand_tensor(&mut rng, &[2, 6]);
        out.push(check("mean", vec![x], settings, |tape, ids| tape.mean(ids[0]))?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 6]);
        out.push(check("reshape", vec![x], settings, move |tape, ids| {
            let y = tape.reshape(ids[0], &[2, 6])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        out.push(check("transpose2d", vec![x], settings, move |tape, ids| {
            let y = tape.transpose2d(ids[0])?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 2]);
        let w = rand_tensor(&mut rng, &[2, 5]);
        out.push(check("concat", vec![a, b], settings, move |tape, ids| {
            let y = tape.concat(&[ids[0], ids[1]], 1)?;
            weighted_sum(tape, y, &w)
        })?);
    }
    {
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        out.push(check("slice", vec![x], settings, move |tape, ids| {
            let y = tape.slice(ids[0], 1, 2, 3)?;
            weighted_sum(tape, y, &w)
        })?);
    }

    Ok(out)
}
