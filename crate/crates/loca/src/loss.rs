//! Object-normalized squared-error loss and its auxiliary companion over
//! intermediate density maps. Value-level entry points mirror the in-graph
//! forms used during training.

use loca_tensor::{Scalar, Tape, TensorError, VarId};

use crate::density::DensityMap;
use crate::error::LocaError;

/// Loss components of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_ose: f64,
    pub l_aux: f64,
    pub total: f64,
    /// Number of objects in the mini-batch.
    pub m: usize,
}

fn squared_error_sum<T: Scalar>(pred: &DensityMap<T>, gt: &DensityMap<T>) -> Result<f64, LocaError> {
    if pred.values.shape() != gt.values.shape() {
        return Err(LocaError::Tensor(TensorError::ShapeMismatch {
            op: "loss",
            lhs: pred.values.shape().to_vec(),
            rhs: gt.values.shape().to_vec(),
        }));
    }
    Ok(pred
        .values
        .data()
        .iter()
        .zip(gt.values.data().iter())
        .map(|(&p, &g)| {
            let d = g.as_f64() - p.as_f64();
            d * d
        })
        .sum())
}

/// Squared error between predicted and ground-truth maps, summed over the
/// batch and normalized by the object count M.
pub fn loss_ose<T: Scalar>(
    pred: &[DensityMap<T>],
    gt: &[DensityMap<T>],
    m: usize,
) -> Result<f64, LocaError> {
    if pred.len() != gt.len() {
        return Err(LocaError::config(format!(
            "batch size mismatch: {} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        total += squared_error_sum(p, g)?;
    }
    if m == 0 {
        let gt_mass: f64 = gt.iter().map(|g| g.count().abs()).sum();
        if gt_mass > 0.0 {
            return Err(LocaError::Train(
                "object-normalized loss undefined: M == 0 with nonzero ground truth".into(),
            ));
        }
        return Ok(total);
    }
    Ok(total / m as f64)
}

/// Auxiliary loss over the intermediate maps of iterations 1..L-1:
/// `levels` holds one batch of maps per intermediate level. An empty list
/// (L == 1) yields zero.
pub fn loss_aux<T: Scalar>(
    levels: &[Vec<DensityMap<T>>],
    gt: &[DensityMap<T>],
    m: usize,
) -> Result<f64, LocaError> {
    let mut total = 0.0;
    for level in levels {
        total += loss_ose(level, gt, m)?;
    }
    Ok(total)
}

pub fn total_loss(l_ose: f64, l_aux: f64, lambda_aux: f64, m: usize) -> LossReport {
    LossReport {
        l_ose,
        l_aux,
        total: l_ose + lambda_aux * l_aux,
        m,
    }
}

/// In-graph unnormalized squared error sum(( gt - pred )^2) as a scalar
/// node; the 1/M normalization is applied outside, across the batch.
pub fn squared_error_node<T: Scalar>(
    tape: &mut Tape<T>,
    pred: VarId,
    gt: VarId,
) -> Result<VarId, TensorError> {
    let diff = tape.sub(gt, pred)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use loca_tensor::Tensor;

    fn map_of(vals: Vec<f64>, side: usize) -> DensityMap<f64> {
        DensityMap::new(Tensor::from_vec(&[side, side], vals).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let g = map_of(vec![0.5; 16], 4);
        let p = map_of(vec![0.5; 16], 4);
        assert_eq!(loss_ose(&[p], &[g], 7).unwrap(), 0.0);
    }

    #[test]
    fn normalization_arithmetic() {
        // Squared-error sum of 4 with M = 2 gives 2.0.
        let g = map_of(vec![2.0, 0.0, 0.0, 0.0], 2);
        let p = map_of(vec![0.0, 0.0, 0.0, 0.0], 2);
        assert_eq!(loss_ose(&[p], &[g], 2).unwrap(), 2.0);
    }

    #[test]
    fn doubling_m_halves_the_loss() {
        let g = map_of((0..64).map(|i| (i as f64 * 0.3).sin()).collect(), 8);
        let p = map_of((0..64).map(|i| (i as f64 * 0.7).cos()).collect(), 8);
        let at_m = loss_ose(&[p.clone()], &[g.clone()], 5).unwrap();
        let at_2m = loss_ose(&[p], &[g], 10).unwrap();
        assert_eq!(at_2m, at_m / 2.0);
    }

    #[test]
    fn matches_direct_loop_oracle() {
        let g = map_of((0..64).map(|i| (i as f64 * 1.3).sin()).collect(), 8);
        let p = map_of((0..64).map(|i| (i as f64 * 0.11).cos()).collect(), 8);
        let mut expected = 0.0;
        for i in 0..64 {
            let d = g.values.data()[i] - p.values.data()[i];
            expected += d * d;
        }
        expected /= 3.0;
        let got = loss_ose(&[p], &[g], 3).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn zero_m_with_nonzero_gt_is_an_error() {
        let g = map_of(vec![1.0, 0.0, 0.0, 0.0], 2);
        let p = map_of(vec![0.0; 4], 2);
        assert!(loss_ose(&[p], &[g], 0).is_err());
    }

    #[test]
    fn aux_loss_is_zero_for_single_iteration() {
        let g = map_of(vec![1.0; 4], 2);
        assert_eq!(loss_aux::<f64>(&[], &[g], 3).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_zero_when_intermediates_match_gt() {
        let g = map_of((0..16).map(|i| i as f64).collect(), 4);
        let levels = vec![vec![g.clone()], vec![g.clone()]];
        assert_eq!(loss_aux(&levels, &[g], 3).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_matches_loop_oracle_for_three_levels() {
        let side = 4;
        let g = map_of((0..16).map(|i| (i as f64).sin()).collect(), side);
        let levels: Vec<Vec<DensityMap<f64>>> = (0..2)
            .map(|l| vec![map_of((0..16).map(|i| ((i + l) as f64).cos()).collect(), side)])
            .collect();
        let m = 4;
        let mut expected = 0.0;
        for level in &levels {
            for i in 0..16 {
                let d = g.values.data()[i] - level[0].values.data()[i];
                expected += d * d;
            }
        }
        expected /= m as f64;
        let got = loss_aux(&levels, &[g], m).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn total_combines_linearly() {
        let r = total_loss(2.0, 3.0, 0.3, 5);
        assert!((r.total - (2.0 + 0.3 * 3.0)).abs() < 1e-12);
        let r0 = total_loss(2.0, 3.0, 0.0, 5);
        assert_eq!(r0.total, r0.l_ose);
    }
}
