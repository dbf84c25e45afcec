//! Count-error evaluation: MAE and RMSE, globally and stratified by
//! ground-truth count buckets.

use loca_tensor::Scalar;

use crate::config::thread_count;
use crate::data::Scene;
use crate::error::LocaError;
use crate::model::{CountingMode, LocaModel, ModelVariant};

/// Ground-truth count buckets used in per-bucket reports.
pub const BUCKET_EDGES: [(usize, usize); 4] =
    [(0, 10), (11, 50), (51, 200), (201, usize::MAX)];

pub fn bucket_label(index: usize) -> &'static str {
    match index {
        0 => "0-10",
        1 => "11-50",
        2 => "51-200",
        _ => "200+",
    }
}

pub fn bucket_of(gt_count: usize) -> usize {
    BUCKET_EDGES
        .iter()
        .position(|&(lo, hi)| gt_count >= lo && gt_count <= hi)
        .expect("buckets cover all counts")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BucketStat {
    pub images: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: u64,
    pub gt: f64,
    pub pred: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mae: f64,
    pub rmse: f64,
    pub buckets: [BucketStat; 4],
    pub records: Vec<ImageRecord>,
}

impl EvalResult {
    /// Aggregate per-image (id, gt, pred) records; sorted by id so the
    /// result is independent of evaluation order.
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self, LocaError> {
        if records.is_empty() {
            return Err(LocaError::Eval("empty dataset".into()));
        }
        records.sort_by_key(|r| r.id);
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut bucket_abs = [0.0f64; 4];
        let mut bucket_sq = [0.0f64; 4];
        let mut bucket_n = [0usize; 4];
        for r in &records {
            let err = r.pred - r.gt;
            abs_sum += err.abs();
            sq_sum += err * err;
            let b = bucket_of(r.gt.round() as usize);
            bucket_abs[b] += err.abs();
            bucket_sq[b] += err * err;
            bucket_n[b] += 1;
        }
        let n = records.len() as f64;
        let mut buckets = [BucketStat::default(); 4];
        for b in 0..4 {
            if bucket_n[b] > 0 {
                buckets[b] = BucketStat {
                    images: bucket_n[b],
                    mae: bucket_abs[b] / bucket_n[b] as f64,
                    rmse: (bucket_sq[b] / bucket_n[b] as f64).sqrt(),
                };
            }
        }
        Ok(EvalResult {
            mae: abs_sum / n,
            rmse: (sq_sum / n).sqrt(),
            buckets,
            records,
        })
    }

    /// Bucket-weighted MAE; equals the global MAE by construction.
    pub fn recomposed_mae(&self) -> f64 {
        let total: usize = self.buckets.iter().map(|b| b.images).sum();
        self.buckets
            .iter()
            .map(|b| b.mae * b.images as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn summary(&self) -> String {
        let mut s = format!("images={} MAE={:.4} RMSE={:.4}\n", self.records.len(), self.mae, self.rmse);
        for (i, b) in self.buckets.iter().enumerate() {
            if b.images > 0 {
                s.push_str(&format!(
                    "  count {:>7}: images={:<5} MAE={:.4} RMSE={:.4}\n",
                    bucket_label(i),
                    b.images,
                    b.mae,
                    b.rmse
                ));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,gt,pred,abs_err\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.id, r.gt, r.pred, (r.pred - r.gt).abs()));
        }
        s
    }
}

/// Chunked scoped-thread map that preserves input order.
pub fn run_parallel<I, O, F>(items: &[I], threads: usize, f: F) -> Vec<Result<O, LocaError>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O, LocaError> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<Result<O, LocaError>>> = Vec::new();
    out.resize_with(items.len(), || None);
    let out_chunks: Vec<_> = out.chunks_mut(chunk).collect();
    std::thread::scope(|scope| {
        for (slot, input) in out_chunks.into_iter().zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (o, i) in slot.iter_mut().zip(input.iter()) {
                    *o = Some(f(i));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("all slots filled")).collect()
}

/// Predict every scene and score counts. The mode picks how many exemplar
/// annotations each prediction consumes (3, 1, or 0).
pub fn evaluate<T: Scalar>(
    model: &LocaModel<T>,
    scenes: &[Scene],
    mode: CountingMode,
    variant: ModelVariant,
    clamp_counts: bool,
) -> Result<EvalResult, LocaError> {
    if scenes.is_empty() {
        return Err(LocaError::Eval("empty dataset".into()));
    }
    let results = run_parallel(scenes, thread_count(), |scene| {
        let image = scene.image.to_tensor::<T>();
        let boxes = mode.select(&scene.boxes);
        if boxes.len() < mode.exemplar_count() {
            return Err(LocaError::Eval(format!(
                "scene {}: mode needs {} exemplars, scene has {}",
                scene.id,
                mode.exemplar_count(),
                scene.boxes.len()
            )));
        }
        let (_, count) = model.predict_with_variant(&image, boxes, variant)?;
        let pred = if clamp_counts { count.max(0.0) } else { count };
        Ok(ImageRecord { id: scene.id, gt: scene.count() as f64, pred })
    });
    let records: Vec<ImageRecord> = results.into_iter().collect::<Result<_, _>>()?;
    EvalResult::from_records(records)
}

/// The constant predictor baseline: always answer the mean training count.
pub fn mean_count(scenes: &[Scene]) -> f64 {
    scenes.iter().map(|s| s.count() as f64).sum::<f64>() / scenes.len().max(1) as f64
}

/// MAE/RMSE of the constant predictor on a dataset.
pub fn constant_predictor_result(scenes: &[Scene], value: f64) -> Result<EvalResult, LocaError> {
    let records = scenes
        .iter()
        .map(|s| ImageRecord { id: s.id, gt: s.count() as f64, pred: value })
        .collect();
    EvalResult::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, gt: f64, pred: f64) -> ImageRecord {
        ImageRecord { id, gt, pred }
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let r = EvalResult::from_records(vec![rec(0, 5.0, 5.0), rec(1, 9.0, 9.0)]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn small_case_arithmetic() {
        // preds [1,3] vs gt [2,1]: MAE = 1.5, RMSE = sqrt((1+4)/2)
        let r = EvalResult::from_records(vec![rec(0, 2.0, 1.0), rec(1, 1.0, 3.0)]).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-12);
        assert!((r.rmse - (2.5f64).sqrt()).abs() < 1e-12, "rmse={}", r.rmse);
        assert!((r.rmse - 1.581).abs() < 1e-3);
    }

    #[test]
    fn rmse_dominates_mae_on_random_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..30);
            let records: Vec<ImageRecord> = (0..n)
                .map(|i| rec(i, rng.gen_range(0.0..250.0), rng.gen_range(-10.0..260.0)))
                .collect();
            let r = EvalResult::from_records(records).unwrap();
            assert!(
                r.rmse >= r.mae - 1e-12,
                "power-mean inequality violated: rmse={} mae={}",
                r.rmse,
                r.mae
            );
        }
    }

    #[test]
    fn buckets_recompose_global_mae() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let records: Vec<ImageRecord> = (0..200)
            .map(|i| {
                let gt = rng.gen_range(0..260) as f64;
                rec(i, gt, gt + rng.gen_range(-20.0..20.0))
            })
            .collect();
        let r = EvalResult::from_records(records).unwrap();
        assert!((r.recomposed_mae() - r.mae).abs() < 1e-6);
        assert!(r.buckets.iter().any(|b| b.images > 0));
    }

    #[test]
    fn result_is_order_invariant() {
        let fwd = vec![rec(0, 2.0, 1.0), rec(1, 7.0, 8.5), rec(2, 3.0, 2.0)];
        let mut rev = fwd.clone();
        rev.reverse();
        let a = EvalResult::from_records(fwd).unwrap();
        let b = EvalResult::from_records(rev).unwrap();
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.rmse, b.rmse);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(x.id, y.id);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(EvalResult::from_records(vec![]).is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = run_parallel(&items, 4, |&i| Ok(i * 2));
        let got: Vec<usize> = out.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(got, (0..37).map(|i| i * 2).collect::<Vec<_>>());
    }
}
