//! Optimization loop: per-image tapes run in parallel, gradients are
//! averaged by the mini-batch object count, clipped by global norm, and
//! applied with the adaptive-moment update. All stochasticity (batch
//! order, flips, dropout) is derived from the seed and step counters, so
//! an epoch-boundary resume reproduces the continuation bitwise.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loca_tensor::{ParamKey, Tape};

use crate::checkpoint::{
    apply_parameters, extract_moments, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use crate::config::{fnv1a, thread_count, ConfigFile, TrainConfig};
use crate::data::Scene;
use crate::error::LocaError;
use crate::eval::{evaluate, run_parallel, EvalResult};
use crate::layers::{Ctx, ParamWalk};
use crate::loss::{squared_error_node, LossReport};
use crate::model::{CountingMode, LocaModel, ModelVariant};
use crate::optim::{clip_global_norm, AdamW};

fn derive_seed(parts: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(parts.len() * 8);
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a(&bytes)
}

struct SampleResult {
    ose: f64,
    aux: f64,
    objects: usize,
    grads: Vec<Option<Vec<f32>>>,
}

pub struct Trainer {
    pub model: LocaModel<f32>,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    pub mode: CountingMode,
    pub variant: ModelVariant,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    param_names: Vec<String>,
    param_keys: Vec<ParamKey>,
}

impl Trainer {
    pub fn new(
        model: LocaModel<f32>,
        cfg: TrainConfig,
        mode: CountingMode,
        variant: ModelVariant,
    ) -> Result<Self, LocaError> {
        cfg.validate()?;
        let mut param_names = Vec::new();
        let mut param_keys = Vec::new();
        model.walk("model", &mut |name, p| {
            param_names.push(name);
            param_keys.push(p.key());
        });
        let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer {
            model,
            opt,
            cfg,
            mode,
            variant,
            epoch: 0,
            best_val_mae: None,
            param_names,
            param_keys,
        })
    }

    pub fn from_checkpoint(
        path: &Path,
        cfg: TrainConfig,
    ) -> Result<Self, LocaError> {
        let data = load_checkpoint(path)?;
        let (model_cfg, _) = ConfigFile::parse(&data.meta.model_config)?.into_configs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(data.meta.seed);
        let mut model = LocaModel::new(&model_cfg, &mut rng)?;
        apply_parameters(&mut model, &data)?;
        let mode = CountingMode::parse(&data.meta.mode)?;
        let variant = ModelVariant::parse(&data.meta.variant)?;
        let mut trainer = Trainer::new(model, cfg, mode, variant)?;
        if let Some(moments) = extract_moments(&trainer.model, &data)? {
            trainer.opt.import_moments(moments, data.meta.adam_step);
        }
        trainer.epoch = data.meta.epoch;
        trainer.best_val_mae = data.meta.best_val_mae;
        Ok(trainer)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            epoch: self.epoch,
            adam_step: self.opt.step_count(),
            config_hash: self.model.cfg.hash(),
            model_config: self.model.cfg.render(),
            mode: match self.mode {
                CountingMode::Few => "few",
                CountingMode::One => "one",
                CountingMode::Zero => "zero",
            }
            .into(),
            variant: match self.variant {
                ModelVariant::Full => "full",
                ModelVariant::NoShape => "no_shape",
                ModelVariant::SimpleSum => "simple_sum",
                ModelVariant::NoOpe => "no_ope",
            }
            .into(),
            seed: self.cfg.seed,
            best_val_mae: self.best_val_mae,
        }
    }

    fn forward_backward_sample(
        &self,
        scene: &Scene,
        sample_seed: u64,
    ) -> Result<SampleResult, LocaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let flip = self.cfg.flip_augment && rng.gen_bool(0.5);
        let scene = if flip { scene.flipped_horizontal() } else { scene.clone() };
        let boxes = self.mode.select(&scene.boxes).to_vec();
        let size = self.model.cfg.input_size;
        let fallback = Some(self.cfg.zero_shot_kernel_px);
        let gt = crate::density::gt_density_floored::<f32>(
            &scene.points,
            &boxes,
            size,
            size,
            fallback,
            self.cfg.min_kernel_px,
        )?;

        let mut tape = Tape::new();
        let image = tape.constant(&scene.image.to_tensor::<f32>());
        let mut ctx = Ctx::train(rng.gen());
        let out = self
            .model
            .forward(&mut tape, image, &boxes, self.variant, true, scene.id, &mut ctx)?;
        let gt_node = tape.constant(&gt.values);
        let ose = squared_error_node(&mut tape, out.main_map, gt_node)?;
        let mut root = ose;
        let mut aux_val = 0.0f64;
        if !out.aux_maps.is_empty() {
            let mut aux_terms = Vec::with_capacity(out.aux_maps.len());
            for &aux_map in &out.aux_maps {
                aux_terms.push(squared_error_node(&mut tape, aux_map, gt_node)?);
            }
            let mut aux_total = aux_terms[0];
            for &t in &aux_terms[1..] {
                aux_total = tape.add(aux_total, t)?;
            }
            aux_val = tape.value(aux_total)[0] as f64;
            if self.cfg.lambda_aux > 0.0 {
                let scaled = tape.scale(aux_total, self.cfg.lambda_aux as f32);
                root = tape.add(ose, scaled)?;
            }
        }
        let total_val = tape.value(root)[0];
        if !total_val.is_finite() {
            let op = tape.first_non_finite().map(|(name, _)| name).unwrap_or("unknown");
            return Err(LocaError::NonFiniteLoss { op });
        }
        tape.backward(root)?;

        let grads = self
            .param_keys
            .iter()
            .map(|&key| tape.grad_of(key).map(|g| g.to_vec()))
            .collect();
        Ok(SampleResult {
            ose: tape.value(ose)[0] as f64,
            aux: aux_val,
            objects: scene.points.len(),
            grads,
        })
    }

    /// One optimizer step over a mini-batch.
    pub fn train_step(&mut self, batch: &[Scene], step_index: u64) -> Result<LossReport, LocaError> {
        if batch.is_empty() {
            return Err(LocaError::Train("empty batch".into()));
        }
        let seeds: Vec<u64> = (0..batch.len())
            .map(|i| derive_seed(&[self.cfg.seed, self.epoch as u64, step_index, i as u64]))
            .collect();
        let inputs: Vec<(usize, &Scene)> = batch.iter().enumerate().collect();
        let results = run_parallel(&inputs, thread_count().min(batch.len()), |(i, scene)| {
            self.forward_backward_sample(scene, seeds[*i])
        });
        let mut samples = Vec::with_capacity(batch.len());
        for r in results {
            samples.push(r?);
        }

        let m: usize = samples.iter().map(|s| s.objects).sum();
        let ose_sum: f64 = samples.iter().map(|s| s.ose).sum();
        let aux_sum: f64 = samples.iter().map(|s| s.aux).sum();
        if m == 0 && ose_sum > 0.0 {
            return Err(LocaError::Train(
                "object-normalized loss undefined: batch has no objects but nonzero error".into(),
            ));
        }
        let norm = m.max(1) as f64;

        // Deterministic accumulation in sample order, then 1/M scaling.
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.param_keys.len()];
        for sample in &samples {
            for (slot, g) in grads.iter_mut().zip(sample.grads.iter()) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => {
                            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                                *a += v;
                            }
                        }
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        let inv_m = (1.0 / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= inv_m;
            }
        }
        if self.cfg.freeze_backbone {
            for (name, g) in self.param_names.iter().zip(grads.iter_mut()) {
                if name.starts_with("model.encoder.backbone") {
                    *g = None;
                }
            }
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm);

        let mut full_sizes = vec![0usize; self.param_keys.len()];
        {
            let mut idx = 0;
            self.model.walk("model", &mut |_, p| {
                full_sizes[idx] = p.value.numel();
                idx += 1;
            });
        }
        let opt = &mut self.opt;
        opt.ensure_state(&full_sizes);
        opt.begin_step();
        let mut idx = 0;
        self.model.walk_mut("model", &mut |_, p| {
            opt.update_one(idx, p.value.data_mut(), grads[idx].as_deref());
            idx += 1;
        });

        Ok(LossReport {
            l_ose: ose_sum / norm,
            l_aux: aux_sum / norm,
            total: (ose_sum + self.cfg.lambda_aux * aux_sum) / norm,
            m,
        })
    }

    /// Run one epoch over a deterministic shuffle of the dataset.
    pub fn run_epoch(&mut self, train: &[Scene]) -> Result<Vec<LossReport>, LocaError> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 0xba7c4, self.epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut reports = Vec::new();
        let mut step = 0u64;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Scene> = chunk.iter().map(|&i| train[i].clone()).collect();
            reports.push(self.train_step(&batch, step)?);
            step += 1;
        }
        self.epoch += 1;
        Ok(reports)
    }
}

/// Append-only metrics log.
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: PathBuf) -> Result<Self, LocaError> {
        if !path.exists() {
            std::fs::write(&path, "epoch,split,MAE,RMSE,L_OSE,L_AUX,wall_ms\n")
                .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        }
        Ok(MetricsLog { path })
    }

    pub fn append(&self, row: &str) -> Result<(), LocaError> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| LocaError::io(self.path.display().to_string(), e))?;
        writeln!(f, "{row}").map_err(|e| LocaError::io(self.path.display().to_string(), e))
    }
}

pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val: Option<EvalResult>,
}

pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_val_mae: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Full training: epochs with periodic validation, metrics logging, and
/// best/latest checkpoint retention under `out_dir`.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[Scene],
    val: &[Scene],
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainSummary, LocaError> {
    if train.is_empty() {
        return Err(LocaError::Train("empty training set".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| LocaError::io(out_dir.display().to_string(), e))?;
    let log = MetricsLog::new(out_dir.join("metrics.csv"))?;
    let latest = out_dir.join("latest.ckpt");
    let best = out_dir.join("best.ckpt");

    let mut history = Vec::new();
    let epochs = trainer.cfg.epochs;
    while trainer.epoch < epochs {
        let t0 = Instant::now();
        let reports = trainer.run_epoch(train)?;
        let epoch = trainer.epoch; // completed count after run_epoch
        let mean_total = reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64;
        let mean_ose = reports.iter().map(|r| r.l_ose).sum::<f64>() / reports.len() as f64;
        let mean_aux = reports.iter().map(|r| r.l_aux).sum::<f64>() / reports.len() as f64;
        let train_ms = t0.elapsed().as_millis();
        log.append(&format!("{epoch},train,,,{mean_ose:.6},{mean_aux:.6},{train_ms}"))?;

        let run_val = !val.is_empty()
            && (epoch % trainer.cfg.val_every == 0 || epoch == epochs);
        let mut val_result = None;
        if run_val {
            let tv = Instant::now();
            let result = evaluate(
                &trainer.model,
                val,
                trainer.mode,
                trainer.variant,
                trainer.cfg.clamp_counts,
            )?;
            let val_ms = tv.elapsed().as_millis();
            log.append(&format!(
                "{epoch},val,{:.6},{:.6},,,{val_ms}",
                result.mae, result.rmse
            ))?;
            if !quiet {
                eprintln!(
                    "epoch {epoch:>4}: loss {mean_total:.5}  val MAE {:.3} RMSE {:.3}",
                    result.mae, result.rmse
                );
            }
            let improved = trainer
                .best_val_mae
                .map(|b| result.mae < b)
                .unwrap_or(true);
            if improved {
                trainer.best_val_mae = Some(result.mae);
                save_checkpoint(&best, &trainer.model, Some(&trainer.opt), &trainer.meta())?;
            }
            val_result = Some(result);
        } else if !quiet {
            eprintln!("epoch {epoch:>4}: loss {mean_total:.5}");
        }
        save_checkpoint(&latest, &trainer.model, Some(&trainer.opt), &trainer.meta())?;
        history.push(EpochRecord { epoch, mean_total, val: val_result });
    }
    Ok(TrainSummary {
        history,
        best_val_mae: trainer.best_val_mae,
        best_checkpoint: best.exists().then_some(best),
        final_checkpoint: latest,
    })
}
