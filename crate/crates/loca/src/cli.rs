//! Command-line surface: dataset generation, training, evaluation,
//! single-image prediction, the gradient-check suite, and the ablation
//! harness.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::load_model;
use crate::config::{ConfigFile, ModelConfig, TrainConfig};
use crate::data::{
    dataset_dir, load_dataset, save_dataset, synth_generate, write_density_pgm, GenConfig,
    ImageRgb, Scene,
};
use crate::density::DensityMap;
use crate::error::LocaError;
use crate::eval::{evaluate, mean_count};
use crate::model::{CountingMode, LocaModel, ModelVariant};
use crate::ope::ExemplarBox;
use crate::train::{train_loop, Trainer};

#[derive(Parser)]
#[command(name = "loca", about = "Low-shot object counting with iterative prototype adaptation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with disjoint train/val/test categories.
    Gen {
        /// key=value generator configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset root (train/, val/, test/ subdirectories).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        /// key=value model/training configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// Exemplars consumed per image: few (3), one (1) or zero (0).
        #[arg(long, default_value = "few")]
        mode: String,
        /// Architecture variant (full|no_shape|simple_sum|no_ope).
        #[arg(long, default_value = "full")]
        variant: String,
        /// Overrides the config-file seed when set.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an epoch checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "few")]
        mode: String,
        /// Directory for the per-image CSV; stdout gets the summary.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clamp negative counts to zero when reporting.
        #[arg(long, default_value_t = false)]
        clamp: bool,
    },
    /// Predict the count for one image; prints the count to stdout.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM input image.
        #[arg(long)]
        image: PathBuf,
        /// Exemplar boxes "x1,y1,x2,y2;..." in normalized coordinates;
        /// omit for zero-shot.
        #[arg(long)]
        boxes: Option<String>,
        /// Write the density map (tensor format) here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write an 8-bit PGM visualization.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and exit nonzero on failure.
    Gradcheck,
    /// Ablation harness: L sweep, prototype-size sweep, or variant grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// One of: l (iterations 1..6), s (prototype size 1/3/5),
        /// variants (full/no_shape/simple_sum/no_ope).
        #[arg(long)]
        sweep: String,
        /// Seeds per configuration (variants sweep).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value = "few")]
        mode: String,
        /// Work directory for per-run checkpoints and the report CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn run(cli: Cli) -> Result<(), LocaError> {
    match cli.command {
        Command::Gen { config, seed, out } => cmd_gen(config.as_deref(), seed, &out),
        Command::Train { config, data, out, mode, variant, seed, checkpoint, quiet } => cmd_train(
            config.as_deref(),
            &data,
            &out,
            &mode,
            &variant,
            seed,
            checkpoint.as_deref(),
            quiet,
        ),
        Command::Eval { checkpoint, data, split, mode, out, clamp } => {
            cmd_eval(&checkpoint, &data, &split, &mode, out.as_deref(), clamp)
        }
        Command::Predict { checkpoint, image, boxes, out, pgm } => {
            cmd_predict(&checkpoint, &image, boxes.as_deref(), out.as_deref(), pgm.as_deref())
        }
        Command::Gradcheck => cmd_gradcheck(),
        Command::Ablate { config, data, sweep, seeds, mode, out, seed } => {
            cmd_ablate(config.as_deref(), &data, &sweep, seeds, &mode, &out, seed)
        }
    }
}

fn cmd_gen(config: Option<&Path>, seed: u64, out: &Path) -> Result<(), LocaError> {
    let cfg = match config {
        Some(path) => GenConfig::from_file(path)?,
        None => GenConfig::default(),
    };
    let data = synth_generate(&cfg, seed)?;
    for (split, scenes) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let dir = dataset_dir(out, split);
        std::fs::create_dir_all(&dir).map_err(|e| LocaError::io(dir.display().to_string(), e))?;
        save_dataset(&dir, scenes)?;
        println!("{split}: {} scenes", scenes.len());
    }
    Ok(())
}

fn load_configs(config: Option<&Path>) -> Result<(ModelConfig, TrainConfig), LocaError> {
    match config {
        Some(path) => ConfigFile::load(path)?.into_configs(),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    mode: &str,
    variant: &str,
    seed: Option<u64>,
    checkpoint: Option<&Path>,
    quiet: bool,
) -> Result<(), LocaError> {
    let (model_cfg, mut train_cfg) = load_configs(config)?;
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    let mode = CountingMode::parse(mode)?;
    let variant = ModelVariant::parse(variant)?;
    let train = load_dataset(&dataset_dir(data, "train"))?;
    let val = load_dataset(&dataset_dir(data, "val"))?;

    let mut trainer = match checkpoint {
        Some(path) => Trainer::from_checkpoint(path, train_cfg)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
            let model = LocaModel::new(&model_cfg, &mut rng)?;
            Trainer::new(model, train_cfg, mode, variant)?
        }
    };
    let summary = train_loop(&mut trainer, &train, &val, out, quiet)?;
    if let Some(best) = summary.best_val_mae {
        println!("best val MAE {best:.4}");
    }
    println!("final checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    mode: &str,
    out: Option<&Path>,
    clamp: bool,
) -> Result<(), LocaError> {
    let (model, _) = load_model(checkpoint)?;
    let mode = CountingMode::parse(mode)?;
    let scenes = load_dataset(&dataset_dir(data, split))?;
    let result = evaluate(&model, &scenes, mode, ModelVariant::Full, clamp)?;
    print!("{}", result.summary());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| LocaError::io(dir.display().to_string(), e))?;
        let path = dir.join(format!("eval_{split}.csv"));
        std::fs::write(&path, result.to_csv())
            .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        println!("per-image records: {}", path.display());
    }
    Ok(())
}

fn parse_boxes(spec: &str) -> Result<Vec<ExemplarBox>, LocaError> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|quad| {
            let parts: Vec<f64> = quad
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| LocaError::config(format!("cannot parse box {quad:?}")))?;
            if parts.len() != 4 {
                return Err(LocaError::config(format!(
                    "box {quad:?} needs 4 comma-separated values"
                )));
            }
            ExemplarBox::new(parts[0], parts[1], parts[2], parts[3])
        })
        .collect()
}

fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    boxes: Option<&str>,
    out: Option<&Path>,
    pgm: Option<&Path>,
) -> Result<(), LocaError> {
    let (model, _) = load_model(checkpoint)?;
    let img = ImageRgb::read_ppm(image)?;
    let boxes = match boxes {
        Some(spec) => parse_boxes(spec)?,
        None => Vec::new(),
    };
    let (map, count) = model.predict(&img.to_tensor::<f32>(), &boxes)?;
    if let Some(path) = out {
        let file = std::fs::File::create(path)
            .map_err(|e| LocaError::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        loca_tensor::io::write_tensor(&mut w, &map.values)?;
    }
    if let Some(path) = pgm {
        write_density_pgm(&map, path)?;
    }
    println!("{count}");
    Ok(())
}

fn cmd_gradcheck() -> Result<(), LocaError> {
    let rows = crate::gradsuite::run_full_suite()?;
    let mut failures = 0usize;
    for (name, report, pass) in &rows {
        println!(
            "{:<38} checked={:<6} max_rel={:.3e} {}",
            name,
            report.checked,
            report.max_rel_err,
            if *pass { "ok" } else { "FAIL" }
        );
        if !pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(LocaError::Train(format!("{failures} gradient checks failed")));
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}

/// One ablation run: fresh model, full training, validation MAE/RMSE.
pub fn ablation_run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mode: CountingMode,
    variant: ModelVariant,
    train: &[Scene],
    val: &[Scene],
    out: &Path,
) -> Result<(f64, f64), LocaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model = LocaModel::new(model_cfg, &mut rng)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), mode, variant)?;
    train_loop(&mut trainer, train, val, out, true)?;
    let result = evaluate(&trainer.model, val, mode, variant, trainer.cfg.clamp_counts)?;
    Ok((result.mae, result.rmse))
}

fn cmd_ablate(
    config: Option<&Path>,
    data: &Path,
    sweep: &str,
    seeds: u64,
    mode: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), LocaError> {
    let (model_cfg, mut train_cfg) = load_configs(config)?;
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    let mode = CountingMode::parse(mode)?;
    let train = load_dataset(&dataset_dir(data, "train"))?;
    let val = load_dataset(&dataset_dir(data, "val"))?;
    std::fs::create_dir_all(out).map_err(|e| LocaError::io(out.display().to_string(), e))?;

    let mut rows: Vec<String> = Vec::new();
    match sweep {
        "l" => {
            // Iteration-count sweep, one row per L like the reference
            // ablation table.
            println!("{:<10} {:>8} {:>8}", "L", "MAE", "RMSE");
            for l in 1..=6 {
                let mut cfg = model_cfg.clone();
                cfg.adapt_iters = l;
                let run_dir = out.join(format!("l{l}"));
                let (mae, rmse) =
                    ablation_run(&cfg, &train_cfg, mode, ModelVariant::Full, &train, &val, &run_dir)?;
                println!("{:<10} {:>8.3} {:>8.3}", l, mae, rmse);
                rows.push(format!("l={l},{mae},{rmse}"));
            }
        }
        "s" => {
            println!("{:<10} {:>8} {:>8}", "s", "MAE", "RMSE");
            for s in [1usize, 3, 5] {
                let mut cfg = model_cfg.clone();
                cfg.proto_size = s;
                let run_dir = out.join(format!("s{s}"));
                let (mae, rmse) =
                    ablation_run(&cfg, &train_cfg, mode, ModelVariant::Full, &train, &val, &run_dir)?;
                println!("{:<10} {:>8.3} {:>8.3}", s, mae, rmse);
                rows.push(format!("s={s},{mae},{rmse}"));
            }
        }
        "variants" => {
            println!("{:<12} {:>6} {:>8} {:>8}", "variant", "seed", "MAE", "RMSE");
            for variant in [
                ModelVariant::Full,
                ModelVariant::NoShape,
                ModelVariant::SimpleSum,
                ModelVariant::NoOpe,
            ] {
                let name = match variant {
                    ModelVariant::Full => "full",
                    ModelVariant::NoShape => "no_shape",
                    ModelVariant::SimpleSum => "simple_sum",
                    ModelVariant::NoOpe => "no_ope",
                };
                for s in 0..seeds {
                    let mut cfg = train_cfg.clone();
                    cfg.seed = train_cfg.seed + s;
                    let run_dir = out.join(format!("{name}_seed{s}"));
                    let (mae, rmse) =
                        ablation_run(&model_cfg, &cfg, mode, variant, &train, &val, &run_dir)?;
                    println!("{:<12} {:>6} {:>8.3} {:>8.3}", name, cfg.seed, mae, rmse);
                    rows.push(format!("{name},seed={},{mae},{rmse}", cfg.seed));
                }
            }
        }
        other => {
            return Err(LocaError::config(format!(
                "unknown sweep {other:?} (l|s|variants)"
            )))
        }
    }
    let report = out.join("ablation.csv");
    std::fs::write(&report, rows.join("\n") + "\n")
        .map_err(|e| LocaError::io(report.display().to_string(), e))?;
    println!("report: {}", report.display());
    Ok(())
}

/// Convenience used by tests and the learning-demonstration harness.
pub fn baseline_mae(train: &[Scene], val: &[Scene]) -> f64 {
    let mean = mean_count(train);
    val.iter()
        .map(|s| (s.count() as f64 - mean).abs())
        .sum::<f64>()
        / val.len().max(1) as f64
}

/// Write a density map plus sidecar through the standard export paths.
pub fn export_density(map: &DensityMap<f32>, tensor_path: &Path, pgm_path: Option<&Path>) -> Result<(), LocaError> {
    let file = std::fs::File::create(tensor_path)
        .map_err(|e| LocaError::io(tensor_path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    loca_tensor::io::write_tensor(&mut w, &map.values)?;
    if let Some(path) = pgm_path {
        write_density_pgm(map, path)?;
    }
    Ok(())
}
