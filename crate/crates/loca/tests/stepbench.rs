use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use loca::config::{ModelConfig, TrainConfig};
use loca::data::{synth_generate, GenConfig};
use loca::model::{CountingMode, LocaModel, ModelVariant};
use loca::train::Trainer;

#[test]
#[ignore]
fn bench_train_step() {
    let gen_cfg = GenConfig { train_scenes: 8, val_scenes: 2, test_scenes: 2, ..Default::default() };
    let t0 = Instant::now();
    let data = synth_generate(&gen_cfg, 7).unwrap();
    println!("generation of 12 scenes: {:.2?}", t0.elapsed());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LocaModel::<f32>::new(&ModelConfig::default(), &mut rng).unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg, CountingMode::Few, ModelVariant::Full).unwrap();

    // warm
    trainer.train_step(&data.train[0..4].to_vec(), 0).unwrap();
    let t0 = Instant::now();
    let n = 5;
    for step in 0..n {
        let r = trainer.train_step(&data.train[0..4].to_vec(), step + 1).unwrap();
        if step == 0 { println!("loss {:?}", r.total); }
    }
    let per_step = t0.elapsed() / n as u32;
    println!("per-step (batch 4): {:.3?}  -> est 10k steps {:.1} min", per_step, per_step.as_secs_f64() * 10000.0 / 60.0);

    let t0 = Instant::now();
    let (_, c) = trainer.model.predict(&data.val[0].image.to_tensor(), &data.val[0].boxes).unwrap();
    println!("predict: {:.3?} count={c:.2}", t0.elapsed());
}
