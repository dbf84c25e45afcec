use loca::config::{ModelConfig, TrainConfig};
use loca::data::load_dataset;
use loca::model::{CountingMode, LocaModel, ModelVariant};
use loca::train::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn overfit_one_scene() {
    let scenes = load_dataset(std::path::Path::new("/tmp/demo/data/train")).unwrap();
    let scene = scenes.iter().find(|s| s.count() >= 10 && s.count() <= 20).unwrap().clone();
    println!("scene {} count {}", scene.id, scene.count());
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-4);
    let cfg = TrainConfig { epochs: 1, flip_augment: false, learning_rate: lr, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = LocaModel::<f32>::new(&ModelConfig::default(), &mut rng).unwrap();
    let mut trainer = Trainer::new(model, cfg, CountingMode::Few, ModelVariant::Full).unwrap();
    let batch = vec![scene.clone(); 4];
    for step in 0..400 {
        let r = trainer.train_step(&batch, step).unwrap();
        if step % 40 == 0 || step == 399 {
            let (_, count) = trainer.model.predict(&scene.image.to_tensor(), &scene.boxes).unwrap();
            println!("step {step:>4} loss {:.5} ose {:.5} count {count:.2}", r.total, r.l_ose);
        }
    }
}
