use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use loca::config::ModelConfig;
use loca::data::{synth_generate, GenConfig};
use loca::layers::Ctx;
use loca::loss::squared_error_node;
use loca::model::{LocaModel, ModelVariant};
use loca::density::gt_density;
use loca_tensor::Tape;

#[test]
#[ignore]
fn phase_bench() {
    let gen_cfg = GenConfig { train_scenes: 2, val_scenes: 1, test_scenes: 1, ..Default::default() };
    let data = synth_generate(&gen_cfg, 7).unwrap();
    let scene = &data.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LocaModel::<f32>::new(&ModelConfig::default(), &mut rng).unwrap();
    let image = scene.image.to_tensor::<f32>();
    let gt = gt_density::<f32>(&scene.points, &scene.boxes, 128, 128, None).unwrap();

    let time = |name: &str, f: &mut dyn FnMut()| {
        f();
        let t0 = Instant::now();
        for _ in 0..5 { f(); }
        println!("{name:<28} {:>8.2} ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);
    };

    time("encode only", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let mut ctx = Ctx::eval();
        let _ = model.encoder.encode(&mut tape, img, 0, &mut ctx).unwrap();
    });

    time("forward no-aux", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let mut ctx = Ctx::eval();
        let _ = model.forward(&mut tape, img, &scene.boxes, ModelVariant::Full, false, 0, &mut ctx).unwrap();
    });

    time("forward with-aux", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let mut ctx = Ctx::eval();
        let _ = model.forward(&mut tape, img, &scene.boxes, ModelVariant::Full, true, 0, &mut ctx).unwrap();
    });

    time("forward+loss+backward", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let mut ctx = Ctx::train(1);
        let out = model.forward(&mut tape, img, &scene.boxes, ModelVariant::Full, true, 0, &mut ctx).unwrap();
        let gt_node = tape.constant(&gt.values);
        let mut root = squared_error_node(&mut tape, out.main_map, gt_node).unwrap();
        for &aux in &out.aux_maps {
            let t = squared_error_node(&mut tape, aux, gt_node).unwrap();
            let s = tape.scale(t, 0.3);
            root = tape.add(root, s).unwrap();
        }
        tape.backward(root).unwrap();
    });
}

#[test]
#[ignore]
fn encoder_stage_bench() {
    let gen_cfg = GenConfig { train_scenes: 2, val_scenes: 1, test_scenes: 1, ..Default::default() };
    let data = synth_generate(&gen_cfg, 7).unwrap();
    let scene = &data.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LocaModel::<f32>::new(&ModelConfig::default(), &mut rng).unwrap();
    let image = scene.image.to_tensor::<f32>();

    let time = |name: &str, f: &mut dyn FnMut()| {
        f();
        let t0 = Instant::now();
        for _ in 0..5 { f(); }
        println!("{name:<28} {:>8.2} ms", t0.elapsed().as_secs_f64() / 5.0 * 1e3);
    };

    time("backbone", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let _ = model.encoder.backbone_forward(&mut tape, img).unwrap();
    });
    time("backbone+fuse", &mut || {
        let mut tape = Tape::new();
        let img = tape.constant(&image);
        let scales = model.encoder.backbone_forward(&mut tape, img).unwrap();
        let _ = model.encoder.fuse_and_project(&mut tape, &scales).unwrap();
    });
    time("attention only", &mut || {
        let mut tape = Tape::new();
        let x = tape.constant(&loca_tensor::Tensor::<f32>::from_fn(&[16, 16, 32], |i| (i as f32 * 0.1).sin()));
        let mut ctx = Ctx::eval();
        let _ = model.encoder.global_self_attention(&mut tape, x, &mut ctx).unwrap();
    });
}
