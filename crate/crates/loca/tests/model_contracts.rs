//! Architectural invariants: permutation behavior, shape contracts,
//! linearity of the correlation path, determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loca::config::ModelConfig;
use loca::gradsuite::toy_config;
use loca::layers::Ctx;
use loca::model::{LocaModel, ModelVariant};
use loca::ope::{AdaptVariant, ExemplarBox};
use loca_tensor::{Tape, Tensor};

fn toy_model(seed: u64) -> LocaModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LocaModel::new(&toy_config(), &mut rng).unwrap()
}

fn toy_model_f32(seed: u64) -> LocaModel<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LocaModel::new(&toy_config(), &mut rng).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor<f64> {
    Tensor::from_fn(&[side, side, 3], |_| rng.gen_range(0.0..1.0))
}

fn three_boxes() -> Vec<ExemplarBox> {
    vec![
        ExemplarBox::new(0.10, 0.15, 0.30, 0.40).unwrap(),
        ExemplarBox::new(0.55, 0.50, 0.85, 0.70).unwrap(),
        ExemplarBox::new(0.40, 0.65, 0.55, 0.95).unwrap(),
    ]
}

// ── encoder ─────────────────────────────────────────────────────────

#[test]
fn encoder_without_positions_is_token_permutation_equivariant() {
    let mut cfg = toy_config();
    cfg.pos_enc = false;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = LocaModel::<f64>::new(&cfg, &mut rng).unwrap();
    let side = cfg.feature_size;
    let dim = cfg.channels;
    let x = Tensor::from_fn(&[side, side, dim], |_| rng.gen_range(-1.0..1.0));

    let tokens = side * side;
    let mut perm: Vec<usize> = (0..tokens).collect();
    for i in (1..tokens).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let permuted = Tensor::from_fn(&[side, side, dim], |i| {
        let (t, c) = (i / dim, i % dim);
        x.data()[perm[t] * dim + c]
    });

    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xi = tape.constant(input);
        let out = model
            .encoder
            .global_self_attention(&mut tape, xi, &mut Ctx::eval())
            .unwrap();
        tape.value(out).to_vec()
    };
    let base = run(&x);
    let shuffled = run(&permuted);
    for t in 0..tokens {
        for c in 0..dim {
            let a = base[perm[t] * dim + c];
            let b = shuffled[t * dim + c];
            assert!(
                (a - b).abs() < 1e-5,
                "token {t} channel {c}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn encoded_image_carries_shape_and_config_hash() {
    let cfg = toy_config();
    let model = toy_model_f32(4);
    let mut tape = Tape::new();
    let img = tape.constant(&Tensor::from_fn(&[32, 32, 3], |i| (i as f32 * 0.1).sin().abs()));
    let enc = model
        .encoder
        .encode(&mut tape, img, 42, &mut Ctx::eval())
        .unwrap();
    assert_eq!(enc.features.shape(), &[cfg.feature_size, cfg.feature_size, cfg.channels]);
    assert_eq!(enc.source_id, 42);
    assert_eq!(enc.config_hash, cfg.hash());
}

// ── prototype extraction ────────────────────────────────────────────

struct OpeRun {
    prototypes: Vec<Vec<f64>>,
    intermediate_count: usize,
    intermediate_rows: Vec<usize>,
    last_equals_protos: bool,
}

fn run_ope(model: &LocaModel<f64>, image: &Tensor<f64>, boxes: &[ExemplarBox], variant: AdaptVariant) -> OpeRun {
    let mut tape = Tape::new();
    let img = tape.constant(image);
    let mut ctx = Ctx::eval();
    let enc = model.encoder.encode(&mut tape, img, 0, &mut ctx).unwrap();
    let mut shape_qs = Vec::new();
    let mut app_qs = Vec::new();
    for b in boxes {
        shape_qs.push(model.ope.shape_query(&mut tape, b).unwrap());
        app_qs.push(model.ope.appearance_query(&mut tape, &enc, b).unwrap());
    }
    let protos = model
        .ope
        .iterative_adapt(&mut tape, &shape_qs, &app_qs, &enc, model.encoder.positional_encoding(), variant)
        .unwrap();
    let last = *protos.intermediates.last().unwrap();
    let s = model.cfg.proto_size;
    let d = model.cfg.channels;
    let last_vals = tape.value(last).to_vec();
    let mut last_equals = true;
    for (i, &pv) in protos.proto_vars.iter().enumerate() {
        let got = tape.value(pv);
        let want = &last_vals[i * s * s * d..(i + 1) * s * s * d];
        if got != want {
            last_equals = false;
        }
    }
    OpeRun {
        prototypes: protos.proto_vars.iter().map(|&p| tape.value(p).to_vec()).collect(),
        intermediate_count: protos.intermediates.len(),
        intermediate_rows: protos
            .intermediates
            .iter()
            .map(|&i| tape.shape(i)[0])
            .collect(),
        last_equals_protos: last_equals,
    }
}

#[test]
fn adaptation_retains_all_intermediates_and_final_state() {
    let model = toy_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let image = random_image(&mut rng, 32);
    let boxes = three_boxes();
    let run = run_ope(&model, &image, &boxes, AdaptVariant::Full);
    let cfg = toy_config();
    assert_eq!(run.intermediate_count, cfg.adapt_iters);
    let rows = boxes.len() * cfg.proto_size * cfg.proto_size;
    assert!(run.intermediate_rows.iter().all(|&r| r == rows));
    assert!(run.last_equals_protos, "prototypes must alias the final state bitwise");
}

#[test]
fn single_iteration_returns_one_intermediate() {
    let mut cfg = toy_config();
    cfg.adapt_iters = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = LocaModel::<f64>::new(&cfg, &mut rng).unwrap();
    let image = random_image(&mut rng, 32);
    let run = run_ope(&model, &image, &three_boxes(), AdaptVariant::Full);
    assert_eq!(run.intermediate_count, 1);
    assert!(run.last_equals_protos);
}

#[test]
fn exemplar_permutation_permutes_prototypes() {
    let model = toy_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = random_image(&mut rng, 32);
    let boxes = three_boxes();
    let base = run_ope(&model, &image, &boxes, AdaptVariant::Full);
    let perm = [2usize, 0, 1];
    let permuted_boxes: Vec<ExemplarBox> = perm.iter().map(|&i| boxes[i]).collect();
    let permuted = run_ope(&model, &image, &permuted_boxes, AdaptVariant::Full);
    for (slot, &src) in perm.iter().enumerate() {
        for (a, b) in base.prototypes[src].iter().zip(permuted.prototypes[slot].iter()) {
            assert!((a - b).abs() < 1e-5, "prototype {slot}: {a} vs {b}");
        }
    }
}

#[test]
fn shape_query_depends_only_on_width_and_height() {
    let model = toy_model(10);
    // Dyadic coordinates: both widths and heights are exactly 0.25/0.125.
    let a = ExemplarBox::new(0.125, 0.125, 0.375, 0.25).unwrap();
    let b = ExemplarBox::new(0.5, 0.75, 0.75, 0.875).unwrap(); // same (w, h)
    let mut tape = Tape::new();
    let qa = model.ope.shape_query(&mut tape, &a).unwrap();
    let qb = model.ope.shape_query(&mut tape, &b).unwrap();
    assert_eq!(tape.value(qa), tape.value(qb));
    assert_eq!(tape.shape(qa), &[3, 3, 16]);
}

#[test]
fn appearance_query_is_shape_agnostic() {
    let model = toy_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = random_image(&mut rng, 32);
    let mut tape = Tape::new();
    let img = tape.constant(&image);
    let enc = model.encoder.encode(&mut tape, img, 0, &mut Ctx::eval()).unwrap();
    let wide = ExemplarBox::new(0.1, 0.4, 0.9, 0.6).unwrap(); // 4:1
    let tall = ExemplarBox::new(0.4, 0.1, 0.6, 0.9).unwrap(); // 1:4
    for b in [wide, tall] {
        let q = model.ope.appearance_query(&mut tape, &enc, &b).unwrap();
        assert_eq!(tape.shape(q), &[3, 3, 16]);
    }
    // Constant features pool to the same constant regardless of the box.
    let const_enc = {
        let c = tape.constant(&Tensor::filled(&[4, 4, 16], 0.75));
        loca::encoder::EncodedImage { features: tape.tensor(c), var: c, source_id: 0, config_hash: 0 }
    };
    for b in [wide, tall] {
        let q = model.ope.appearance_query(&mut tape, &const_enc, &b).unwrap();
        assert!(tape.value(q).iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }
}

#[test]
fn simple_sum_variant_differs_from_full_adaptation() {
    let model = toy_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let image = random_image(&mut rng, 32);
    let boxes = three_boxes();
    let full = run_ope(&model, &image, &boxes, AdaptVariant::Full);
    let summed = run_ope(&model, &image, &boxes, AdaptVariant::SimpleSum);
    let max_diff = full
        .prototypes
        .iter()
        .flatten()
        .zip(summed.prototypes.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff > 1e-6, "variants should not coincide, diff {max_diff}");
}

#[test]
fn adaptation_rejects_query_count_mismatch() {
    let model = toy_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let image = random_image(&mut rng, 32);
    let boxes = three_boxes();
    let mut tape = Tape::new();
    let img = tape.constant(&image);
    let mut ctx = Ctx::eval();
    let enc = model.encoder.encode(&mut tape, img, 0, &mut ctx).unwrap();
    let shape_qs = vec![model.ope.shape_query(&mut tape, &boxes[0]).unwrap()];
    let app_qs = vec![
        model.ope.appearance_query(&mut tape, &enc, &boxes[0]).unwrap(),
        model.ope.appearance_query(&mut tape, &enc, &boxes[1]).unwrap(),
    ];
    assert!(model
        .ope
        .iterative_adapt(&mut tape, &shape_qs, &app_qs, &enc, None, AdaptVariant::Full)
        .is_err());
}

#[test]
fn zero_shot_intermediates_match_query_count() {
    let model = toy_model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let image = random_image(&mut rng, 32);
    let mut tape = Tape::new();
    let img = tape.constant(&image);
    let mut ctx = Ctx::eval();
    let enc = model.encoder.encode(&mut tape, img, 0, &mut ctx).unwrap();
    let protos = model.ope.zero_shot_adapt(&mut tape, &enc, None).unwrap();
    let cfg = toy_config();
    assert_eq!(protos.intermediates.len(), cfg.adapt_iters);
    assert_eq!(protos.len(), cfg.zero_shot_queries);
    let rows = cfg.zero_shot_queries * cfg.proto_size * cfg.proto_size;
    for &i in &protos.intermediates {
        assert_eq!(tape.shape(i), &[rows, cfg.channels]);
    }
}

// ── full model ──────────────────────────────────────────────────────

#[test]
fn predictions_are_deterministic() {
    let model = toy_model_f32(20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let image = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0f32..1.0));
    let boxes = three_boxes();
    let (map_a, count_a) = model.predict(&image, &boxes).unwrap();
    let (map_b, count_b) = model.predict(&image, &boxes).unwrap();
    assert_eq!(map_a.values.data(), map_b.values.data());
    assert_eq!(count_a, count_b);
}

#[test]
fn exemplar_order_does_not_change_the_density_map() {
    let model = toy_model(22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let image = random_image(&mut rng, 32);
    let boxes = three_boxes();
    let (base, _) = model.predict(&image, &boxes).unwrap();
    let reordered = vec![boxes[2], boxes[0], boxes[1]];
    let (swapped, _) = model.predict(&image, &reordered).unwrap();
    let max_diff = base
        .values
        .data()
        .iter()
        .zip(swapped.values.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-5, "max abs deviation {max_diff}");
}

#[test]
fn zero_shot_prediction_runs_without_boxes() {
    let model = toy_model_f32(24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let image = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0f32..1.0));
    let (map, count) = model.predict(&image, &[]).unwrap();
    assert_eq!(map.values.shape(), &[32, 32]);
    assert!(count.is_finite());
    let (_, few_count) = model.predict(&image, &three_boxes()).unwrap();
    assert_ne!(count, few_count, "zero-shot and few-shot paths should differ");
}

#[test]
fn doubling_a_prototype_doubles_its_response_exactly() {
    let model = toy_model_f32(26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let features = Tensor::from_fn(&[4, 4, 16], |_| rng.gen_range(-1.0f32..1.0));
    let proto = Tensor::from_fn(&[3, 3, 16], |_| rng.gen_range(-1.0f32..1.0));
    let doubled = Tensor::from_fn(&[3, 3, 16], |i| proto.data()[i] * 2.0);

    let mut tape = Tape::new();
    let f = tape.constant(&features);
    let enc = loca::encoder::EncodedImage {
        features: tape.tensor(f),
        var: f,
        source_id: 0,
        config_hash: 0,
    };
    let p1 = tape.constant(&proto);
    let p2 = tape.constant(&doubled);
    let r = model.correlate_all(&mut tape, &enc, &[p1, p2]).unwrap();
    let single = tape.value(r[0]).to_vec();
    let double = tape.value(r[1]).to_vec();
    for (a, b) in single.iter().zip(double.iter()) {
        assert_eq!(a * 2.0, *b, "correlation must scale exactly");
    }
}

#[test]
fn identical_prototypes_give_identical_responses() {
    let model = toy_model_f32(28);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let features = Tensor::from_fn(&[4, 4, 16], |_| rng.gen_range(-1.0f32..1.0));
    let proto = Tensor::from_fn(&[3, 3, 16], |_| rng.gen_range(-1.0f32..1.0));
    let mut tape = Tape::new();
    let f = tape.constant(&features);
    let enc = loca::encoder::EncodedImage {
        features: tape.tensor(f),
        var: f,
        source_id: 0,
        config_hash: 0,
    };
    let p1 = tape.constant(&proto);
    let p2 = tape.constant(&proto);
    let r = model.correlate_all(&mut tape, &enc, &[p1, p2]).unwrap();
    assert_eq!(tape.value(r[0]), tape.value(r[1]));
    // Zero prototype gives a zero response.
    let z = tape.constant(&Tensor::zeros(&[3, 3, 16]));
    let rz = model.correlate_all(&mut tape, &enc, &[z]).unwrap();
    assert!(tape.value(rz[0]).iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_output_matches_configured_resolution() {
    for (input, feat) in [(32usize, 4usize), (64, 8), (128, 16)] {
        let cfg = ModelConfig {
            input_size: input,
            feature_size: feat,
            channels: 16,
            attn_layers: 1,
            heads: 2,
            ffn_hidden: 16,
            dropout: 0.0,
            backbone_widths: [4, 4, 8, 8],
            proto_size: 3,
            adapt_iters: 1,
            zero_shot_queries: 2,
            shared_adapt_weights: true,
            shape_hidden: 8,
            decoder_widths: [8, 8, 4],
            pos_enc: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = LocaModel::<f32>::new(&cfg, &mut rng).unwrap();
        let image = Tensor::from_fn(&[input, input, 3], |i| ((i % 7) as f32) / 7.0);
        let (map, _) = model.predict(&image, &three_boxes()).unwrap();
        assert_eq!(map.values.shape(), &[input, input]);
    }
}

#[test]
fn regress_density_rejects_wrong_feature_shape() {
    let model = toy_model_f32(31);
    let mut tape = Tape::new();
    let bad = tape.constant(&Tensor::<f32>::zeros(&[5, 5, 16]));
    assert!(model.regress_density(&mut tape, bad).is_err());
}

#[test]
fn no_ope_variant_uses_pooled_prototypes() {
    let model = toy_model_f32(32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let image = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0f32..1.0));
    let boxes = three_boxes();
    let (full, _) = model.predict_with_variant(&image, &boxes, ModelVariant::Full).unwrap();
    let (pooled, _) = model.predict_with_variant(&image, &boxes, ModelVariant::NoOpe).unwrap();
    let diff = full
        .values
        .data()
        .iter()
        .zip(pooled.values.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff > 0.0, "removing prototype extraction must change the output");
}

#[test]
fn estimate_count_matches_direct_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let values = Tensor::<f64>::from_fn(&[17, 23], |_| rng.gen_range(-0.2..1.0));
    let map = loca::DensityMap::new(values.clone()).unwrap();
    let mut oracle = 0.0;
    for &v in values.data() {
        oracle += v;
    }
    assert!((loca::estimate_count(&map) - oracle).abs() < 1e-5);
    let zero = loca::DensityMap::new(Tensor::<f64>::zeros(&[8, 8])).unwrap();
    assert_eq!(loca::estimate_count(&zero), 0.0);
}
