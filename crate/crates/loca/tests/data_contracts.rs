//! Generator and dataset-format contracts: determinism, split category
//! disjointness, annotation round-trips, invariant enforcement.

use std::collections::BTreeSet;

use loca::data::{
    load_dataset, save_dataset, split_categories, synth_generate, DensityRegime, GenConfig,
    ImageRgb,
};
use loca::error::LocaError;

fn small_config() -> GenConfig {
    GenConfig {
        image_size: 64,
        train_scenes: 12,
        val_scenes: 6,
        test_scenes: 6,
        categories_per_split: 3,
        count_min: 4,
        count_max: 9,
        exemplars: 3,
        distractors_max: 2,
        density: DensityRegime::Sparse,
        size_min: 0.03,
        size_max: 0.07,
        aspect_min: 0.6,
        aspect_max: 1.7,
    }
}

#[test]
fn same_seed_is_bitwise_identical() {
    let cfg = small_config();
    let a = synth_generate(&cfg, 99).unwrap();
    let b = synth_generate(&cfg, 99).unwrap();
    for (x, y) in a.train.iter().zip(b.train.iter()) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image.data, y.image.data);
        assert_eq!(x.points, y.points);
        assert_eq!(x.category, y.category);
    }
    let c = synth_generate(&cfg, 100).unwrap();
    assert_ne!(
        a.train[0].image.data, c.train[0].image.data,
        "different seeds should differ"
    );
}

#[test]
fn split_categories_are_disjoint() {
    let data = synth_generate(&small_config(), 5).unwrap();
    let train = split_categories(&data.train);
    let val = split_categories(&data.val);
    let test = split_categories(&data.test);
    assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
    assert!(train.is_disjoint(&val), "train/val categories overlap");
    assert!(train.is_disjoint(&test), "train/test categories overlap");
    assert!(val.is_disjoint(&test), "val/test categories overlap");
}

#[test]
fn fixed_count_range_pins_every_scene() {
    let mut cfg = small_config();
    cfg.count_min = 5;
    cfg.count_max = 5;
    let data = synth_generate(&cfg, 17).unwrap();
    for scene in data.train.iter().chain(&data.val).chain(&data.test) {
        assert_eq!(scene.count(), 5, "scene {} has {} points", scene.id, scene.count());
    }
}

#[test]
fn exemplar_boxes_enclose_exactly_one_point() {
    let data = synth_generate(&small_config(), 31).unwrap();
    for scene in &data.train {
        assert_eq!(scene.boxes.len(), 3);
        for b in &scene.boxes {
            let inside = scene.points.iter().filter(|&&(x, y)| b.contains(x, y)).count();
            assert_eq!(inside, 1, "scene {}", scene.id);
        }
        scene.validate().unwrap();
    }
}

#[test]
fn instance_aspects_vary_within_scenes() {
    let data = synth_generate(&small_config(), 8).unwrap();
    // At least some scene must mix aspect ratios when the category range
    // is non-degenerate.
    let varied = data.train_meta.iter().any(|meta| {
        let min = meta.target_aspects.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = meta.target_aspects.iter().cloned().fold(0.0, f64::max);
        max / min > 1.15
    });
    assert!(varied, "no scene with mixed target aspects");
}

#[test]
fn oversized_objects_make_the_spec_infeasible() {
    let mut cfg = small_config();
    cfg.size_min = 0.25;
    cfg.size_max = 0.25;
    cfg.count_min = 30;
    cfg.count_max = 30;
    cfg.exemplars = 3;
    match synth_generate(&cfg, 1) {
        Err(LocaError::Infeasible(msg)) => assert!(!msg.is_empty()),
        Err(other) => panic!("expected infeasible-spec error, got {other}"),
        Ok(_) => panic!("expected infeasible-spec error, generation succeeded"),
    }
}

#[test]
fn dense_regime_packs_tighter_than_sparse() {
    let mut cfg = small_config();
    cfg.count_min = 12;
    cfg.count_max = 12;
    cfg.size_min = 0.115;
    cfg.size_max = 0.12;
    cfg.aspect_min = 1.0;
    cfg.aspect_max = 1.0;
    cfg.exemplars = 1;
    cfg.count_min = 12;
    cfg.train_scenes = 4;
    cfg.val_scenes = 1;
    cfg.test_scenes = 1;
    cfg.density = DensityRegime::Dense;
    assert!(synth_generate(&cfg, 3).is_ok(), "dense packing should fit 20 objects");
    cfg.density = DensityRegime::Sparse;
    assert!(
        synth_generate(&cfg, 3).is_err(),
        "sparse separation cannot fit 20 large objects"
    );
}

#[test]
fn dataset_round_trip_preserves_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&small_config(), 44).unwrap();
    save_dataset(dir.path(), &data.val).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), data.val.len());
    for (a, b) in data.val.iter().zip(loaded.iter()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.category, b.category);
        assert_eq!(a.points, b.points);
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.image.data, b.image.data);
    }
}

#[test]
fn malformed_box_is_rejected_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    ImageRgb::new(8, 8).write_ppm(&dir.path().join("images/000000.ppm")).unwrap();
    let line = r#"{"id":0,"image":"images/000000.ppm","category":1,"points":[[0.5,0.5]],"boxes":[[0.8,0.2,0.3,0.4]]}"#;
    std::fs::write(dir.path().join("annotations.jsonl"), format!("{line}\n")).unwrap();
    match load_dataset(dir.path()) {
        Err(LocaError::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected parse error with line number, got {other:?}"),
    }
}

#[test]
fn json_syntax_error_carries_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    ImageRgb::new(8, 8).write_ppm(&dir.path().join("images/000000.ppm")).unwrap();
    let good = r#"{"id":0,"image":"images/000000.ppm","category":1,"points":[[0.5,0.5]],"boxes":[]}"#;
    std::fs::write(
        dir.path().join("annotations.jsonl"),
        format!("{good}\nnot json at all\n"),
    )
    .unwrap();
    match load_dataset(dir.path()) {
        Err(LocaError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error on line 2, got {other:?}"),
    }
}

#[test]
fn box_enclosing_two_points_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    ImageRgb::new(8, 8).write_ppm(&dir.path().join("images/000000.ppm")).unwrap();
    let line = r#"{"id":7,"image":"images/000000.ppm","category":1,"points":[[0.5,0.5],[0.55,0.55]],"boxes":[[0.4,0.4,0.6,0.6]]}"#;
    std::fs::write(dir.path().join("annotations.jsonl"), format!("{line}\n")).unwrap();
    match load_dataset(dir.path()) {
        Err(LocaError::InvalidScene { id, .. }) => assert_eq!(id, 7),
        other => panic!("expected scene invariant violation, got {other:?}"),
    }
}

#[test]
fn parsed_scene_count_matches_annotation_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(&small_config(), 45).unwrap();
    save_dataset(dir.path(), &data.test).unwrap();
    let lines = loca::data::count_annotation_lines(dir.path()).unwrap();
    let scenes = load_dataset(dir.path()).unwrap();
    assert_eq!(lines, scenes.len());
}

#[test]
fn ppm_round_trip_and_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = ImageRgb::new(5, 3);
    for (i, b) in img.data.iter_mut().enumerate() {
        *b = (i * 7 % 256) as u8;
    }
    let path = dir.path().join("img.ppm");
    img.write_ppm(&path).unwrap();
    let back = ImageRgb::read_ppm(&path).unwrap();
    assert_eq!(back, img);

    assert!(ImageRgb::parse_ppm(b"P5\n2 2\n255\n....").is_err(), "P5 is not P6");
    assert!(ImageRgb::parse_ppm(b"P6\n2 2\n255\nxx").is_err(), "truncated pixels");
    // Comments in the header are tolerated.
    let mut with_comment = b"P6\n# comment line\n1 1\n255\n".to_vec();
    with_comment.extend_from_slice(&[1, 2, 3]);
    let parsed = ImageRgb::parse_ppm(&with_comment).unwrap();
    assert_eq!((parsed.width, parsed.height), (1, 1));
}

#[test]
fn flipped_scene_mirrors_annotations() {
    let data = synth_generate(&small_config(), 46).unwrap();
    let scene = &data.train[0];
    let flipped = scene.flipped_horizontal();
    assert_eq!(flipped.count(), scene.count());
    for (&(x, y), &(fx, fy)) in scene.points.iter().zip(flipped.points.iter()) {
        assert!((fx - (1.0 - x)).abs() < 1e-12);
        assert_eq!(fy, y);
    }
    flipped.validate().unwrap();
    let double = flipped.flipped_horizontal();
    assert_eq!(double.image.data, scene.image.data);
}

#[test]
fn generated_categories_cover_multiple_shapes() {
    let mut cfg = small_config();
    cfg.categories_per_split = 6;
    cfg.train_scenes = 30;
    let data = synth_generate(&cfg, 50).unwrap();
    let cats: BTreeSet<u32> = data.train.iter().map(|s| s.category).collect();
    assert!(cats.len() >= 3, "expected several categories targeted, got {cats:?}");
}
