//! End-to-end training behavior and generator statistics on the desk config.

use sparsedet::harness::config::Config;
use sparsedet::harness::scene::{foreground_fraction, generate_scenes};
use sparsedet::harness::train::{prepare_scenes, Trainer};
use sparsedet::model::Detector;
use sparsedet::sparse::Mode;

#[test]
fn one_iteration_on_a_single_object_scene() {
    let mut cfg = Config::desk_default();
    for c in &mut cfg.scene.spec.classes {
        c.count = (0, 0);
    }
    cfg.scene.spec.classes[0].count = (1, 1);
    let scenes = generate_scenes(&cfg.scene.spec, 1, 5).unwrap();
    assert_eq!(scenes[0].boxes.len(), 1);
    let mut t = Trainer::new(cfg).unwrap();
    let data = prepare_scenes(&t.model, &scenes).unwrap();
    let trace = t.run(&data, 1).unwrap();
    assert_eq!(trace.len(), 1);
    assert!(trace[0].loss.total.is_finite() && trace[0].loss.positives > 0);
}

/// Adam makes occasional single-step bumps; the loss falls block over block.
#[test]
fn loss_decreases_over_fifty_steps_on_one_scene() {
    let mut cfg = Config::desk_default();
    cfg.train.adam.lr = 1e-3;
    let scenes = generate_scenes(&cfg.scene.spec, 1, 11).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let data = prepare_scenes(&t.model, &scenes).unwrap();
    let trace = t.run(&data, 50).unwrap();
    let totals: Vec<f64> = trace.iter().map(|r| r.loss.total).collect();
    let blocks: Vec<f64> = totals.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "block means {blocks:?}");
    assert!(totals[49] < 0.2 * totals[0], "{} -> {}", totals[0], totals[49]);
}

/// The generator reproduces the sparse-foreground regime at the backbone
/// output, where diffusion operates.
#[test]
fn default_scenes_are_mostly_background() {
    let cfg = Config::desk_default();
    let mut model = Detector::new(cfg.model.clone(), 0).unwrap();
    let scenes = generate_scenes(&cfg.scene.spec, 100, cfg.scene.seed).unwrap();
    let data = prepare_scenes(&model, &scenes).unwrap();
    let bev = cfg.model.bev_spec();
    let mut mean = 0.0;
    for s in &data {
        let stage = model.forward_bev(&s.input, Mode::Eval).unwrap();
        mean += foreground_fraction(stage.bev.coords(), &s.boxes, &bev) / data.len() as f64;
    }
    assert!(mean > 0.0 && mean < 0.10, "foreground fraction {mean}");
}
