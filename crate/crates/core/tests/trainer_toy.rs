//! Attack loop against the bundled toy detector.

use advpatch_core::creases::CreaseFieldConfig;
use advpatch_core::detector::toy;
use advpatch_core::loss::{similarity_loss, GuideImage, LossWeights};
use advpatch_core::synthetic::{generate_scenes, guide_pattern, SyntheticConfig};
use advpatch_core::trainer::{
    initial_state, load_checkpoint, log_to_csv, optimize_patch, run_steps, save_checkpoint, AttackConfig,
};
use advpatch_core::Scene;

fn fixture(n: usize) -> (Vec<Scene>, GuideImage) {
    let scenes = generate_scenes(n, 31, &SyntheticConfig::default());
    let guide = GuideImage::new(guide_pattern(24, 24, 4)).unwrap();
    (scenes, guide)
}

fn short_config() -> AttackConfig {
    AttackConfig {
        epochs: 2,
        batch_size: 2,
        lr: 0.01,
        seed: 3,
        ..AttackConfig::default()
    }
}

fn bits(img: &advpatch_core::Image) -> Vec<u64> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn seeded_runs_are_bit_identical_and_leave_detector_untouched() {
    let det = toy::toy_detector().unwrap();
    let digest = det.parameters_digest();
    let (scenes, guide) = fixture(6);
    let cfg = short_config();
    let (p1, l1) = optimize_patch(&scenes, &det, &guide, &cfg).unwrap();
    let (p2, l2) = optimize_patch(&scenes, &det, &guide, &cfg).unwrap();
    assert_eq!(bits(p1.image()), bits(p2.image()));
    assert_eq!(log_to_csv(&l1), log_to_csv(&l2));
    assert_eq!(l1.len(), 6);
    assert_eq!(det.parameters_digest(), digest);

    let other = AttackConfig { seed: 4, ..cfg };
    let (p3, _) = optimize_patch(&scenes, &det, &guide, &other).unwrap();
    assert_ne!(bits(p1.image()), bits(p3.image()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let det = toy::toy_detector().unwrap();
    let (scenes, guide) = fixture(6);
    let cfg = short_config();
    let (full, full_log) = optimize_patch(&scenes, &det, &guide, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.ckpt");
    let mut state = initial_state(&guide, &cfg).unwrap();
    let mut log = run_steps(&scenes, &det, &guide, &cfg, &mut state, Some(4), |_| {}).unwrap();
    save_checkpoint(&ckpt, &cfg, &state).unwrap();
    drop(state);

    let (cfg2, mut state) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.next_step, 4);
    log.extend(run_steps(&scenes, &det, &guide, &cfg2, &mut state, None, |_| {}).unwrap());
    assert_eq!(bits(state.patch.image()), bits(full.image()));
    assert_eq!(log_to_csv(&log), log_to_csv(&full_log));
}

#[test]
fn patch_stays_in_unit_range_every_step() {
    let det = toy::toy_detector().unwrap();
    let (scenes, guide) = fixture(4);
    let cfg = AttackConfig {
        lr: 0.2,
        ..short_config()
    };
    let mut state = initial_state(&guide, &cfg).unwrap();
    let total = cfg.total_steps(scenes.len());
    for step in 1..=total {
        run_steps(&scenes, &det, &guide, &cfg, &mut state, Some(step), |_| {}).unwrap();
        assert!(state.patch.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(state.next_step, total);
}

#[test]
fn similarity_only_objective_converges_to_guide() {
    let det = toy::toy_detector().unwrap();
    let (scenes, guide) = fixture(1);
    let cfg = AttackConfig {
        weights: LossWeights {
            alpha: 0.0,
            beta: 1.0,
            gamma: 0.0,
        },
        lr: 0.01,
        epochs: 500,
        batch_size: 1,
        creases: CreaseFieldConfig::disabled(),
        ..AttackConfig::default()
    };
    let (patch, log) = optimize_patch(&scenes, &det, &guide, &cfg).unwrap();
    assert_eq!(log.len(), 500);
    let sim = similarity_loss(&patch, &guide).unwrap();
    assert!(sim < 1e-3, "final similarity loss {sim}");
}

#[test]
fn smoothed_total_loss_is_non_increasing() {
    let det = toy::toy_detector().unwrap();
    let (scenes, guide) = fixture(8);
    let cfg = AttackConfig {
        epochs: 50,
        batch_size: 2,
        seed: 9,
        ..AttackConfig::default()
    };
    let (_, log) = optimize_patch(&scenes, &det, &guide, &cfg).unwrap();
    assert_eq!(log.len(), 200);
    let totals: Vec<f64> = log.iter().map(|r| r.breakdown.l_total).collect();
    let ma: Vec<f64> = totals.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        assert!(w[1] <= w[0], "moving average rises at window {i}: {} -> {}", w[0], w[1]);
    }
}
