use ndarray::Array2;

use super::*;
use crate::popnet::{load_checkpoint, AttentionConfig};
use crate::skeleton::{axis_angle, matrix_to_rot6d, PoseFrame, NUM_JOINTS};

const MUSIC_W: usize = 4;

fn clip(n: usize) -> TrainSample {
    let mut motion = Array2::zeros((n, POSE_DIM));
    let mut music = Array2::zeros((n, MUSIC_W));
    for i in 0..n {
        let ph = i as f64 * 0.2;
        let mut f = PoseFrame::identity([0.1 * ph.sin(), 0.0, 0.9 + 0.05 * ph.cos()]);
        for j in 0..NUM_JOINTS {
            f.joint_rot6d[j] = matrix_to_rot6d(&axis_angle([1.0, 0.0, 0.0], 0.3 * (ph + j as f64).sin()));
        }
        f.contacts[0] = if i % 10 < 5 { 1.0 } else { 0.0 };
        motion.row_mut(i).assign(&ndarray::arr1(&f.flatten()));
        for c in 0..MUSIC_W {
            music[[i, c]] = (ph * (c + 1) as f64 + 0.7 * c as f64 + 0.4).sin();
        }
    }
    TrainSample::new(motion, music, 30).unwrap()
}

fn model(zero_heads: bool) -> PopDg {
    let cfg = AttentionConfig {
        zero_init_heads: zero_heads,
        ..AttentionConfig::tiny(MUSIC_W)
    };
    PopDg::new(cfg, 1).unwrap()
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        window: 12,
        diffusion_steps: 50,
        ..Default::default()
    }
}

fn ctx(weights: LossWeights) -> LossContext {
    LossContext {
        schedule: NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap(),
        tree: JointTree::smpl(),
        assignment: ContactAssignment::default(),
        weights,
        fps: 30.0,
    }
}

#[test]
fn seeded_runs_are_identical() {
    let data = [clip(20), clip(16)];
    let a = train(model(true), &data, &cfg(6), None).unwrap();
    let b = train(model(true), &data, &cfg(6), None).unwrap();
    let losses = |o: &TrainOutcome| o.history.iter().map(|r| (r.t, r.losses)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.model.params(), b.model.params());
    let c = train(model(true), &data, &TrainConfig { seed: 9, ..cfg(6) }, None).unwrap();
    assert_ne!(losses(&a), losses(&c));
}

#[test]
fn zero_lambda_vlb_leaves_v_head_without_gradient() {
    let m = model(false);
    let s = clip(8);
    let c = ctx(LossWeights {
        lambda_vlb: 0.0,
        ..Default::default()
    });
    let z = q_sample(&c.schedule, s.motion.view(), 20, standard_normal(&mut ChaCha8Rng::seed_from_u64(1), 8, POSE_DIM).view())
        .unwrap();
    let ev = loss_and_grads(&m, m.params(), &c, s.motion.view(), z.view(), 20, 0.02, s.music.view(), Mode::Eval, None)
        .unwrap();
    for name in ["head.v.w", "head.v.b"] {
        let id = m.params().find(name).unwrap();
        assert!(ev.grads[id.0].iter().all(|&g| g == 0.0), "{name}");
    }
    let id = m.params().find("head.x.w").unwrap();
    assert!(ev.grads[id.0].iter().any(|&g| g != 0.0));
}

#[test]
fn gradient_check_on_a_subset() {
    let m = model(false);
    let s = clip(8);
    let c = ctx(LossWeights {
        lambda_vlb: 1.0,
        ..Default::default()
    });
    let z = q_sample(&c.schedule, s.motion.view(), 17, standard_normal(&mut ChaCha8Rng::seed_from_u64(2), 8, POSE_DIM).view())
        .unwrap();
    for fourth_order in [false, true] {
        let spec = GradCheckSpec {
            per_tensor: Some(2),
            fourth_order,
            step: if fourth_order { 1e-3 } else { 1e-4 },
            ..Default::default()
        };
        let r = check_gradients(&m, &c, s.motion.view(), z.view(), 17, 0.02, s.music.view(), Mode::Train { mask_seed: 3 }, spec)
            .unwrap();
        assert_eq!(r.failures, 0, "{r:?}");
        assert!(r.checked > 100);
        // the resolution floor must stay far below typical gradient sizes
        assert!(r.floored * 4 < r.checked, "{r:?}");
    }
}

#[test]
fn non_finite_input_aborts_with_step() {
    let mut s = clip(12);
    s.motion[[3, 5]] = f64::NAN;
    match train(model(true), &[s], &cfg(3), None) {
        Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let conf = TrainConfig {
        checkpoint_every: 2,
        ..cfg(4)
    };
    let out = train(model(true), &[clip(14)], &conf, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    let first: StepRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first, out.history[0]);
    let v: serde_json::Value = serde_json::from_str(lines[3]).unwrap();
    for key in ["step", "simple", "vlb", "fk", "va", "body", "total", "wall_time"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for f in ["step_000002.popw", "step_000004.popw", "final.popw"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (loaded, sched, manifest) = load_checkpoint(&dir.path().join("final.popw")).unwrap();
    assert_eq!(manifest.step, 4);
    assert_eq!(sched, out.schedule);
    assert_eq!(loaded.params().len(), out.model.params().len());
}

#[test]
fn short_run_reduces_the_simple_loss() {
    let data = [clip(12)];
    let conf = TrainConfig {
        weights: LossWeights {
            lambda_va: 0.0,
            lambda_body: 0.0,
            ..Default::default()
        },
        optimizer: OptimizerConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..cfg(150)
    };
    let out = train(model(true), &data, &conf, None).unwrap();
    let head: f64 = out.history[..10].iter().map(|r| r.losses.simple).sum::<f64>() / 10.0;
    let tail: f64 = out.history[140..].iter().map(|r| r.losses.simple).sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(train(model(true), &[], &cfg(1), None).is_err());
    let bad = TrainConfig { batch_size: 0, ..cfg(1) };
    assert!(matches!(train(model(true), &[clip(8)], &bad, None), Err(Error::Config { .. })));
    let wide = TrainSample::new(clip(8).motion, Array2::zeros((8, MUSIC_W + 1)), 30).unwrap();
    assert!(train(model(true), &[wide], &cfg(1), None).is_err());
    assert!(TrainSample::new(Array2::zeros((8, POSE_DIM)), Array2::zeros((7, 2)), 30).is_err());
    assert!(TrainSample::new(Array2::zeros((2, POSE_DIM)), Array2::zeros((2, 2)), 30).is_err());
}
