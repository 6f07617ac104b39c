use popdg::diffusion::sample;
use popdg::metrics::{evaluate, EvalItem};
use popdg::pipeline::{synth_dataset, MotionArchetype, MusicArchetype, SyntheticSpec};
use popdg::popnet::{load_checkpoint, save_checkpoint, AttentionConfig, PopDg};
use popdg::skeleton::JointTree;
use popdg::training::{train, TrainConfig, TrainSample};

#[test]
fn train_checkpoint_sample_evaluate() {
    let spec = SyntheticSpec {
        sequences: 3,
        frames: 40,
        motion: MotionArchetype::SinusoidLimbs,
        music: MusicArchetype::Chirp,
        width: 6,
        ..Default::default()
    };
    let data = synth_dataset(&spec, 8).unwrap();
    let samples: Vec<_> = data
        .iter()
        .map(|d| TrainSample::new(d.motion.to_array(), d.music.features.clone(), 30).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps: 20,
        window: 32,
        diffusion_steps: 100,
        ..Default::default()
    };
    let model = PopDg::new(AttentionConfig::tiny(6), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(model, &samples, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.history.len(), 20);
    assert!(out.history.iter().all(|r| r.losses.simple.is_finite()));

    let path = dir.path().join("final.popw");
    assert!(path.is_file());
    let (model, schedule, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.step, 20);
    assert_eq!(schedule, out.schedule);
    save_checkpoint(&dir.path().join("again.popw"), &model, &schedule, manifest.step).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.popw")).unwrap()
    );

    let generated: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(k, d)| EvalItem {
            name: d.name.clone(),
            motion: sample(&model, &d.music, &schedule, 10, 0.0, k as u64).unwrap(),
            music: Some(d.music.clone()),
        })
        .collect();
    assert!(generated.iter().all(|g| g.motion.len() == 40));
    let reference: Vec<_> = data
        .iter()
        .map(|d| EvalItem {
            name: d.name.clone(),
            motion: d.motion.clone(),
            music: Some(d.music.clone()),
        })
        .collect();
    let report = evaluate(&generated, Some(&reference), &JointTree::smpl()).unwrap();
    assert_eq!(report.sequences.len(), 3);
    assert!(report.pfc.is_finite() && report.div_k.is_some() && report.bas.is_some());
    assert!(report.reference.is_some());
}
