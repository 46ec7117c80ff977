use atrousformer::decoder::Guidance;
use atrousformer::metrics::{mask_iou, LaneMasks};
use atrousformer::model::LaneModel;
use atrousformer::params::{load_checkpoint, save_checkpoint};
use atrousformer::synth::{generate_scene, load_dataset, sample_dir_name, save_sample};
use atrousformer::train::{evaluate, metrics_csv, train, TrainConfig};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig {
        steps: 3,
        batch: 2,
        eval_samples: 3,
        ..Default::default()
    };
    cfg.scene.height = 32;
    cfg.scene.width = 64;
    cfg.model.backbone.stage_channels = [8, 8, 16, 16];
    cfg.model.backbone.stage_heads = [2, 2, 4];
    cfg.model.backbone.slice = (2, 4);
    cfg.model.backbone.compressed = 16;
    cfg.model.global_heads = 4;
    cfg
}

#[test]
fn identical_configs_give_identical_logs() {
    let cfg = tiny();
    let (a, logs_a) = train(&cfg, |_| {}).unwrap();
    let (b, logs_b) = train(&cfg, |_| {}).unwrap();
    assert_eq!(metrics_csv(&logs_a), metrics_csv(&logs_b));
    let set = cfg.eval_set().unwrap();
    assert_eq!(evaluate(&a, &set).unwrap().csv(), evaluate(&b, &set).unwrap().csv());
}

#[test]
fn seeds_change_the_run() {
    let cfg = tiny();
    let other = TrainConfig { seed: 1, ..tiny() };
    let a = metrics_csv(&train(&cfg, |_| {}).unwrap().1);
    let b = metrics_csv(&train(&other, |_| {}).unwrap().1);
    assert_ne!(a, b);
}

#[test]
fn checkpoint_and_dataset_round_trip() {
    let cfg = tiny();
    let (model, _) = train(&cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&dir.path().join("ckpt"), &model).unwrap();
    let mut restored = LaneModel::init(99, cfg.model.clone()).unwrap();
    load_checkpoint(&dir.path().join("ckpt"), &mut restored).unwrap();

    let set = cfg.eval_set().unwrap();
    for (i, s) in set.iter().enumerate() {
        save_sample(&dir.path().join("data").join(sample_dir_name(i)), s).unwrap();
    }
    let loaded = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(loaded.len(), set.len());
    assert_eq!(evaluate(&model, &set).unwrap(), evaluate(&restored, &loaded).unwrap());
}

#[test]
fn uniform_arm_scores_lanes_identically() {
    let mut cfg = tiny();
    cfg.model.guidance = Guidance::Uniform;
    let (model, _) = train(&cfg, |_| {}).unwrap();
    for p in evaluate(&model, &cfg.eval_set().unwrap()).unwrap().predictions.chunks(2) {
        assert_eq!(p[0].exist_score, p[1].exist_score);
    }
}

#[test]
fn report_iou_matches_a_recount() {
    let cfg = tiny();
    let (model, _) = train(&cfg, |_| {}).unwrap();
    let set = cfg.eval_set().unwrap();
    let report = evaluate(&model, &set).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for s in &set {
        let out = model.forward(&s.image).unwrap();
        let pred = LaneMasks::from_probs(&out.seg, 0.5).unwrap();
        let gt = LaneMasks::from_probs(&s.masks, 0.5).unwrap();
        for lane in 0..s.lanes() {
            if s.exist[lane] {
                sum += mask_iou(pred.lane(lane), gt.lane(lane));
                n += 1;
            }
        }
    }
    assert!((report.mean_iou - sum / n.max(1) as f64).abs() < 1e-12);
    assert_eq!(report.samples, 3);
    let fresh = generate_scene(cfg.eval_seed(0), &cfg.scene).unwrap();
    assert_eq!(fresh.image.data(), set[0].image.data());
}
