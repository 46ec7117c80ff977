use atrousformer::backbone::{backbone_forward, Backbone, BackboneConfig};
use atrousformer::init::Initializer;
use atrousformer::losses::total_loss;
use atrousformer::model::{LaneModel, ModelConfig};
use atrousformer::params::Parameterized;
use atrousformer::synth::{generate_scene, SceneConfig};
use atrousformer::{Precision, Tensor};

fn default_backbone(seed: u64, local_attention: bool) -> (Backbone, Initializer) {
    let mut init = Initializer::new(seed, Precision::Double);
    let cfg = BackboneConfig {
        local_attention,
        ..Default::default()
    };
    (Backbone::init(&mut init, cfg).unwrap(), init)
}

#[test]
fn default_extents() {
    let (bb, mut init) = default_backbone(0, true);
    let img = init.sample(&[3, 64, 160]).unwrap();
    let s1 = bb.stage_forward(&img, 1).unwrap();
    assert_eq!(s1.shape(), &[16, 16, 40]);
    assert_eq!(backbone_forward(&img, &bb).unwrap().shape(), &[128, 8, 20]);

    let (plain, _) = default_backbone(0, false);
    assert_eq!(plain.forward(&img).unwrap().shape(), &[128, 8, 20]);
}

#[test]
fn dilated_stages_keep_their_extent() {
    let (bb, mut init) = default_backbone(1, true);
    let x = init.sample(&[32, 8, 20]).unwrap();
    let y = bb.stage_forward(&x, 3).unwrap();
    assert_eq!(y.shape(), &[64, 8, 20]);
    assert_eq!(bb.stage_forward(&y, 4).unwrap().shape(), &[128, 8, 20]);
}

// Stage 4 stacks two 3×3 convolutions of dilation 4, so the centre output
// reads rows at multiples of 4 from it and nothing in between.
#[test]
fn stage_four_taps_sit_four_rows_apart() {
    let (bb, mut init) = default_backbone(2, true);
    let x = init.sample(&[64, 17, 17]).unwrap().to_param();
    let y = bb.stage_forward(&x, 4).unwrap();
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut pick = vec![0.0; c * h * w];
    for ch in 0..c {
        pick[(ch * h + 8) * w + 8] = 1.0;
    }
    y.mul(&Tensor::from_vec(&[c, h, w], pick).unwrap()).unwrap().sum().unwrap().backward().unwrap();
    let g = x.grad().unwrap();
    let row_energy = |r: usize| -> f64 {
        (0..64).map(|ch| g[(ch * 17 + r) * 17 + 8].abs()).sum()
    };
    for r in [0, 4, 8, 12, 16] {
        assert!(row_energy(r) > 0.0, "row {r}");
    }
    for r in [1, 3, 5, 7, 9, 11, 13, 15] {
        assert_eq!(row_energy(r), 0.0, "row {r}");
    }
}

#[test]
fn gradient_reaches_the_stage_two_attention() {
    let (bb, mut init) = default_backbone(3, true);
    let img = init.sample(&[3, 64, 160]).unwrap();
    let y = bb.forward(&img).unwrap();
    let probe = init.sample(y.shape()).unwrap();
    y.mul(&probe).unwrap().sum().unwrap().backward().unwrap();
    let attention: Vec<_> = bb
        .named_params()
        .into_iter()
        .filter(|(n, _)| n.starts_with("enhance2.attention"))
        .collect();
    assert!(!attention.is_empty());
    for (name, t) in attention {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn every_parameter_gets_a_finite_gradient() {
    let model = LaneModel::init(4, ModelConfig::default()).unwrap();
    let scene = SceneConfig::default();
    for seed in 0..2 {
        let s = generate_scene(seed, &scene).unwrap();
        let out = model.forward(&s.image).unwrap();
        let (loss, _) = total_loss(&out, &model.targets(&s).unwrap()).unwrap();
        loss.scale(0.5).unwrap().backward().unwrap();
    }
    for (name, t) in model.named_params() {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
    }
}
