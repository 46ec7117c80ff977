use atrousformer::attention::{
    atrous_schedule, attention_stage_traced, dense_masked_oracle, dot_count, global_atrousformer,
    local_atrousformer, AtrousFormer, AttnConfig, AttnMode, BandFault, StageAxis, StageOptions, StageParams,
};
use atrousformer::init::Initializer;
use atrousformer::tensor::gradcheck::grad_check;
use atrousformer::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

#[derive(Debug, Clone, Copy)]
struct Case {
    h: usize,
    w: usize,
    c: usize,
    cfg: AttnConfig,
}

fn random_case(rng: &mut ChaCha8Rng, local: bool) -> Case {
    let h = rng.random_range(1..=12);
    let w = rng.random_range(1..=12);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let c = heads * rng.random_range(1..=16 / heads);
    let density = rng.random_range(0..=2);
    let cfg = if local {
        let dr = divisors(h);
        let dc = divisors(w);
        let slice = (dr[rng.random_range(0..dr.len())], dc[rng.random_range(0..dc.len())]);
        AttnConfig::local(c, heads, density, slice)
    } else {
        AttnConfig::global(c, heads, density)
    };
    Case { h, w, c, cfg }
}

fn oracle_gap(case: Case, seed: u64, precision: Precision) -> f64 {
    let mut init = Initializer::new(seed, precision);
    let block = AtrousFormer::init(&mut init, case.cfg).unwrap();
    let x = init.sample(&[case.h, case.w, case.c]).unwrap();
    let fast = block.forward(&x).unwrap();
    let dense = block.oracle(&x).unwrap();
    max_abs_diff(&fast, &dense)
}

#[test]
fn gather_matches_dense_oracle_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..60 {
        let case = random_case(&mut rng, i % 2 == 1);
        let d64 = oracle_gap(case, i, Precision::Double);
        assert!(d64 < 1e-10, "{case:?}: double gap {d64}");
        let d32 = oracle_gap(case, i, Precision::Single);
        assert!(d32 < 1e-5, "{case:?}: single gap {d32}");
    }
}

#[test]
fn shifted_band_is_caught_by_the_oracle() {
    let cfg = AttnConfig::global(4, 2, 2);
    let mut init = Initializer::new(3, Precision::Double);
    let params = StageParams::init(&mut init, 4).unwrap();
    let x = init.sample(&[8, 6, 4]).unwrap();
    let options = StageOptions {
        fault: Some(BandFault { band: 1, shift: 1 }),
        ..Default::default()
    };
    let (bad, _) = attention_stage_traced(&x, &params, &cfg, &options).unwrap();
    let dense = dense_masked_oracle(&x, &params, &cfg).unwrap();
    assert!(max_abs_diff(&bad, &dense) > 1e-3);
}

#[test]
fn full_map_slice_equals_global() {
    for seed in 0..10 {
        let (h, w) = (6, 10);
        let cfg = AttnConfig::local(8, 2, 2, (h, w));
        let mut init = Initializer::new(seed, Precision::Double);
        let block = AtrousFormer::init(&mut init, cfg).unwrap();
        let x = init.sample(&[h, w, 8]).unwrap();
        let local = local_atrousformer(&x, &block.row, &block.col, &cfg).unwrap();
        let global = global_atrousformer(&x, &block.row, &block.col, &cfg).unwrap();
        assert!(max_abs_diff(&local, &global) < 1e-6, "seed {seed}");
    }
}

#[test]
fn row_stage_output_ignores_other_column_slices() {
    let (h, w, c) = (4, 6, 4);
    let cfg = AttnConfig::local(c, 2, 1, (2, 3));
    let mut init = Initializer::new(11, Precision::Double);
    let params = StageParams::init(&mut init, c).unwrap();
    let x = init.sample(&[h, w, c]).unwrap();
    let mut data = x.to_vec();
    // zero the second column slice
    for r in 0..h {
        for col in 3..w {
            for ch in 0..c {
                data[(r * w + col) * c + ch] = 0.0;
            }
        }
    }
    let y = Tensor::from_vec(&[h, w, c], data).unwrap();
    let run = |t: &Tensor| attention_stage_traced(t, &params, &cfg, &StageOptions::default()).unwrap().0;
    let (a, b) = (run(&x), run(&y));
    for r in 0..h {
        for col in 0..3 {
            for ch in 0..c {
                let i = (r * w + col) * c + ch;
                assert_eq!(a.data()[i], b.data()[i]);
            }
        }
    }
    assert!(max_abs_diff(&a, &b) > 1e-3);
}

#[test]
fn pad_value_does_not_matter() {
    let cfg = AttnConfig::global(4, 1, 2);
    let mut init = Initializer::new(5, Precision::Double);
    let params = StageParams::init(&mut init, 4).unwrap();
    let x = init.sample(&[8, 5, 4]).unwrap();
    let zero = attention_stage_traced(&x, &params, &cfg, &StageOptions::default()).unwrap().0;
    let junk = StageOptions {
        pad_value: 1234.5,
        ..Default::default()
    };
    let other = attention_stage_traced(&x, &params, &cfg, &junk).unwrap().0;
    assert_eq!(zero.data(), other.data());
}

#[test]
fn affinities_are_distributions_over_live_keys() {
    let cfg = AttnConfig::local(4, 2, 2, (4, 3));
    let mut init = Initializer::new(9, Precision::Double);
    let params = StageParams::init(&mut init, 4).unwrap();
    let x = init.sample(&[8, 6, 4]).unwrap();
    let (_, trace) = attention_stage_traced(&x, &params, &cfg, &StageOptions::default()).unwrap();
    for (a, valid) in trace.affinity.iter().zip(&trace.valid) {
        let l = a.shape()[3];
        for (row, live) in a.data().chunks(l).zip(valid.chunks(l)) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (p, ok) in row.iter().zip(live) {
                if !ok {
                    assert_eq!(*p, 0.0);
                }
            }
        }
    }
    let stacked = trace.affinity_tensor().unwrap();
    assert_eq!(stacked.shape(), &[2, 8, 2, 3, 5 * 3]);
}

#[test]
fn instrumented_dot_products_match_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..10 {
        let h = rng.random_range(2..=12);
        let w = rng.random_range(2..=12);
        let density = rng.random_range(0..=3);
        let dr = divisors(h);
        let dc = divisors(w);
        let slice = (dr[rng.random_range(0..dr.len())], dc[rng.random_range(0..dc.len())]);
        let mut init = Initializer::new(i, Precision::Double);
        let x = init.sample(&[h, w, 4]).unwrap();
        for (cfg, mode) in [
            (AttnConfig::global(4, 2, density), AttnMode::Global),
            (
                AttnConfig::local(4, 2, density, slice),
                AttnMode::Local {
                    slice_rows: slice.0,
                    slice_cols: slice.1,
                },
            ),
        ] {
            let block = AtrousFormer::init(&mut init, cfg).unwrap();
            let (_, traces) = block.forward_traced(&x, &StageOptions::default()).unwrap();
            let tally: u64 = traces.iter().map(|t| t.dot_products).sum();
            assert_eq!(tally, dot_count(h, w, density, mode), "{h}x{w} J={density} {mode:?}");
        }
    }
}

#[test]
fn column_stage_is_the_transposed_row_stage() {
    let mut init = Initializer::new(2, Precision::Double);
    let params = StageParams::init(&mut init, 4).unwrap();
    let x = init.sample(&[5, 7, 4]).unwrap();
    let cfg = AttnConfig::global(4, 2, 2);
    let col = attention_stage_traced(&x, &params, &cfg.with_axis(StageAxis::Column), &StageOptions::default())
        .unwrap()
        .0;
    let row_t = attention_stage_traced(&x.transpose_spatial().unwrap(), &params, &cfg, &StageOptions::default())
        .unwrap()
        .0;
    assert_eq!(col.data(), row_t.transpose_spatial().unwrap().data());
}

#[test]
fn stage_gradients_match_finite_differences() {
    let cfg = AttnConfig::global(4, 2, 1);
    let mut init = Initializer::new(4, Precision::Double);
    let params = StageParams::init(&mut init, 4).unwrap();
    let x = init.sample(&[4, 3, 4]).unwrap();
    let probe = init.sample(&[4, 3, 4]).unwrap();
    let mut leaves = vec![x];
    leaves.extend(atrousformer::params::Parameterized::params(&params));
    let report = grad_check(
        |p| {
            let mut sp = params.clone();
            atrousformer::params::Parameterized::replace_params(&mut sp, &p[1..]);
            attention_stage_traced(&p[0], &sp, &cfg, &StageOptions::default())?
                .0
                .mul(&probe)?
                .sum()
        },
        &leaves,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn bad_configs_are_rejected() {
    let mut init = Initializer::new(0, Precision::Double);
    let x = init.sample(&[6, 6, 4]).unwrap();
    let block = AtrousFormer::init(&mut init, AttnConfig::global(4, 2, 1)).unwrap();
    let bad_slice = AttnConfig::local(4, 2, 1, (4, 3));
    assert!(local_atrousformer(&x, &block.row, &block.col, &bad_slice).is_err());
    assert!(local_atrousformer(&x, &block.row, &block.col, &AttnConfig::global(4, 2, 1)).is_err());
    assert!(AtrousFormer::init(&mut init, AttnConfig::global(6, 4, 1)).is_err());
    assert!(atrous_schedule(0, 2).is_err());
}
