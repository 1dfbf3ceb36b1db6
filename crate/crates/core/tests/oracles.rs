//! Library results against loop references and finite differences.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdl_core::eval::{self, GroundTruth, Task};
use sdl_core::loss::{self, LabelInstance, LossConfig, Variant};
use sdl_core::model::ModelParams;
use sdl_core::optim::{AdamConfig, AdamW, OneCycle};
use sdl_core::{synth, EmbeddingMatrix, SynthConfig};

use common::*;

fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sample(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| random_unit(rng, d)).collect()
}

fn inst<'a>(pos: &'a [Vec<f64>], neg: &'a [Vec<f64>]) -> LabelInstance<'a> {
    LabelInstance::new(
        pos.iter().map(Vec::as_slice).collect(),
        neg.iter().map(Vec::as_slice).collect(),
    )
}

#[test]
fn rank_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..300 {
        let (m, d) = (rng.random_range(1..8), rng.random_range(2..16));
        let a = random_matrix(&mut rng, m, d);
        let (np, nn) = (rng.random_range(1..6), rng.random_range(1..12));
        let pos = sample(&mut rng, d, np);
        let neg = sample(&mut rng, d, nn);
        let sdw = rng.random_bool(0.5);
        let got = loss::rank_loss(&a, &inst(&pos, &neg), sdw, Variant::Max).unwrap().value;
        let want = naive_rank_loss(&a, &pos, &neg, sdw);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn reg_loss_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (m, d) = (rng.random_range(1..9), rng.random_range(1..20));
        let a = random_matrix(&mut rng, m, d);
        assert!((loss::reg_loss(&a).value - naive_reg_loss(&a)).abs() < 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..60 {
        let variant = [Variant::Max, Variant::L2Norm, Variant::Fast0Tag][trial % 3];
        let m = if variant == Variant::Fast0Tag {
            1
        } else {
            rng.random_range(1..6)
        };
        let d = rng.random_range(2..10);
        let a = random_matrix(&mut rng, m, d);
        let (np, nn) = (rng.random_range(1..4), rng.random_range(1..6));
        let pos = sample(&mut rng, d, np);
        let neg = sample(&mut rng, d, nn);
        let cfg = LossConfig {
            variant,
            lambda: rng.random_range(0.0..2.0),
            use_sdw: true,
            rows: m,
        };
        let out = loss::final_loss(&a, &inst(&pos, &neg), &cfg).unwrap();
        let numeric = fd(
            |x| {
                let a = EmbeddingMatrix::new(m, d, x.to_vec()).unwrap();
                loss::final_loss(&a, &inst(&pos, &neg), &cfg).unwrap().value
            },
            a.as_slice(),
        );
        // a kink within h of the point shows up as a large one-off error
        let err = max_abs_diff(out.grad.as_slice(), &numeric);
        assert!(
            err < 1e-5 || near_tie(&a, &pos, &neg),
            "trial {trial} ({variant}) err {err}"
        );
    }
}

fn near_tie(a: &EmbeddingMatrix, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> bool {
    pos.iter().chain(neg).any(|t| {
        let mut s: Vec<f64> = (0..a.rows())
            .map(|r| a.row(r).iter().zip(t).map(|(x, y)| x * y).sum())
            .collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s.len() > 1 && s[0] - s[1] < 1e-4
    })
}

#[test]
fn head_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (m, d_w, d_f) = (3, 5, 4);
    let mut params = ModelParams::init(m, d_w, d_f, 4).unwrap();
    for (i, v) in params.as_mut_slice().iter_mut().enumerate().skip(m * d_w * d_f) {
        *v = 0.01 * i as f64;
    }
    let x: Vec<f64> = (0..d_f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pos = sample(&mut rng, d_w, 2);
    let neg = sample(&mut rng, d_w, 4);
    let cfg = LossConfig {
        rows: m,
        ..LossConfig::default()
    };
    let a = params.forward(&x).unwrap();
    let out = loss::final_loss(&a, &inst(&pos, &neg), &cfg).unwrap();
    let grads = params.backward(&x, &out.grad).unwrap();
    let shape = params.shape();
    let numeric = fd(
        |p| {
            let head = ModelParams::from_parts(
                shape,
                p[..shape.weight_len()].to_vec(),
                p[shape.weight_len()..].to_vec(),
            )
            .unwrap();
            let a = head.forward(&x).unwrap();
            loss::final_loss(&a, &inst(&pos, &neg), &cfg).unwrap().value
        },
        params.as_slice(),
    );
    assert!(max_abs_diff(grads.as_slice(), &numeric) < 1e-6);
}

#[test]
fn forward_matches_reshaped_matvec() {
    let params = ModelParams::init(2, 3, 4, 9).unwrap();
    let x = [0.5, -1.0, 2.0, 0.25];
    let a = params.forward(&x).unwrap();
    for m in 0..2 {
        for c in 0..3 {
            let o = m * 3 + c;
            let want: f64 = (0..4).map(|j| params.weights()[o * 4 + j] * x[j]).sum::<f64>() + params.bias()[o];
            assert!((a.get(m, c) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let inst = MetricInstance::generate(&mut rng);
        let s = inst.matrix();
        let gt = GroundTruth::new(inst.tags.len(), inst.relevant.clone()).unwrap();
        let map = eval::map_score(&s, &gt).unwrap().map;
        assert!((map - brute_map(inst.n_images, inst.tags.len(), &inst.scores, &inst.relevant)).abs() <= 1e-12);
        for k in [1, 3, inst.tags.len()] {
            let got = eval::prf_at_k(&s, &gt, k).unwrap();
            let (p, r, f) = brute_prf(&inst.tags, inst.n_images, &inst.scores, &inst.relevant, k);
            assert!(
                (got.precision - p).abs() <= 1e-12 && (got.recall - r).abs() <= 1e-12 && (got.f1 - f).abs() <= 1e-12
            );
        }
    }
}

#[test]
fn score_all_matches_loop() {
    let world = synth::generate(&SynthConfig {
        n_images: 50,
        n_test: 30,
        ..SynthConfig::default()
    })
    .unwrap();
    let params = ModelParams::init(3, 32, 64, 1).unwrap();
    let tags = Task::Gzsl.tags(&world.test);
    let s = eval::score_all(&params, &world.test, &world.wordvecs, &tags, Variant::Max).unwrap();
    for i in 0..world.test.len() {
        let a = params.forward(&world.test.feature_row_f64(i)).unwrap();
        for (j, t) in tags.iter().enumerate() {
            let v = world.wordvecs.lookup(t).unwrap();
            assert_eq!(s.get(i, j), naive_max_score(&a, &v));
        }
    }
}

#[test]
fn adam_two_steps_match_reference() {
    let cfg = AdamConfig {
        weight_decay: 0.1,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(2, cfg);
    let mut p = vec![1.0, -2.0];
    let grads = [[0.5, -0.1], [0.2, 0.3]];
    let lrs = [0.01, 0.02];
    for (g, lr) in grads.iter().zip(lrs) {
        opt.step(&mut p, g, lr).unwrap();
    }

    let mut want = [1.0f64, -2.0];
    for i in 0..2 {
        let (mut m, mut v) = (0.0, 0.0);
        for (t, (g, lr)) in grads.iter().zip(lrs).enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g[i];
            v = 0.999 * v + 0.001 * g[i] * g[i];
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            want[i] = want[i] * (1.0 - lr * 0.1) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
    }
    assert!(max_abs_diff(&p, &want) < 1e-10);
}

#[test]
fn one_cycle_decay_midpoint() {
    let s = OneCycle::new(1e-4, 100).unwrap();
    // warmup ends at step 30, so step 65 is halfway through the decay
    let floor = 1e-8;
    assert!((s.lr_at(65).unwrap() - (floor + (1e-4 - floor) * 0.5)).abs() < 1e-18);
    assert_eq!(s.lr_at(30).unwrap(), 1e-4);
}

#[test]
fn synth_statistics_match_config() {
    let cfg = SynthConfig::default();
    let world = synth::generate(&cfg).unwrap();
    let n = world.train.len();
    let counts: Vec<usize> = (0..n).map(|i| world.train.labels(i).len()).collect();
    let mean = counts.iter().sum::<usize>() as f64 / n as f64;
    let expected = (cfg.min_labels + cfg.max_labels) as f64 / 2.0;
    assert!((mean - expected).abs() < 0.1, "mean labels/image {mean}");
    assert!(counts.iter().all(|&c| (cfg.min_labels..=cfg.max_labels).contains(&c)));

    let multi = world.image_groups[..n].iter().filter(|&&g| g >= 2).count() as f64 / n as f64;
    // with at least two labels per image every draw can span groups
    assert!((multi - cfg.diversity_mix).abs() < 0.03, "multi-group share {multi}");

    let total_labels = cfg.groups * cfg.labels_per_group;
    let mut freq = std::collections::HashMap::<&str, usize>::new();
    for i in 0..n {
        for l in world.train.labels(i) {
            *freq.entry(l.as_str()).or_default() += 1;
        }
    }
    assert_eq!(freq.len(), total_labels);
    let per_label = counts.iter().sum::<usize>() as f64 / total_labels as f64;
    for (label, &f) in &freq {
        let z = (f as f64 - per_label) / per_label.sqrt();
        assert!(z.abs() < 6.0, "{label} drawn {f} times, expected about {per_label:.0}");
    }
}
