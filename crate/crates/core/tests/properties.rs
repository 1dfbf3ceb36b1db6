//! Invariants over generated inputs.

use proptest::prelude::*;
use sdl_core::data::batches;
use sdl_core::eval::{self, GroundTruth, ScoreMatrix, Task};
use sdl_core::loss::{self, LabelInstance, LossConfig, Variant};
use sdl_core::model::ModelParams;
use sdl_core::{synth, EmbeddingMatrix, SynthConfig};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

fn vectors(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d).prop_map(unit), n)
}

/// (A, positives, negatives) over a shared word dimension.
fn problem() -> impl Strategy<Value = (EmbeddingMatrix, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(m, d)| {
        (
            prop::collection::vec(-2.0..2.0f64, m * d).prop_map(move |v| EmbeddingMatrix::new(m, d, v).unwrap()),
            vectors(d, 1..4),
            vectors(d, 1..6),
        )
    })
}

fn inst<'a>(pos: &'a [Vec<f64>], neg: &'a [Vec<f64>]) -> LabelInstance<'a> {
    LabelInstance::new(
        pos.iter().map(Vec::as_slice).collect(),
        neg.iter().map(Vec::as_slice).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_ignore_row_order((a, pos, neg) in problem(), shift in 0usize..8, lambda in 0.0..3.0f64) {
        let m = a.rows();
        let rows: Vec<Vec<f64>> = (0..m).map(|r| a.row((r + shift) % m).to_vec()).collect();
        let rotated = EmbeddingMatrix::from_rows(&rows).unwrap();
        for variant in [Variant::Max, Variant::L2Norm] {
            let cfg = LossConfig { variant, lambda, use_sdw: true, rows: m };
            let x = loss::final_loss(&a, &inst(&pos, &neg), &cfg).unwrap();
            let y = loss::final_loss(&rotated, &inst(&pos, &neg), &cfg).unwrap();
            prop_assert!((x.value - y.value).abs() <= 1e-10);
        }
    }

    #[test]
    fn reg_loss_translation_invariant((a, _, _) in problem(), t in prop::collection::vec(-5.0..5.0f64, 8)) {
        let mut b = a.clone();
        for r in 0..b.rows() {
            for (x, s) in b.row_mut(r).iter_mut().zip(&t) {
                *x += s;
            }
        }
        let (x, y) = (loss::reg_loss(&a), loss::reg_loss(&b));
        prop_assert!((x.value - y.value).abs() <= 1e-10);
        prop_assert!(x.value >= 0.0);
    }

    #[test]
    fn replicating_pairs_keeps_rank_loss((a, pos, neg) in problem(), copies in 2usize..4) {
        let rep = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..copies).flat_map(|_| v.iter().cloned()).collect() };
        let (p2, n2) = (rep(&pos), rep(&neg));
        let x = loss::rank_loss(&a, &inst(&pos, &neg), false, Variant::Max).unwrap().value;
        let y = loss::rank_loss(&a, &inst(&p2, &n2), false, Variant::Max).unwrap().value;
        prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0));
    }

    #[test]
    fn rank_loss_rises_with_negative_score((a, pos, neg) in problem(), bump in 0.01..1.0f64) {
        // adding a multiple of a negative's vector to every row raises that
        // negative's score by more than any positive's
        let n0 = neg[0].clone();
        let mut b = a.clone();
        for r in 0..b.rows() {
            for (x, t) in b.row_mut(r).iter_mut().zip(&n0) {
                *x += bump * t;
            }
        }
        let lift = |m: &EmbeddingMatrix, t: &[f64]| loss::score(m, t).unwrap().value;
        let neg_gain = lift(&b, &n0) - lift(&a, &n0);
        prop_assume!(pos.iter().all(|p| lift(&b, p) - lift(&a, p) < neg_gain));
        let x = loss::rank_loss(&a, &inst(&pos, &neg[..1]), false, Variant::Max).unwrap().value;
        let y = loss::rank_loss(&b, &inst(&pos, &neg[..1]), false, Variant::Max).unwrap().value;
        prop_assert!(y > x);
    }

    #[test]
    fn sdw_at_least_one(pos in vectors(6, 1..6)) {
        let refs: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        prop_assert!(loss::sdw(&refs).unwrap() >= 1.0);
    }

    #[test]
    fn ap_invariant_under_monotone_transform(
        scores in prop::collection::vec(-3.0..3.0f64, 1..40),
        seed in any::<u64>(),
    ) {
        let relevant: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
        let x = eval::average_precision(&scores, &relevant).unwrap();
        let y = eval::average_precision(&warped, &relevant).unwrap();
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn prf_bounded(scores in prop::collection::vec(-1.0..1.0f64, 12), k in 1usize..6, mask in any::<u16>()) {
        let tags: Vec<String> = (0..4).map(|t| format!("t{t}")).collect();
        let ids: Vec<String> = (0..3).map(|i| format!("i{i}")).collect();
        let s = ScoreMatrix::new(ids, tags, scores, vec![0; 12]).unwrap();
        let gt = GroundTruth::new(4, (0..12).map(|c| (mask >> c) & 1 == 1).collect()).unwrap();
        let r = eval::prf_at_k(&s, &gt, k).unwrap();
        for v in [r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn batches_partition_indices(n in 1usize..300, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let b = batches(n, bs, seed, epoch).unwrap();
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn zsl_scores_are_gzsl_columns() {
    let world = synth::generate(&SynthConfig {
        n_images: 40,
        n_test: 60,
        ..SynthConfig::default()
    })
    .unwrap();
    let params = ModelParams::init(3, 32, 64, 5).unwrap();
    let zsl_tags = Task::Zsl.tags(&world.test);
    let gzsl_tags = Task::Gzsl.tags(&world.test);
    let zsl = eval::score_all(&params, &world.test, &world.wordvecs, &zsl_tags, Variant::Max).unwrap();
    let gzsl = eval::score_all(&params, &world.test, &world.wordvecs, &gzsl_tags, Variant::Max).unwrap();
    assert_eq!(gzsl.select_tags(&zsl_tags).unwrap(), zsl);
    for (j, t) in zsl_tags.iter().enumerate() {
        let g = gzsl.tag_index(t).unwrap();
        for i in 0..world.test.len() {
            assert_eq!(zsl.get(i, j), gzsl.get(i, g));
        }
    }
}

#[test]
fn synth_world_invariants() {
    let world = synth::generate(&SynthConfig {
        n_images: 800,
        n_test: 200,
        ..SynthConfig::default()
    })
    .unwrap();
    for (_, v) in world.wordvecs.iter() {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    let split = world.train.split();
    assert!(split.seen.is_disjoint(&split.unseen));

    let n = world.train.len();
    let (mut single, mut multi) = (Vec::new(), Vec::new());
    for i in 0..n {
        let vs: Vec<Vec<f64>> = world
            .train
            .labels(i)
            .iter()
            .map(|l| world.wordvecs.lookup(l).unwrap().into_owned())
            .collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let w = loss::sdw(&refs).unwrap();
        if world.image_groups[i] >= 2 {
            multi.push(w)
        } else {
            single.push(w)
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&multi) > mean(&single));
}

#[test]
fn same_seed_same_world() {
    let cfg = SynthConfig {
        n_images: 100,
        n_test: 20,
        seed: 42,
        ..SynthConfig::default()
    };
    let (a, b) = (synth::generate(&cfg).unwrap(), synth::generate(&cfg).unwrap());
    assert_eq!(a.wordvecs, b.wordvecs);
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
}
