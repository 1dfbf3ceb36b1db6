//! Central finite-difference checks of the analytic loss gradients.
//!
//! The harness draws seeded random instances, perturbs every coordinate of
//! `A` (or of the head parameters) by `±h` and compares the resulting slope
//! against the closed-form gradient. Instances whose argmax rows are close
//! enough to a tie that a perturbation could flip them are excluded, as are
//! l2-variant instances with a near-zero projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::loss::{final_loss, rank_loss, reg_loss, EmbeddingMatrix, LabelInstance, LossConfig, Variant};
use crate::model::{HeadShape, ModelParams};
use crate::wordvec::normalize_in_place;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum gap between the best and second-best row score (and minimum
/// `||A t||` for the l2 variant) for an instance to be checked.
pub const TIE_MARGIN: f64 = 1e-4;

/// Central differences of `f` at `point`.
pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = f(&x);
            x[i] = point[i] - step;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `||a - n|| / max(||a||, ||n||, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Relative error between `analytic` and the finite-difference gradient of `f`.
pub fn check_gradient<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    relative_error(analytic, &central_difference(f, point, step))
}

/// A random loss instance with owned vectors.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub a: EmbeddingMatrix,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl RandomInstance {
    pub fn generate(rng: &mut ChaCha8Rng, rows: usize, dim: usize, n_pos: usize, n_neg: usize) -> Self {
        let data = (0..rows * dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let mut unit = || {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
            normalize_in_place(&mut v);
            v
        };
        let positives = (0..n_pos).map(|_| unit()).collect();
        let negatives = (0..n_neg).map(|_| unit()).collect();
        Self {
            a: EmbeddingMatrix::new(rows, dim, data).expect("finite gaussian entries"),
            positives,
            negatives,
        }
    }

    pub fn instance(&self) -> LabelInstance<'_> {
        LabelInstance::new(
            self.positives.iter().map(Vec::as_slice).collect(),
            self.negatives.iter().map(Vec::as_slice).collect(),
        )
    }

    fn tags(&self) -> impl Iterator<Item = &[f64]> {
        self.positives.iter().chain(&self.negatives).map(Vec::as_slice)
    }
}

/// Whether every tag's score is far enough from a kink for `a`.
pub fn well_conditioned<'t>(a: &EmbeddingMatrix, tags: impl IntoIterator<Item = &'t [f64]>, variant: Variant) -> bool {
    tags.into_iter().all(|t| {
        let proj: Vec<f64> = (0..a.rows())
            .map(|m| a.row(m).iter().zip(t).map(|(x, y)| x * y).sum())
            .collect();
        match variant {
            Variant::L2Norm => proj.iter().map(|x| x * x).sum::<f64>().sqrt() > TIE_MARGIN,
            Variant::Max | Variant::Fast0Tag => {
                let mut sorted = proj;
                sorted.sort_by(|x, y| y.total_cmp(x));
                sorted.len() < 2 || sorted[0] - sorted[1] > TIE_MARGIN
            }
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub variant: Variant,
    pub target: &'static str,
    pub checked: usize,
    pub excluded: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// Feature dimension of the head used for the end-to-end check.
    pub feature_dim: usize,
    /// Negates every analytic gradient before comparison. A correct harness
    /// must then fail; used to validate the check itself.
    pub flip_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            variants: vec![Variant::Max, Variant::L2Norm, Variant::Fast0Tag],
            feature_dim: 6,
            flip_sign: false,
        }
    }
}

const ROWS: [usize; 3] = [1, 3, 7];
const DIMS: [usize; 2] = [8, 32];
const POSITIVES: [usize; 3] = [1, 2, 5];
const NEGATIVES: [usize; 2] = [3, 20];
const LAMBDAS: [f64; 3] = [0.0, 0.3, 5.0];

struct Tally {
    checked: usize,
    excluded: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            checked: 0,
            excluded: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.checked += 1;
        // NaN must fail the check.
        self.worst = if err.is_nan() {
            f64::INFINITY
        } else {
            self.worst.max(err)
        };
    }

    fn finish(&self, variant: Variant, target: &'static str) -> CheckResult {
        CheckResult {
            variant,
            target,
            checked: self.checked,
            excluded: self.excluded,
            max_relative_error: self.worst,
        }
    }
}

fn run_variant(variant: Variant, cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(variant as u64 + 1);
    let mut rank = Tally::new();
    let mut reg = Tally::new();
    let mut fin = Tally::new();
    let mut head = Tally::new();
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let analytic = |g: &[f64]| g.iter().map(|x| sign * x).collect::<Vec<f64>>();

    for i in 0..cfg.instances {
        let rows = if variant == Variant::Fast0Tag {
            1
        } else {
            ROWS[i % ROWS.len()]
        };
        let dim = DIMS[(i / 3) % DIMS.len()];
        let n_pos = POSITIVES[(i / 6) % POSITIVES.len()];
        let n_neg = NEGATIVES[(i / 18) % NEGATIVES.len()];
        let use_sdw = rng.random_bool(0.5);
        let lambda = LAMBDAS[(i + i / 3) % LAMBDAS.len()];
        let ri = RandomInstance::generate(&mut rng, rows, dim, n_pos, n_neg);

        // The regularizer is smooth everywhere.
        let r = reg_loss(&ri.a);
        let f = |x: &[f64]| reg_loss(&EmbeddingMatrix::new(rows, dim, x.to_vec()).unwrap()).value;
        reg.record(check_gradient(f, &analytic(r.grad.as_slice()), ri.a.as_slice(), STEP));

        if !well_conditioned(&ri.a, ri.tags(), variant) {
            rank.excluded += 1;
            fin.excluded += 1;
        } else {
            let inst = ri.instance();
            let out = rank_loss(&ri.a, &inst, use_sdw, variant)?;
            let f = |x: &[f64]| {
                let a = EmbeddingMatrix::new(rows, dim, x.to_vec()).unwrap();
                rank_loss(&a, &inst, use_sdw, variant).unwrap().value
            };
            rank.record(check_gradient(f, &analytic(out.grad.as_slice()), ri.a.as_slice(), STEP));

            let loss_cfg = LossConfig {
                variant,
                lambda,
                use_sdw,
                rows,
            };
            let out = final_loss(&ri.a, &inst, &loss_cfg)?;
            let f = |x: &[f64]| {
                let a = EmbeddingMatrix::new(rows, dim, x.to_vec()).unwrap();
                final_loss(&a, &inst, &loss_cfg).unwrap().value
            };
            fin.record(check_gradient(f, &analytic(out.grad.as_slice()), ri.a.as_slice(), STEP));
        }

        // End to end through the head: loss(forward(W, b; x)).
        let shape = HeadShape::new(rows, dim, cfg.feature_dim)?;
        let params = ModelParams::init(rows, dim, cfg.feature_dim, rng.random())?;
        let mut params = params;
        for b in params.as_mut_slice()[shape.weight_len()..].iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *b = 0.1 * z;
        }
        let x: Vec<f64> = (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = params.forward(&x)?;
        if !well_conditioned(&a, ri.tags(), variant) {
            head.excluded += 1;
            continue;
        }
        let inst = ri.instance();
        let loss_cfg = LossConfig {
            variant,
            lambda,
            use_sdw,
            rows,
        };
        let out = final_loss(&a, &inst, &loss_cfg)?;
        let grads = params.backward(&x, &out.grad)?;
        let f = |theta: &[f64]| {
            let p = ModelParams::from_parts(
                shape,
                theta[..shape.weight_len()].to_vec(),
                theta[shape.weight_len()..].to_vec(),
            )
            .unwrap();
            final_loss(&p.forward(&x).unwrap(), &inst, &loss_cfg).unwrap().value
        };
        head.record(check_gradient(f, &analytic(grads.as_slice()), params.as_slice(), STEP));
    }

    Ok(vec![
        rank.finish(variant, "rank_loss/A"),
        reg.finish(variant, "reg_loss/A"),
        fin.finish(variant, "final_loss/A"),
        head.finish(variant, "final_loss/W,b"),
    ])
}

/// Runs every check for every configured variant.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for &variant in &cfg.variants {
        results.extend(run_variant(variant, cfg)?);
    }
    Ok(GradcheckReport { results })
}
