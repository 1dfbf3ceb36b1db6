//! Train/evaluate grids over loss configurations with shared seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{diverse_subset_eval, map_score, prf_at_k, score_all, GroundTruth, Task};
use crate::loss::{reg_loss, Variant};
use crate::model::ModelParams;
use crate::optim::{train, TrainConfig};
use crate::wordvec::WordVecTable;

/// One configuration of the objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub name: String,
    pub variant: Variant,
    pub rows: usize,
    pub lambda: f64,
    pub use_sdw: bool,
}

impl Cell {
    pub fn new(name: impl Into<String>, variant: Variant, rows: usize, lambda: f64, use_sdw: bool) -> Self {
        Self {
            name: name.into(),
            variant,
            rows,
            lambda,
            use_sdw,
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            rows: self.rows,
            lambda: self.lambda,
            use_sdw: self.use_sdw,
            seed,
            ..base.clone()
        }
    }
}

/// Learning rate of the synthetic-fixture runs. Synthetic features have norm
/// near 1 spread over `d_f` coordinates, so the head needs weights orders of
/// magnitude past the real-feature default to separate tags within 10 epochs.
pub const FIXTURE_MAX_LR: f64 = 1.0;

/// Training settings shared by every fixture grid; cells override the loss.
pub fn fixture_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 32,
        max_lr: FIXTURE_MAX_LR,
        ..TrainConfig::default()
    }
}

/// Baselines, the component columns and the full method.
pub fn component_grid() -> Vec<Cell> {
    vec![
        Cell::new("fast0tag", Variant::Fast0Tag, 1, 0.0, false),
        Cell::new("l2norm-m7", Variant::L2Norm, 7, 0.0, false),
        Cell::new("a:sdw", Variant::Fast0Tag, 1, 0.0, true),
        Cell::new("b:sdw+m2", Variant::Max, 2, 0.0, true),
        Cell::new("c:sdw+m2+reg0.1", Variant::Max, 2, 0.1, true),
        Cell::new("d:sdw+m7+reg0.1", Variant::Max, 7, 0.1, true),
        Cell::new("f:m7+reg0.3", Variant::Max, 7, 0.3, false),
        Cell::new("ours", Variant::Max, 7, 0.3, true),
    ]
}

/// Rows sweep at a fixed regularization, SDW on.
pub fn rows_sweep(rows: &[usize], lambda: f64) -> Vec<Cell> {
    rows.iter()
        .map(|&m| {
            let variant = if m == 1 { Variant::Fast0Tag } else { Variant::Max };
            Cell::new(format!("m={m}"), variant, m, lambda, true)
        })
        .collect()
}

/// Regularization sweep at a fixed number of rows, SDW on.
pub fn lambda_sweep(rows: usize, lambdas: &[f64]) -> Vec<Cell> {
    lambdas
        .iter()
        .map(|&l| Cell::new(format!("lambda={l}"), Variant::Max, rows, l, true))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Run {
    pub seed: u64,
    pub zsl_map: f64,
    pub gzsl_map: f64,
    pub zsl_f1: Vec<(usize, f64)>,
    pub gzsl_f1: Vec<(usize, f64)>,
    /// Mean over test images of the per-column variance across rows of `A`.
    pub row_variance: f64,
    /// GZSL F1@10 over test images with more than 6 relevant tags.
    pub diverse_f1: Option<f64>,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: Vec<Run>,
    pub mean_zsl_map: f64,
    pub mean_gzsl_map: f64,
    pub mean_row_variance: f64,
    pub mean_diverse_f1: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub const DIVERSE_MIN_LABELS: usize = 6;
pub const DIVERSE_K: usize = 10;

/// Mean per-column variance across rows of the test-set embedding matrices.
pub fn mean_row_variance(params: &ModelParams, test: &Dataset) -> Result<f64> {
    let d_w = params.shape().word_dim as f64;
    let per_image = (0..test.len())
        .into_par_iter()
        .map(|i| Ok(reg_loss(&params.forward(&test.feature_row_f64(i))?).value / d_w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(per_image.into_iter()))
}

/// Scores a trained head on `test` for both tasks.
pub fn evaluate_run(
    params: &ModelParams,
    variant: Variant,
    test: &Dataset,
    wordvecs: &WordVecTable,
    ks: &[usize],
    seed: u64,
    final_train_loss: f64,
) -> Result<Run> {
    let zsl_tags = Task::Zsl.tags(test);
    let gzsl_tags = Task::Gzsl.tags(test);
    let gzsl = score_all(params, test, wordvecs, &gzsl_tags, variant)?;
    let zsl = gzsl.select_tags(&zsl_tags)?;
    let gzsl_gt = GroundTruth::from_dataset(test, &gzsl_tags)?;
    let zsl_gt = GroundTruth::from_dataset(test, &zsl_tags)?;

    let f1s = |s, gt| -> Result<Vec<(usize, f64)>> { ks.iter().map(|&k| Ok((k, prf_at_k(s, gt, k)?.f1))).collect() };
    let diverse_f1 = diverse_subset_eval(&gzsl, &gzsl_gt, DIVERSE_MIN_LABELS, DIVERSE_K)
        .ok()
        .map(|r| r.at_k[0].f1);
    Ok(Run {
        seed,
        zsl_map: map_score(&zsl, &zsl_gt)?.map,
        gzsl_map: map_score(&gzsl, &gzsl_gt)?.map,
        zsl_f1: f1s(&zsl, &zsl_gt)?,
        gzsl_f1: f1s(&gzsl, &gzsl_gt)?,
        row_variance: mean_row_variance(params, test)?,
        diverse_f1,
        final_train_loss,
    })
}

/// Trains and evaluates `cell` once per seed.
pub fn run_cell(
    cell: &Cell,
    base: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    test_set: &Dataset,
    wordvecs: &WordVecTable,
    ks: &[usize],
) -> Result<CellSummary> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = cell.apply(base, seed);
            let outcome = train(train_set, wordvecs, &cfg)?;
            let last = outcome.log.last().map_or(f64::NAN, |l| l.mean_loss);
            evaluate_run(&outcome.params, cell.variant, test_set, wordvecs, ks, seed, last)
        })
        .collect::<Result<Vec<_>>>()?;
    let diverse: Vec<f64> = runs.iter().filter_map(|r| r.diverse_f1).collect();
    Ok(CellSummary {
        mean_zsl_map: mean(runs.iter().map(|r| r.zsl_map)),
        mean_gzsl_map: mean(runs.iter().map(|r| r.gzsl_map)),
        mean_row_variance: mean(runs.iter().map(|r| r.row_variance)),
        mean_diverse_f1: (diverse.len() == runs.len() && !diverse.is_empty()).then(|| mean(diverse.into_iter())),
        cell: cell.clone(),
        runs,
    })
}

pub fn run_grid(
    cells: &[Cell],
    base: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    test_set: &Dataset,
    wordvecs: &WordVecTable,
    ks: &[usize],
) -> Result<Vec<CellSummary>> {
    cells
        .iter()
        .map(|c| run_cell(c, base, seeds, train_set, test_set, wordvecs, ks))
        .collect()
}

/// Aligned text table, one line per cell.
pub fn render_table(summaries: &[CellSummary]) -> String {
    let width = summaries.iter().map(|s| s.cell.name.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>2}  {:>6}  {:>3}  {:>8}  {:>8}  {:>9}  {:>10}",
        "cell", "variant", "M", "lambda", "sdw", "zsl_map", "gzsl_map", "row_var", "diverse_f1"
    );
    for s in summaries {
        let c = &s.cell;
        let diverse = s.mean_diverse_f1.map_or("-".to_string(), |f| format!("{f:.4}"));
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>2}  {:>6.3}  {:>3}  {:>8.4}  {:>8.4}  {:>9.3e}  {:>10}",
            c.name,
            c.variant.as_str(),
            c.rows,
            c.lambda,
            if c.use_sdw { "on" } else { "off" },
            s.mean_zsl_map,
            s.mean_gzsl_map,
            s.mean_row_variance,
            diverse
        );
    }
    out
}
