//! Ranking objective over per-image embedding matrices.
//!
//! An image is represented by an `M x d_w` matrix `A` whose rows are
//! principal directions in word-vector space. A tag vector `t` scores
//! `max_m <A_m, t>`, so one row is enough to rank a tag highly and the other
//! rows are free to cover semantically distant tags. Training pushes every
//! positive tag above every negative one with a softplus pairwise loss,
//! up-weights images whose positives are spread out (the semantic diversity
//! weight), and penalizes the spread of the rows themselves.
//!
//! All gradients are closed-form and with respect to `A`; the head in
//! [`crate::model`] chains them back to its parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The per-image `M x d_w` matrix of principal directions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(
                "embedding matrix needs at least one row and column".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::dim("embedding matrix data", rows * cols, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("embedding matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty embedding matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.cols..(m + 1) * self.cols]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.cols..(m + 1) * self.cols]
    }

    pub fn get(&self, m: usize, c: usize) -> f64 {
        self.data[m * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &EmbeddingMatrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += alpha * b);
    }

    fn add_outer(&mut self, m: usize, alpha: f64, t: &[f64]) {
        self.row_mut(m).iter_mut().zip(t).for_each(|(a, x)| *a += alpha * x);
    }

    fn check_vector(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.cols {
            return Err(Error::dim("tag vector", self.cols, t.len()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a tag's score is read off the embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `max_m <A_m, t>`.
    Max,
    /// `||A t||_2`, the multi-direction baseline without the max.
    L2Norm,
    /// Single principal direction; the max over one row.
    Fast0Tag,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Max => "max",
            Variant::L2Norm => "l2norm",
            Variant::Fast0Tag => "fast0tag",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Variant::Max),
            "l2norm" => Ok(Variant::L2Norm),
            "fast0tag" => Ok(Variant::Fast0Tag),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// A tag score together with the row that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    /// Highest-scoring row; the lowest index wins ties.
    pub row: usize,
}

/// `max_m <A_m, t>` and its argmax row.
pub fn score(a: &EmbeddingMatrix, t: &[f64]) -> Result<Score> {
    a.check_vector(t)?;
    Ok(max_score(a, t))
}

fn max_score(a: &EmbeddingMatrix, t: &[f64]) -> Score {
    let mut best = Score {
        value: dot(a.row(0), t),
        row: 0,
    };
    for m in 1..a.rows {
        let v = dot(a.row(m), t);
        if v > best.value {
            best = Score { value: v, row: m };
        }
    }
    best
}

/// Score of `t` under `variant`. For [`Variant::L2Norm`] the reported row is
/// the one with the largest projection, used only for attribution.
pub fn variant_score(a: &EmbeddingMatrix, t: &[f64], variant: Variant) -> Result<Score> {
    a.check_vector(t)?;
    Ok(match variant {
        Variant::Max | Variant::Fast0Tag => max_score(a, t),
        Variant::L2Norm => Score {
            value: project(a, t).iter().map(|x| x * x).sum::<f64>().sqrt(),
            row: max_score(a, t).row,
        },
    })
}

fn project(a: &EmbeddingMatrix, t: &[f64]) -> Vec<f64> {
    (0..a.rows).map(|m| dot(a.row(m), t)).collect()
}

/// `u = score(A, n) - score(A, p)`; positive when the negative outranks the
/// positive.
pub fn pair_margin(a: &EmbeddingMatrix, p: &[f64], n: &[f64]) -> Result<f64> {
    Ok(score(a, n)?.value - score(a, p)?.value)
}

/// Semantic diversity weight: `1 + sum_i var_j(p_j[i])` with population
/// variance over the positives.
pub fn sdw(positives: &[&[f64]]) -> Result<f64> {
    let Some(first) = positives.first() else {
        return Err(Error::Invalid(
            "semantic diversity weight needs at least one positive".into(),
        ));
    };
    let dim = first.len();
    if positives.iter().any(|p| p.len() != dim) {
        return Err(Error::Invalid("positive vectors differ in dimension".into()));
    }
    if positives.len() == 1 {
        return Ok(1.0);
    }
    let n = positives.len() as f64;
    let mut total = 0.0;
    for i in 0..dim {
        let mean = positives.iter().map(|p| p[i]).sum::<f64>() / n;
        total += positives.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(1.0 + total)
}

/// Overflow-safe `ln(1 + e^u)`.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Positive and negative tag vectors for one image.
#[derive(Debug, Clone, Default)]
pub struct LabelInstance<'a> {
    pub positives: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

impl<'a> LabelInstance<'a> {
    pub fn new(positives: Vec<&'a [f64]>, negatives: Vec<&'a [f64]>) -> Self {
        Self { positives, negatives }
    }

    fn validate(&self, cols: usize) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Invalid(format!(
                "ranking loss needs positives and negatives (got {} and {})",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        for v in self.positives.iter().chain(&self.negatives) {
            if v.len() != cols {
                return Err(Error::dim("tag vector", cols, v.len()));
            }
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: EmbeddingMatrix,
}

struct TagTerm {
    value: f64,
    row: usize,
    /// Normalized projection `A t / ||A t||`, l2 variant only.
    direction: Option<Vec<f64>>,
}

fn tag_term(a: &EmbeddingMatrix, t: &[f64], variant: Variant) -> TagTerm {
    match variant {
        Variant::Max | Variant::Fast0Tag => {
            let s = max_score(a, t);
            TagTerm {
                value: s.value,
                row: s.row,
                direction: None,
            }
        }
        Variant::L2Norm => {
            let mut proj = project(a, t);
            let norm = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                proj.iter_mut().for_each(|x| *x /= norm);
            }
            // Zero subgradient at the origin: `proj` stays all zeros.
            TagTerm {
                value: norm,
                row: 0,
                direction: Some(proj),
            }
        }
    }
}

impl TagTerm {
    fn add_grad(&self, grad: &mut EmbeddingMatrix, alpha: f64, t: &[f64]) {
        match &self.direction {
            None => grad.add_outer(self.row, alpha, t),
            Some(dir) => {
                for (m, d) in dir.iter().enumerate() {
                    if *d != 0.0 {
                        grad.add_outer(m, alpha * d, t);
                    }
                }
            }
        }
    }
}

/// Pairwise softplus ranking loss
/// `omega_d / (|P| |N|) * sum_j sum_k ln(1 + e^{u_jk})`.
///
/// Each pair routes its gradient only through the argmax row of each of its
/// two tags. `omega_d` depends on labels only and carries no gradient.
pub fn rank_loss(a: &EmbeddingMatrix, inst: &LabelInstance<'_>, use_sdw: bool, variant: Variant) -> Result<LossGrad> {
    let (value, grad, _) = rank_loss_parts(a, inst, use_sdw, variant)?;
    Ok(LossGrad { value, grad })
}

fn rank_loss_parts(
    a: &EmbeddingMatrix,
    inst: &LabelInstance<'_>,
    use_sdw: bool,
    variant: Variant,
) -> Result<(f64, EmbeddingMatrix, f64)> {
    inst.validate(a.cols)?;
    let omega_d = if use_sdw { sdw(&inst.positives)? } else { 1.0 };
    let omega_n = (inst.positives.len() * inst.negatives.len()) as f64;
    let scale = omega_d / omega_n;

    let pos: Vec<TagTerm> = inst.positives.iter().map(|p| tag_term(a, p, variant)).collect();
    let neg: Vec<TagTerm> = inst.negatives.iter().map(|n| tag_term(a, n, variant)).collect();

    let mut sum = 0.0;
    let mut pos_weight = vec![0.0; pos.len()];
    let mut neg_weight = vec![0.0; neg.len()];
    for (j, p) in pos.iter().enumerate() {
        for (k, n) in neg.iter().enumerate() {
            let u = n.value - p.value;
            sum += softplus(u);
            let s = sigmoid(u);
            pos_weight[j] += s;
            neg_weight[k] += s;
        }
    }

    let mut grad = EmbeddingMatrix::zeros(a.rows, a.cols);
    for ((term, t), w) in pos.iter().zip(&inst.positives).zip(&pos_weight) {
        term.add_grad(&mut grad, -scale * w, t);
    }
    for ((term, t), w) in neg.iter().zip(&inst.negatives).zip(&neg_weight) {
        term.add_grad(&mut grad, scale * w, t);
    }
    Ok((scale * sum, grad, omega_d))
}

/// Row-spread penalty: the sum over columns of the population variance of
/// that column across rows. Zero when all rows coincide, and unchanged by
/// adding the same vector to every row.
pub fn reg_loss(a: &EmbeddingMatrix) -> LossGrad {
    let m = a.rows as f64;
    let mut grad = EmbeddingMatrix::zeros(a.rows, a.cols);
    if a.rows == 1 {
        return LossGrad { value: 0.0, grad };
    }
    let mut value = 0.0;
    for c in 0..a.cols {
        let mean = (0..a.rows).map(|r| a.get(r, c)).sum::<f64>() / m;
        for r in 0..a.rows {
            let dev = a.get(r, c) - mean;
            value += dev * dev / m;
            grad.data[r * a.cols + c] = 2.0 * dev / m;
        }
    }
    LossGrad {
        value: value.abs(),
        grad,
    }
}

/// Hyperparameters of the per-image objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: Variant,
    /// Regularization strength; the per-image weight is `lambda / |N|`.
    pub lambda: f64,
    pub use_sdw: bool,
    pub rows: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Max,
            lambda: 0.3,
            use_sdw: true,
            rows: 7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::Config("number of rows must be positive".into()));
        }
        if self.variant == Variant::Fast0Tag && self.rows != 1 {
            return Err(Error::Config(format!("fast0tag uses a single row, got {}", self.rows)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `min(1, lambda / |N|)`.
    pub fn effective_lambda(&self, negatives: usize) -> f64 {
        (self.lambda / negatives as f64).min(1.0)
    }
}

/// Per-image objective with its breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: EmbeddingMatrix,
    pub l_rank: f64,
    pub l_reg: f64,
    pub omega_d: f64,
}

/// `(1 - w) L_rank + w L_reg` with `w = min(1, lambda / |N|)`.
pub fn final_loss(a: &EmbeddingMatrix, inst: &LabelInstance<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    if a.rows != cfg.rows {
        return Err(Error::dim("embedding rows", cfg.rows, a.rows));
    }
    let (l_rank, rank_grad, omega_d) = rank_loss_parts(a, inst, cfg.use_sdw, cfg.variant)?;
    let w = cfg.effective_lambda(inst.negatives.len());

    let mut grad = rank_grad;
    let (l_reg, value) = if w > 0.0 {
        let reg = reg_loss(a);
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= 1.0 - w);
        grad.add_scaled(w, &reg.grad);
        (reg.value, (1.0 - w) * l_rank + w * reg.value)
    } else {
        (reg_loss(a).value, l_rank)
    };

    Ok(LossOutput {
        value,
        grad,
        l_rank,
        l_reg,
        omega_d,
    })
}
