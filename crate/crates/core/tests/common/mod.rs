//! Brute-force references shared by the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdl_core::{EmbeddingMatrix, ScoreMatrix};

/// Item `j` outranks `i` when it scores higher or ties with a lower index.
fn outranks(scores: &[f64], j: usize, i: usize) -> bool {
    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
}

/// AP from pairwise rank counts, no sorting.
pub fn brute_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let n_pos = relevant.iter().filter(|r| **r).count();
    if n_pos == 0 {
        return None;
    }
    let mut total = 0.0;
    for i in (0..scores.len()).filter(|&i| relevant[i]) {
        let above = (0..scores.len()).filter(|&j| j != i && outranks(scores, j, i));
        let (rank, hits) = above.fold((1usize, 1usize), |(r, h), j| (r + 1, h + relevant[j] as usize));
        total += hits as f64 / rank as f64;
    }
    Some(total / n_pos as f64)
}

/// Column-wise mAP over tags with at least one relevant image.
pub fn brute_map(n_images: usize, n_tags: usize, scores: &[f64], relevant: &[bool]) -> f64 {
    let mut aps = Vec::new();
    for t in 0..n_tags {
        let col: Vec<f64> = (0..n_images).map(|i| scores[i * n_tags + t]).collect();
        let rel: Vec<bool> = (0..n_images).map(|i| relevant[i * n_tags + t]).collect();
        aps.extend(brute_ap(&col, &rel));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Micro P/R/F1 where a tag is in the top K when fewer than K tags beat it
/// (higher score, or equal score and lexicographically smaller name).
pub fn brute_prf(tags: &[String], n_images: usize, scores: &[f64], relevant: &[bool], k: usize) -> (f64, f64, f64) {
    let n_tags = tags.len();
    let mut hits = 0usize;
    let mut total_rel = 0usize;
    for i in 0..n_images {
        let row = &scores[i * n_tags..(i + 1) * n_tags];
        for t in 0..n_tags {
            let rel = relevant[i * n_tags + t];
            total_rel += rel as usize;
            let better = (0..n_tags)
                .filter(|&u| row[u] > row[t] || (row[u] == row[t] && tags[u] < tags[t]))
                .count();
            if better < k && rel {
                hits += 1;
            }
        }
    }
    let p = if n_images > 0 {
        hits as f64 / (k * n_images) as f64
    } else {
        0.0
    };
    let r = if total_rel > 0 {
        hits as f64 / total_rel as f64
    } else {
        0.0
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Random score/relevance grid with frequent exact ties.
pub struct MetricInstance {
    pub n_images: usize,
    pub tags: Vec<String>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl MetricInstance {
    pub fn generate(rng: &mut ChaCha8Rng) -> Self {
        let n_images = rng.random_range(1..=50);
        let n_tags = rng.random_range(1..=20);
        let levels = rng.random_range(2..=10) as f64;
        let density = rng.random_range(0.05..0.6);
        // tag names in shuffled lexical order so tag index and name order differ
        let mut names: Vec<u32> = (0..n_tags as u32).collect();
        for i in (1..names.len()).rev() {
            names.swap(i, rng.random_range(0..=i));
        }
        let tags = names.iter().map(|n| format!("tag{n:02}")).collect();
        let cells = n_images * n_tags;
        let scores = (0..cells)
            .map(|_| (rng.random::<f64>() * levels).floor() / levels - 0.3)
            .collect();
        let relevant = (0..cells).map(|_| rng.random_bool(density)).collect();
        Self {
            n_images,
            tags,
            scores,
            relevant,
        }
    }

    pub fn matrix(&self) -> ScoreMatrix {
        let ids = (0..self.n_images).map(|i| format!("img{i}")).collect();
        let rows = vec![0; self.scores.len()];
        ScoreMatrix::new(ids, self.tags.clone(), self.scores.clone(), rows).unwrap()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn naive_max_score(a: &EmbeddingMatrix, t: &[f64]) -> f64 {
    (0..a.rows())
        .map(|m| dot(a.row(m), t))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Double loop over pairs with an explicit population variance.
pub fn naive_rank_loss(a: &EmbeddingMatrix, pos: &[Vec<f64>], neg: &[Vec<f64>], use_sdw: bool) -> f64 {
    let d = pos[0].len();
    let mut omega = 1.0;
    if use_sdw {
        for c in 0..d {
            let mean = pos.iter().map(|p| p[c]).sum::<f64>() / pos.len() as f64;
            omega += pos.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / pos.len() as f64;
        }
    }
    let mut total = 0.0;
    for p in pos {
        for n in neg {
            let u = naive_max_score(a, n) - naive_max_score(a, p);
            total += (1.0 + u.exp()).ln();
        }
    }
    omega * total / (pos.len() * neg.len()) as f64
}

pub fn naive_reg_loss(a: &EmbeddingMatrix) -> f64 {
    let m = a.rows() as f64;
    (0..a.cols())
        .map(|c| {
            let mean = (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / m;
            (0..a.rows()).map(|r| (a.get(r, c) - mean).powi(2)).sum::<f64>() / m
        })
        .sum()
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}
