//! Seeded synthetic worlds: clustered word vectors, a seen/unseen split and
//! image features that depend linearly on each image's labels.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_label_list, Dataset, FeatureMatrix, LabelSet, Split};
use crate::error::{Error, Result};
use crate::wordvec::{normalize_in_place, WordVecTable};

const CENTER_MAX_DOT: f64 = 0.3;
const LABEL_SPREAD: f64 = 0.1;
const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub word_dim: usize,
    pub feature_dim: usize,
    pub groups: usize,
    pub labels_per_group: usize,
    pub unseen_per_group: usize,
    /// Training images.
    pub n_images: usize,
    /// Held-out images drawn from the same distribution.
    pub n_test: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Probability that an image draws from two or three groups.
    pub diversity_mix: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            feature_dim: 64,
            groups: 3,
            labels_per_group: 20,
            unseen_per_group: 4,
            n_images: 5000,
            n_test: 1000,
            min_labels: 2,
            max_labels: 6,
            diversity_mix: 0.6,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.word_dim == 0 || self.feature_dim == 0 || self.groups == 0 || self.labels_per_group == 0 {
            return bad("dimensions, groups and labels per group must be positive".into());
        }
        if self.unseen_per_group >= self.labels_per_group {
            return bad(format!(
                "unseen per group ({}) must be below labels per group ({})",
                self.unseen_per_group, self.labels_per_group
            ));
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return bad(format!(
                "labels per image range [{}, {}] is invalid",
                self.min_labels, self.max_labels
            ));
        }
        if self.max_labels > self.groups * self.labels_per_group {
            return bad(format!(
                "max labels per image {} exceeds the {} labels available",
                self.max_labels,
                self.groups * self.labels_per_group
            ));
        }
        if !(0.0..=1.0).contains(&self.diversity_mix) {
            return bad(format!("diversity mix {} outside [0, 1]", self.diversity_mix));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        Ok(())
    }

    pub fn label_name(group: usize, index: usize) -> String {
        format!("g{group}_w{index:02}")
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub wordvecs: WordVecTable,
    pub train: Dataset,
    pub test: Dataset,
    /// Group index of every label, keyed like the word-vector table.
    pub label_groups: Vec<(String, usize)>,
    /// Number of groups each image (train then test) drew from.
    pub image_groups: Vec<usize>,
}

impl SynthWorld {
    /// Writes `wordvecs.vec`, `seen.txt`, `unseen.txt` and features/labels
    /// for both splits into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.wordvecs.save(dir.join("wordvecs.vec"))?;
        self.train.save(dir.join("train.sdlf"), dir.join("train_labels.tsv"))?;
        self.test.save(dir.join("test.sdlf"), dir.join("test_labels.tsv"))?;
        let split = self.train.split();
        for (name, set) in [("seen.txt", &split.seen), ("unseen.txt", &split.unseen)] {
            let path = dir.join(name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            write_label_list(&mut w, set)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn group_centers(rng: &mut ChaCha8Rng, groups: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    for _ in 0..MAX_CENTER_ATTEMPTS {
        let centers: Vec<Vec<f64>> = (0..groups)
            .map(|_| {
                let mut c = gaussian_vec(rng, dim);
                normalize_in_place(&mut c);
                c
            })
            .collect();
        let separated = (0..groups).all(|i| (i + 1..groups).all(|j| dot(&centers[i], &centers[j]) < CENTER_MAX_DOT));
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::Config(format!(
        "could not place {groups} group centers in {dim} dimensions with pairwise dot < {CENTER_MAX_DOT}"
    )))
}

/// `d_f x d_w` map with orthonormal columns when `d_f >= d_w`, otherwise a
/// scaled Gaussian matrix. Stored row-major.
fn feature_map(rng: &mut ChaCha8Rng, d_f: usize, d_w: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_w);
    for _ in 0..d_w {
        let mut c = gaussian_vec(rng, d_f);
        if d_f >= d_w {
            for prev in &cols {
                let p = dot(&c, prev);
                c.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
            normalize_in_place(&mut c);
        } else {
            c.iter_mut().for_each(|x| *x /= (d_f as f64).sqrt());
        }
        cols.push(c);
    }
    let mut r = vec![0.0; d_f * d_w];
    for (j, col) in cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            r[i * d_w + j] = *x;
        }
    }
    r
}

/// Generates a world from `cfg`; identical configs give identical worlds.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_w = cfg.word_dim;

    let centers = group_centers(&mut rng, cfg.groups, d_w)?;
    let mut entries = Vec::new();
    let mut label_groups = Vec::new();
    let mut seen = LabelSet::new();
    let mut unseen = LabelSet::new();
    for (g, center) in centers.iter().enumerate() {
        for l in 0..cfg.labels_per_group {
            let name = SynthConfig::label_name(g, l);
            let mut v: Vec<f64> = center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + LABEL_SPREAD * z
                })
                .collect();
            normalize_in_place(&mut v);
            if l >= cfg.labels_per_group - cfg.unseen_per_group {
                unseen.insert(name.clone());
            } else {
                seen.insert(name.clone());
            }
            label_groups.push((name.clone(), g));
            entries.push((name, v));
        }
    }
    let wordvecs = WordVecTable::from_entries(d_w, entries.iter().map(|(n, v)| (n.as_str(), v.clone())))?;
    let split = Split::new(seen, unseen)?;

    let map = feature_map(&mut rng, cfg.feature_dim, d_w);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let total = cfg.n_images + cfg.n_test;
    let mut ids = Vec::with_capacity(total);
    let mut values = Vec::with_capacity(total * cfg.feature_dim);
    let mut labels = Vec::with_capacity(total);
    let mut image_groups = Vec::with_capacity(total);
    let lpg = cfg.labels_per_group;
    for n in 0..total {
        let count = rng.random_range(cfg.min_labels..=cfg.max_labels);
        let mut k = if cfg.groups > 1 && rng.random_bool(cfg.diversity_mix) {
            rng.random_range(2..=3usize).min(cfg.groups)
        } else {
            1
        };
        k = k.min(count);
        let chosen: Vec<usize> = index::sample(&mut rng, cfg.groups, k).into_vec();

        // One label from each chosen group, the rest uniformly from the pool.
        let pool: Vec<usize> = chosen.iter().flat_map(|&g| g * lpg..(g + 1) * lpg).collect();
        let mut picked: BTreeSet<usize> = BTreeSet::new();
        for &g in &chosen {
            picked.insert(g * lpg + rng.random_range(0..lpg));
        }
        let want = count.min(pool.len());
        while picked.len() < want {
            picked.insert(pool[rng.random_range(0..pool.len())]);
        }

        let mut mean = vec![0.0; d_w];
        for &l in &picked {
            mean.iter_mut().zip(&entries[l].1).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= picked.len() as f64);
        for i in 0..cfg.feature_dim {
            let signal = dot(&map[i * d_w..(i + 1) * d_w], &mean);
            values.push((signal + noise.sample(&mut rng)) as f32);
        }

        ids.push(format!("img{n:06}"));
        labels.push(picked.iter().map(|&l| entries[l].0.clone()).collect::<LabelSet>());
        image_groups.push(k);
    }

    let all = Dataset::new(FeatureMatrix::new(ids, cfg.feature_dim, values)?, labels, split)?;
    let train_idx: Vec<usize> = (0..cfg.n_images).collect();
    let test_idx: Vec<usize> = (cfg.n_images..total).collect();
    Ok(SynthWorld {
        wordvecs,
        train: all.subset(&train_idx),
        test: all.subset(&test_idx),
        label_groups,
        image_groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            word_dim: 16,
            feature_dim: 24,
            groups: 3,
            labels_per_group: 6,
            unseen_per_group: 2,
            n_images: 200,
            n_test: 50,
            min_labels: 1,
            max_labels: 5,
            diversity_mix: 0.5,
            noise_sigma: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.wordvecs, b.wordvecs);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn rejects_infeasible_configs() {
        let bad = [
            SynthConfig {
                max_labels: 19,
                ..small()
            },
            SynthConfig {
                unseen_per_group: 6,
                ..small()
            },
            SynthConfig {
                min_labels: 0,
                ..small()
            },
            SynthConfig {
                min_labels: 4,
                max_labels: 3,
                ..small()
            },
            SynthConfig {
                diversity_mix: 1.5,
                ..small()
            },
            SynthConfig {
                noise_sigma: -1.0,
                ..small()
            },
            SynthConfig { groups: 0, ..small() },
        ];
        for cfg in bad {
            assert!(generate(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn split_and_labels_are_consistent() {
        let w = generate(&small()).unwrap();
        let split = w.train.split();
        assert_eq!(split.seen.len(), 12);
        assert_eq!(split.unseen.len(), 6);
        assert!(split.seen.is_disjoint(&split.unseen));
        for (label, v) in w.wordvecs.iter() {
            assert!(split.contains(label));
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        for i in 0..w.train.len() {
            let n = w.train.labels(i).len();
            assert!((1..=5).contains(&n));
        }
    }

    #[test]
    fn single_group_world_without_diversity() {
        let w = generate(&SynthConfig {
            groups: 1,
            diversity_mix: 0.0,
            ..small()
        })
        .unwrap();
        assert!(w.image_groups.iter().all(|&g| g == 1));
        let labels: Vec<&[f64]> = w.wordvecs.iter().map(|(_, v)| v).collect();
        for a in &labels {
            for b in &labels {
                assert!(dot(a, b) > 0.5, "labels of one group should cluster");
            }
        }
    }

    #[test]
    fn feature_map_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = feature_map(&mut rng, 10, 4);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..10).map(|i| r[i * 4 + a] * r[i * 4 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }
}
