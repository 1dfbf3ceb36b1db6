//! Inference and retrieval metrics.
//!
//! Tag-based retrieval is measured with per-label average precision (images
//! ranked by their score for the tag), image tagging with micro-averaged
//! precision/recall/F1 over each image's top-K tags.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{variant_score, Variant};
use crate::model::ModelParams;
use crate::wordvec::WordVecTable;

/// Which tags are ranked: unseen only, or seen and unseen together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Zsl,
    Gzsl,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Task::Zsl),
            "gzsl" => Ok(Task::Gzsl),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl Task {
    /// Sorted tag list for this task.
    pub fn tags(self, dataset: &Dataset) -> Vec<String> {
        match self {
            Task::Zsl => dataset.split().unseen.iter().cloned().collect(),
            Task::Gzsl => dataset.split().all(),
        }
    }
}

/// `N x |T|` relevance scores with the argmax row behind each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub image_ids: Vec<String>,
    pub tags: Vec<String>,
    scores: Vec<f64>,
    rows: Vec<u32>,
}

impl ScoreMatrix {
    pub fn new(image_ids: Vec<String>, tags: Vec<String>, scores: Vec<f64>, rows: Vec<u32>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::Invalid("score matrix needs at least one tag".into()));
        }
        let cells = image_ids.len() * tags.len();
        if scores.len() != cells || rows.len() != cells {
            return Err(Error::dim("score cells", cells, scores.len().max(rows.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(Self {
            image_ids,
            tags,
            scores,
            rows,
        })
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn get(&self, image: usize, tag: usize) -> f64 {
        self.scores[image * self.tags.len() + tag]
    }

    pub fn row_of(&self, image: usize, tag: usize) -> usize {
        self.rows[image * self.tags.len() + tag] as usize
    }

    pub fn image_scores(&self, image: usize) -> &[f64] {
        &self.scores[image * self.tags.len()..(image + 1) * self.tags.len()]
    }

    pub fn tag_scores(&self, tag: usize) -> Vec<f64> {
        (0..self.n_images()).map(|i| self.get(i, tag)).collect()
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        let key = crate::wordvec::canonicalize(tag);
        self.tags.iter().position(|t| *t == key)
    }

    /// Keeps only the listed tag columns, in the given order.
    pub fn select_tags(&self, tags: &[String]) -> Result<Self> {
        let cols = tags
            .iter()
            .map(|t| self.tag_index(t).ok_or_else(|| Error::UnknownLabel(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(self.n_images() * cols.len());
        let mut rows = Vec::with_capacity(scores.capacity());
        for i in 0..self.n_images() {
            for &c in &cols {
                scores.push(self.get(i, c));
                rows.push(self.rows[i * self.n_tags() + c]);
            }
        }
        Self::new(self.image_ids.clone(), tags.to_vec(), scores, rows)
    }

    /// Keeps only the listed images.
    pub fn select_images(&self, images: &[usize]) -> Self {
        let t = self.n_tags();
        let mut scores = Vec::with_capacity(images.len() * t);
        let mut rows = Vec::with_capacity(images.len() * t);
        for &i in images {
            scores.extend_from_slice(&self.scores[i * t..(i + 1) * t]);
            rows.extend_from_slice(&self.rows[i * t..(i + 1) * t]);
        }
        Self {
            image_ids: images.iter().map(|&i| self.image_ids[i].clone()).collect(),
            tags: self.tags.clone(),
            scores,
            rows,
        }
    }
}

/// `r_ij = score(forward(x_i), t_j)` for every image and tag.
pub fn score_all(
    params: &ModelParams,
    dataset: &Dataset,
    wordvecs: &WordVecTable,
    tags: &[String],
    variant: Variant,
) -> Result<ScoreMatrix> {
    let vectors = tags
        .iter()
        .map(|t| wordvecs.lookup(t).map(|v| v.into_owned()))
        .collect::<Result<Vec<_>>>()?;
    let per_image = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let a = params.forward(&dataset.feature_row_f64(i))?;
            vectors
                .iter()
                .map(|t| variant_score(&a, t, variant))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(dataset.len() * tags.len());
    let mut rows = Vec::with_capacity(scores.capacity());
    for s in per_image.into_iter().flatten() {
        scores.push(s.value);
        rows.push(s.row as u32);
    }
    ScoreMatrix::new(dataset.ids().to_vec(), tags.to_vec(), scores, rows)
}

/// Per-cell relevance aligned with a [`ScoreMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    n_tags: usize,
    relevant: Vec<bool>,
}

impl GroundTruth {
    pub fn new(n_tags: usize, relevant: Vec<bool>) -> Result<Self> {
        if n_tags == 0 || !relevant.len().is_multiple_of(n_tags) {
            return Err(Error::Invalid("ground truth does not tile into rows".into()));
        }
        Ok(Self { n_tags, relevant })
    }

    pub fn from_dataset(dataset: &Dataset, tags: &[String]) -> Result<Self> {
        let relevant = (0..dataset.len())
            .flat_map(|i| tags.iter().map(move |t| dataset.labels(i).contains(t)))
            .collect();
        Self::new(tags.len(), relevant)
    }

    pub fn n_images(&self) -> usize {
        self.relevant.len() / self.n_tags
    }

    pub fn is_relevant(&self, image: usize, tag: usize) -> bool {
        self.relevant[image * self.n_tags + tag]
    }

    pub fn image(&self, image: usize) -> &[bool] {
        &self.relevant[image * self.n_tags..(image + 1) * self.n_tags]
    }

    pub fn tag(&self, tag: usize) -> Vec<bool> {
        (0..self.n_images()).map(|i| self.is_relevant(i, tag)).collect()
    }

    pub fn count(&self, image: usize) -> usize {
        self.image(image).iter().filter(|r| **r).count()
    }

    pub fn select_images(&self, images: &[usize]) -> Self {
        Self {
            n_tags: self.n_tags,
            relevant: images.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
        }
    }

    fn check(&self, s: &ScoreMatrix) -> Result<()> {
        if self.n_tags != s.n_tags() || self.n_images() != s.n_images() {
            return Err(Error::dim(
                "ground truth cells",
                s.n_images() * s.n_tags(),
                self.relevant.len(),
            ));
        }
        Ok(())
    }
}

fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal)
}

/// Average precision of the ranking induced by `scores` (descending, ties in
/// index order).
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::dim("relevance", scores.len(), relevance.len()));
    }
    let n_pos = relevance.iter().filter(|r| **r).count();
    if n_pos == 0 {
        return Err(Error::Invalid("average precision needs a relevant item".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(by_score_desc(scores));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAp {
    pub tag: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub per_label: Vec<LabelAp>,
    /// Tags without any relevant image, left out of the mean.
    pub skipped: Vec<String>,
}

pub fn map_score(s: &ScoreMatrix, gt: &GroundTruth) -> Result<MapResult> {
    gt.check(s)?;
    let mut per_label = Vec::new();
    let mut skipped = Vec::new();
    for (j, tag) in s.tags.iter().enumerate() {
        let rel = gt.tag(j);
        if rel.iter().any(|r| *r) {
            per_label.push(LabelAp {
                tag: tag.clone(),
                ap: average_precision(&s.tag_scores(j), &rel)?,
            });
        } else {
            skipped.push(tag.clone());
        }
    }
    let map = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().map(|l| l.ap).sum::<f64>() / per_label.len() as f64
    };
    Ok(MapResult {
        map,
        per_label,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Tag indices of the image's `k` best tags; ties fall back to tag order.
pub fn top_k_tags(s: &ScoreMatrix, image: usize, k: usize) -> Vec<usize> {
    let scores = s.image_scores(image);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(scores)(&a, &b).then_with(|| s.tags[a].cmp(&s.tags[b])));
    order.truncate(k);
    order
}

/// Micro-averaged precision, recall and F1 over each image's top-K tags:
/// `P = hits / (K N)`, `R = hits / sum |Y_i|`.
pub fn prf_at_k(s: &ScoreMatrix, gt: &GroundTruth, k: usize) -> Result<PrfAtK> {
    gt.check(s)?;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut hits = 0usize;
    let mut relevant = 0usize;
    for i in 0..s.n_images() {
        hits += top_k_tags(s, i, k)
            .into_iter()
            .filter(|&j| gt.is_relevant(i, j))
            .count();
        relevant += gt.count(i);
    }
    let n = s.n_images();
    let precision = if n > 0 { hits as f64 / (k * n) as f64 } else { 0.0 };
    let recall = if relevant > 0 {
        hits as f64 / relevant as f64
    } else {
        0.0
    };
    Ok(PrfAtK {
        k,
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub per_label_ap: Vec<LabelAp>,
    pub at_k: Vec<PrfAtK>,
    pub n_images: usize,
    pub n_tags: usize,
    pub skipped_labels: Vec<String>,
}

pub fn evaluate(s: &ScoreMatrix, gt: &GroundTruth, ks: &[usize]) -> Result<MetricsReport> {
    let map = map_score(s, gt)?;
    let at_k = ks.iter().map(|&k| prf_at_k(s, gt, k)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        map: map.map,
        per_label_ap: map.per_label,
        at_k,
        n_images: s.n_images(),
        n_tags: s.n_tags(),
        skipped_labels: map.skipped,
    })
}

/// Metrics restricted to images with strictly more than `min_labels`
/// relevant tags in the scored tag set.
pub fn diverse_subset_eval(s: &ScoreMatrix, gt: &GroundTruth, min_labels: usize, k: usize) -> Result<MetricsReport> {
    gt.check(s)?;
    let keep: Vec<usize> = (0..s.n_images()).filter(|&i| gt.count(i) > min_labels).collect();
    if keep.is_empty() {
        return Err(Error::Invalid(format!(
            "no image has more than {min_labels} relevant labels"
        )));
    }
    evaluate(&s.select_images(&keep), &gt.select_images(&keep), &[k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedImage {
    pub image_id: String,
    pub score: f64,
}

/// Images ranked by their score for `tag`, ties broken by image id.
pub fn retrieve(s: &ScoreMatrix, tag: &str, top_n: usize) -> Result<Vec<RetrievedImage>> {
    let j = s.tag_index(tag).ok_or_else(|| Error::UnknownLabel(tag.to_owned()))?;
    let scores = s.tag_scores(j);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(&scores)(&a, &b).then_with(|| s.image_ids[a].cmp(&s.image_ids[b])));
    Ok(order
        .into_iter()
        .take(top_n)
        .map(|i| RetrievedImage {
            image_id: s.image_ids[i].clone(),
            score: scores[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTag {
    pub tag: String,
    pub score: f64,
    pub row: usize,
    pub relevant: bool,
}

/// One image's top tags grouped by the row that scored them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttribution {
    pub image_id: String,
    pub rows: BTreeMap<usize, Vec<RankedTag>>,
}

pub fn row_attribution_report(s: &ScoreMatrix, gt: &GroundTruth, top_k: usize) -> Result<Vec<ImageAttribution>> {
    gt.check(s)?;
    Ok((0..s.n_images())
        .map(|i| {
            let mut rows: BTreeMap<usize, Vec<RankedTag>> = BTreeMap::new();
            for j in top_k_tags(s, i, top_k) {
                rows.entry(s.row_of(i, j)).or_default().push(RankedTag {
                    tag: s.tags[j].clone(),
                    score: s.get(i, j),
                    row: s.row_of(i, j),
                    relevant: gt.is_relevant(i, j),
                });
            }
            ImageAttribution {
                image_id: s.image_ids[i].clone(),
                rows,
            }
        })
        .collect())
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        writeln!(w)?;
    }
    Ok(())
}
