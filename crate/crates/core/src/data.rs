//! Datasets over precomputed image features.
//!
//! Files:
//! - features: `"SDLF"`, little-endian `u32` version, N, d_f, then N ids as
//!   `u16` byte length + UTF-8, then `N * d_f` little-endian `f32` row-major;
//! - labels: TSV `image_id<TAB>label,label,...`;
//! - splits: one label per line, seen and unseen in separate files.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::wordvec::canonicalize;

const FEATURE_MAGIC: &[u8; 4] = b"SDLF";
const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;

pub type LabelSet = BTreeSet<String>;

/// Image ids with an `N x d_f` feature matrix, order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dim {
            return Err(Error::dim("feature values", ids.len() * dim, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        if let Some(id) = ids.iter().find(|id| id.len() > u16::MAX as usize) {
            return Err(Error::Invalid(format!("image id too long ({} bytes)", id.len())));
        }
        Ok(Self { ids, dim, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn encoded_len(&self) -> usize {
        FEATURE_HEADER_LEN + self.ids.iter().map(|id| 2 + id.len()).sum::<usize>() + 4 * self.values.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(FEATURE_MAGIC);
        for v in [FEATURE_VERSION, self.len() as u32, self.dim as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading features: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format("bad feature-file magic".into()));
        }
        let version = cur.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature-file version {version}")));
        }
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::Format("image id is not UTF-8".into()))?;
            ids.push(id.to_owned());
        }
        let body = n
            .checked_mul(dim)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("feature matrix too large".into()))?;
        let values: Vec<f32> = cur
            .take(body)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after feature matrix",
                bytes.len() - cur.pos
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Self { ids, dim, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "feature file truncated at byte {}",
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::read_from(std::io::BufReader::new(file))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses label TSV text against the known image ids. Images without a row
/// get an empty set.
pub fn parse_labels(text: &str, ids: &[String]) -> Result<Vec<LabelSet>> {
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut labels = vec![LabelSet::new(); ids.len()];
    let mut seen_rows = vec![false; ids.len()];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
        let err = |message: String| Error::Parse {
            context: "labels".into(),
            line: i + 1,
            message,
        };
        let &idx = position
            .get(id)
            .ok_or_else(|| err(format!("unknown image id {id:?}")))?;
        if std::mem::replace(&mut seen_rows[idx], true) {
            return Err(err(format!("duplicate row for image {id:?}")));
        }
        labels[idx] = rest.split(',').map(canonicalize).filter(|l| !l.is_empty()).collect();
    }
    Ok(labels)
}

pub fn load_labels(path: impl AsRef<Path>, ids: &[String]) -> Result<Vec<LabelSet>> {
    parse_labels(&read_text(path.as_ref())?, ids)
}

pub fn write_labels<W: Write>(mut w: W, ids: &[String], labels: &[LabelSet]) -> std::io::Result<()> {
    for (id, set) in ids.iter().zip(labels) {
        let joined: Vec<&str> = set.iter().map(String::as_str).collect();
        writeln!(w, "{id}\t{}", joined.join(","))?;
    }
    Ok(())
}

/// Disjoint seen/unseen label vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub seen: LabelSet,
    pub unseen: LabelSet,
}

impl Split {
    pub fn new(seen: LabelSet, unseen: LabelSet) -> Result<Self> {
        if seen.is_empty() {
            return Err(Error::Invalid("seen label set is empty".into()));
        }
        if let Some(l) = seen.intersection(&unseen).next() {
            return Err(Error::Invalid(format!("label {l:?} is both seen and unseen")));
        }
        Ok(Self { seen, unseen })
    }

    /// All labels, sorted.
    pub fn all(&self) -> Vec<String> {
        self.seen.union(&self.unseen).cloned().collect()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.seen.contains(label) || self.unseen.contains(label)
    }
}

fn parse_label_list(text: &str) -> LabelSet {
    text.lines().map(canonicalize).filter(|l| !l.is_empty()).collect()
}

pub fn parse_split(seen: &str, unseen: &str) -> Result<Split> {
    Split::new(parse_label_list(seen), parse_label_list(unseen))
}

pub fn load_split(seen_path: impl AsRef<Path>, unseen_path: impl AsRef<Path>) -> Result<Split> {
    parse_split(&read_text(seen_path.as_ref())?, &read_text(unseen_path.as_ref())?)
}

pub fn write_label_list<W: Write>(mut w: W, labels: &LabelSet) -> std::io::Result<()> {
    for l in labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

/// Features, per-image label sets and the seen/unseen split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: FeatureMatrix,
    labels: Vec<LabelSet>,
    split: Split,
}

impl Dataset {
    pub fn new(features: FeatureMatrix, labels: Vec<LabelSet>, split: Split) -> Result<Self> {
        if labels.len() != features.len() {
            return Err(Error::dim("label rows", features.len(), labels.len()));
        }
        for (id, set) in features.ids.iter().zip(&labels) {
            if let Some(l) = set.iter().find(|l| !split.contains(l)) {
                return Err(Error::Invalid(format!(
                    "image {id:?} has label {l:?} outside the seen/unseen split"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn load(
        features: impl AsRef<Path>,
        labels: impl AsRef<Path>,
        seen: impl AsRef<Path>,
        unseen: impl AsRef<Path>,
    ) -> Result<Self> {
        let features = load_features(features)?;
        let labels = load_labels(labels, &features.ids)?;
        let split = load_split(seen, unseen)?;
        Self::new(features, labels, split)
    }

    /// Writes the feature file and label TSV. Split files are written
    /// separately since they are shared between train and test sets.
    pub fn save(&self, features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        self.features.save(&features)?;
        let path = labels.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_labels(&mut w, &self.features.ids, &self.labels)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn ids(&self) -> &[String] {
        &self.features.ids
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    /// Full annotation, seen and unseen.
    pub fn labels(&self, i: usize) -> &LabelSet {
        &self.labels[i]
    }

    /// The training view: only seen labels.
    pub fn seen_labels(&self, i: usize) -> impl Iterator<Item = &str> {
        self.labels[i]
            .iter()
            .filter(|l| self.split.seen.contains(*l))
            .map(String::as_str)
    }

    pub fn feature_row_f64(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().map(|&v| v as f64).collect()
    }

    /// All feature rows widened to `f64`, row-major.
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.values.iter().map(|&v| v as f64).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let dim = self.features.dim;
        let mut values = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
        }
        Self {
            features: FeatureMatrix {
                ids: indices.iter().map(|&i| self.features.ids[i].clone()).collect(),
                dim,
                values,
            },
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            split: self.split.clone(),
        }
    }
}

/// A seeded permutation of `0..n` for `(seed, epoch)`, chunked into batches;
/// the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
