//! Word-vector tables in the FastText `.vec` text format.
//!
//! Every vector is l2-normalized when the table is built, so the scoring code
//! can treat tag vectors as unit directions. Labels are canonicalized
//! (lowercased, whitespace runs mapped to `_`) both at load and at lookup.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Lowercases `label` and joins its whitespace-separated pieces with `_`.
pub fn canonicalize(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Vectors whose norm is within this of 1 are left untouched, so a saved
/// table reloads bit-exactly.
const UNIT_SLACK: f64 = 8.0 * f64::EPSILON;

/// Scales `v` to unit Euclidean norm in place. Returns the original norm.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && (norm - 1.0).abs() > UNIT_SLACK {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Immutable map from canonical label to unit-norm word vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVecTable {
    dim: usize,
    labels: Vec<String>,
    data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl WordVecTable {
    /// Builds a table from raw (label, vector) pairs, normalizing each vector.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut table = Self::empty(dim)?;
        for (label, vector) in entries {
            table.push(label.as_ref(), vector).map_err(Error::Invalid)?;
        }
        Ok(table)
    }

    fn empty(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("word-vector dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            labels: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    fn push(&mut self, label: &str, mut vector: Vec<f64>) -> std::result::Result<(), String> {
        let key = canonicalize(label);
        if key.is_empty() {
            return Err("empty label".into());
        }
        if vector.len() != self.dim {
            return Err(format!(
                "vector for {key:?} has {} values, expected {}",
                vector.len(),
                self.dim
            ));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(format!("non-finite value in vector for {key:?}"));
        }
        if self.index.contains_key(&key) {
            return Err(format!("duplicate label {key:?} after canonicalization"));
        }
        if normalize_in_place(&mut vector) == 0.0 {
            return Err(format!("zero-norm vector for {key:?}"));
        }
        self.index.insert(key.clone(), self.labels.len());
        self.labels.push(key);
        self.data.extend_from_slice(&vector);
        Ok(())
    }

    /// Parses `.vec` text: a `<count> <dim>` header, then one
    /// `<token> <f1> ... <f_dim>` line per entry.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            context: "word vectors".into(),
            line,
            message,
        };

        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line.map_err(|e| parse_err(1, e.to_string()))?,
            None => return Err(parse_err(1, "missing header".into())),
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (count, dim) = match fields.as_slice() {
            [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(parse_err(1, format!("malformed header {header:?}"))),
            },
            _ => return Err(parse_err(1, format!("malformed header {header:?}"))),
        };

        let mut table = Self::empty(dim)?;
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
            // FastText dumps end each row with a trailing space.
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let token = parts.next().unwrap_or_default();
            let values = parts
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| parse_err(lineno, format!("bad number {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, found {}", dim + 1, values.len() + 1),
                ));
            }
            table.push(token, values).map_err(|msg| parse_err(lineno, msg))?;
        }

        if table.len() != count {
            return Err(parse_err(
                1,
                format!("header declares {count} entries, file has {}", table.len()),
            ));
        }
        Ok(table)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (label, vector) in self.iter() {
            write!(w, "{label}")?;
            for x in vector {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(&canonicalize(label))
    }

    /// Entries in file order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.labels
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(l, v)| (l.as_str(), v))
    }

    fn get(&self, key: &str) -> Option<&[f64]> {
        self.index
            .get(key)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Resolves a label to its unit vector.
    ///
    /// An exact canonical match wins. Otherwise a multi-token label
    /// (`"ice cream"`, `"ice_cream"`) resolves to the normalized mean of its
    /// tokens' vectors, provided every token is present.
    pub fn lookup(&self, label: &str) -> Result<Cow<'_, [f64]>> {
        let key = canonicalize(label);
        if let Some(v) = self.get(&key) {
            return Ok(Cow::Borrowed(v));
        }
        let tokens: Vec<&str> = key.split('_').filter(|t| !t.is_empty()).collect();
        if tokens.len() < 2 {
            return Err(Error::UnknownLabel(key));
        }
        let mut mean = vec![0.0; self.dim];
        for token in &tokens {
            let v = self
                .get(token)
                .ok_or_else(|| Error::UnknownLabel(format!("{token} (in {key})")))?;
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        if normalize_in_place(&mut mean) == 0.0 {
            return Err(Error::Numeric(format!("token vectors of {key:?} cancel out")));
        }
        Ok(Cow::Owned(mean))
    }
}

/// Reads a FastText `.vec` file.
pub fn parse_vec_file(path: impl AsRef<Path>) -> Result<WordVecTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    WordVecTable::from_reader(BufReader::new(file))
}
