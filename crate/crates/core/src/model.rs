//! Linear head mapping an image feature vector to its embedding matrix.
//!
//! `A = reshape(W x + b)` with `W: (M d_w) x d_f`, reshaped row-major so that
//! output block `m` is row `m` of `A`. Weights and bias live in one buffer
//! (`W` row-major, then `b`) so the optimizer can treat them as one vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::EmbeddingMatrix;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDLM";
const CHECKPOINT_VERSION: u32 = 1;
/// magic + version + M + d_w + d_f.
pub const CHECKPOINT_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HeadShape {
    pub rows: usize,
    pub word_dim: usize,
    pub feature_dim: usize,
}

impl HeadShape {
    pub fn new(rows: usize, word_dim: usize, feature_dim: usize) -> Result<Self> {
        if rows == 0 || word_dim == 0 || feature_dim == 0 {
            return Err(Error::Config(format!(
                "head dimensions must be positive (M={rows}, d_w={word_dim}, d_f={feature_dim})"
            )));
        }
        Ok(Self {
            rows,
            word_dim,
            feature_dim,
        })
    }

    pub fn outputs(&self) -> usize {
        self.rows * self.word_dim
    }

    pub fn weight_len(&self) -> usize {
        self.outputs() * self.feature_dim
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.outputs()
    }

    pub fn checkpoint_len(&self) -> usize {
        CHECKPOINT_HEADER_LEN + 4 * self.param_len()
    }
}

/// Parameters of the head. Values are kept representable in `f32` so that
/// checkpoints round-trip exactly; see [`ModelParams::round_to_f32`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: HeadShape,
    values: Vec<f64>,
}

/// Gradient buffer laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    shape: HeadShape,
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_len()],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[..self.shape.weight_len()]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[self.shape.weight_len()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|g| *g *= alpha);
    }
}

impl ModelParams {
    /// Gaussian weights with standard deviation `1/sqrt(d_f)`, zero bias.
    pub fn init(rows: usize, word_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let shape = HeadShape::new(rows, word_dim, feature_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5d1_4ead);
        let normal = Normal::new(0.0, 1.0 / (feature_dim as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let mut values: Vec<f64> = (0..shape.weight_len())
            .map(|_| normal.sample(&mut rng) as f32 as f64)
            .collect();
        values.resize(shape.param_len(), 0.0);
        Ok(Self { shape, values })
    }

    pub fn from_parts(shape: HeadShape, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != shape.weight_len() {
            return Err(Error::dim("weights", shape.weight_len(), weights.len()));
        }
        if bias.len() != shape.outputs() {
            return Err(Error::dim("bias", shape.outputs(), bias.len()));
        }
        let mut values = weights;
        values.extend(bias);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[..self.shape.weight_len()]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[self.shape.weight_len()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    pub fn forward(&self, x: &[f64]) -> Result<EmbeddingMatrix> {
        if x.len() != self.shape.feature_dim {
            return Err(Error::dim("feature vector", self.shape.feature_dim, x.len()));
        }
        let d_f = self.shape.feature_dim;
        let out: Vec<f64> = self
            .weights()
            .chunks_exact(d_f)
            .zip(self.bias())
            .map(|(w, b)| b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        EmbeddingMatrix::new(self.shape.rows, self.shape.word_dim, out)
    }

    /// `grad_W += vec(grad_A) x^T`, `grad_b += vec(grad_A)`.
    pub fn backward_into(&self, x: &[f64], grad_a: &EmbeddingMatrix, grads: &mut Gradients) -> Result<()> {
        let shape = self.shape;
        if x.len() != shape.feature_dim {
            return Err(Error::dim("feature vector", shape.feature_dim, x.len()));
        }
        if grad_a.rows() != shape.rows || grad_a.cols() != shape.word_dim {
            return Err(Error::dim(
                "gradient matrix",
                shape.outputs(),
                grad_a.rows() * grad_a.cols(),
            ));
        }
        if grads.shape != shape {
            return Err(Error::dim("gradient buffer", shape.param_len(), grads.values.len()));
        }
        let (gw, gb) = grads.values.split_at_mut(shape.weight_len());
        for ((row, g), b) in gw
            .chunks_exact_mut(shape.feature_dim)
            .zip(grad_a.as_slice())
            .zip(gb.iter_mut())
        {
            *b += g;
            if *g != 0.0 {
                row.iter_mut().zip(x).for_each(|(w, x)| *w += g * x);
            }
        }
        Ok(())
    }

    pub fn backward(&self, x: &[f64], grad_a: &EmbeddingMatrix) -> Result<Gradients> {
        let mut grads = Gradients::zeros(self.shape);
        self.backward_into(x, grad_a, &mut grads)?;
        Ok(grads)
    }

    /// Checkpoint layout: `"SDLM"`, then little-endian `u32` version, M, d_w,
    /// d_f, then `W` row-major and `b` as little-endian `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(self.shape.checkpoint_len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.shape.rows as u32,
            self.shape.word_dim as u32,
            self.shape.feature_dim as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(Error::Format("checkpoint truncated in header".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let shape = HeadShape::new(word(1) as usize, word(2) as usize, word(3) as usize)
            .map_err(|e| Error::Format(format!("checkpoint shape: {e}")))?;
        let expected = shape.checkpoint_len();
        if bytes.len() < expected {
            return Err(Error::Format(format!(
                "checkpoint truncated: {} of {expected} bytes",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "checkpoint shape mismatch: {} bytes for a {}x{}x{} head",
                bytes.len(),
                shape.rows,
                shape.word_dim,
                shape.feature_dim
            )));
        }
        let values: Vec<f64> = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("checkpoint contains non-finite values".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(p: &ModelParams) -> Vec<u8> {
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        buf
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = ModelParams::init(3, 4, 5, 11).unwrap();
        let b = ModelParams::init(3, 4, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.bias().iter().all(|b| *b == 0.0));
        assert_ne!(a, ModelParams::init(3, 4, 5, 12).unwrap());
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(ModelParams::init(0, 4, 5, 0).is_err());
        assert!(ModelParams::init(1, 0, 5, 0).is_err());
        assert!(ModelParams::init(1, 4, 0, 0).is_err());
    }

    #[test]
    fn init_weight_spread_matches_fan_in() {
        let p = ModelParams::init(4, 16, 1024, 3).unwrap();
        let w = p.weights();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / 32.0;
        assert!((std - target).abs() < 0.1 * target, "std {std}");
    }

    #[test]
    fn forward_of_zero_params_is_zero() {
        let shape = HeadShape::new(2, 3, 4).unwrap();
        let p = ModelParams::from_parts(shape, vec![0.0; 24], vec![0.0; 6]).unwrap();
        let a = p.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(a.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_single_feature_is_bias_plus_column() {
        let shape = HeadShape::new(2, 2, 1).unwrap();
        let p = ModelParams::from_parts(shape, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5, -1.0, 0.0]).unwrap();
        let a = p.forward(&[1.0]).unwrap();
        assert_eq!(a.row(0), &[1.5, 2.5]);
        assert_eq!(a.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let p = ModelParams::init(1, 2, 3, 0).unwrap();
        assert!(p.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_is_linear_without_bias() {
        let p = ModelParams::init(3, 4, 6, 9).unwrap();
        let x = [0.1, -0.4, 0.3, 0.9, -1.2, 0.05];
        let sx: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
        let a = p.forward(&x).unwrap();
        let b = p.forward(&sx).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((2.5 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let p = ModelParams::init(2, 3, 4, 1).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let g = p.backward(&x, &EmbeddingMatrix::zeros(2, 3)).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));

        let ga = EmbeddingMatrix::new(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let g = p.backward(&[0.0; 4], &ga).unwrap();
        assert!(g.weights().iter().all(|v| *v == 0.0));
        assert_eq!(g.bias(), ga.as_slice());

        let g = p.backward(&x, &ga).unwrap();
        assert_eq!(&g.weights()[4..8], &[-2.0, -4.0, -6.0, -8.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_size() {
        let p = ModelParams::init(3, 5, 7, 4).unwrap();
        let buf = bytes(&p);
        assert_eq!(buf.len(), 20 + 4 * (3 * 5 * 7 + 3 * 5));
        let q = ModelParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes(&q), buf);
    }

    #[test]
    fn checkpoint_errors() {
        let p = ModelParams::init(2, 2, 2, 0).unwrap();
        let good = bytes(&p);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(ModelParams::read_checkpoint(bad.as_slice()).is_err());

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(ModelParams::read_checkpoint(bad.as_slice()).is_err());

        assert!(ModelParams::read_checkpoint(&good[..good.len() - 1]).is_err());
        assert!(ModelParams::read_checkpoint(&good[..10]).is_err());

        let mut bad = good.clone();
        bad.extend_from_slice(&[0, 0, 0, 0]);
        assert!(ModelParams::read_checkpoint(bad.as_slice()).is_err());
    }
}
