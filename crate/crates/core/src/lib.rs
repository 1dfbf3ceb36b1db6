//! Zero-shot multi-label tag ranking with multi-row embedding heads.
//!
//! A linear head maps an image feature vector to an `M x d_w` matrix whose
//! rows are principal directions in word-vector space; a tag scores the
//! maximum projection of its word vector over the rows. The crate covers the
//! ranking objective and its gradients ([`loss`]), the head ([`model`]),
//! optimization ([`optim`]), dataset I/O ([`data`]), metrics ([`eval`]),
//! synthetic worlds ([`synth`]), finite-difference checks ([`gradcheck`])
//! and ablation grids ([`ablate`]).

pub mod ablate;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod synth;
pub mod wordvec;

pub use data::{Dataset, FeatureMatrix, LabelSet, Split};
pub use error::{Error, Result};
pub use eval::{GroundTruth, MetricsReport, ScoreMatrix, Task};
pub use loss::{EmbeddingMatrix, LabelInstance, LossConfig, LossOutput, Variant};
pub use model::{Gradients, HeadShape, ModelParams};
pub use optim::{EpochLog, TrainConfig, TrainOutcome};
pub use synth::{SynthConfig, SynthWorld};
pub use wordvec::WordVecTable;
