//! Adam with decoupled weight decay, a one-cycle cosine schedule and the
//! training loop over precomputed features.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::loss::{final_loss, LabelInstance, LossConfig, LossOutput, Variant};
use crate::model::{Gradients, ModelParams};
use crate::wordvec::WordVecTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-4,
        }
    }
}

/// Moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Weight decay shrinks the parameters by
    /// `lr * wd` before the Adam delta is applied.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("optimizer params", self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::dim("optimizer grads", params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at index {i} (step {})",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Linear warmup from `max_lr / 25` to `max_lr` over the first 30% of
/// steps, then cosine decay to `max_lr / 1e4` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: u64,
}

impl OneCycle {
    pub const WARMUP_FRACTION: f64 = 0.3;
    pub const START_DIV: f64 = 25.0;
    pub const FINAL_DIV: f64 = 1e4;

    pub fn new(max_lr: f64, total_steps: u64) -> Result<Self> {
        if !(max_lr.is_finite() && max_lr > 0.0) {
            return Err(Error::Config(format!(
                "max learning rate must be positive, got {max_lr}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(Self { max_lr, total_steps })
    }

    pub fn warmup_end(&self) -> f64 {
        Self::WARMUP_FRACTION * self.total_steps as f64
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::Invalid(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let t = t as f64;
        let start = self.max_lr / Self::START_DIV;
        let floor = self.max_lr / Self::FINAL_DIV;
        let warm = self.warmup_end();
        if t <= warm {
            if warm == 0.0 {
                return Ok(self.max_lr);
            }
            return Ok(start + (self.max_lr - start) * t / warm);
        }
        let progress = (t - warm) / (self.total_steps as f64 - warm);
        Ok(floor + (self.max_lr - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub rows: usize,
    pub variant: Variant,
    pub use_sdw: bool,
    pub seed: u64,
    /// Worker threads for per-sample loss evaluation. Results do not depend
    /// on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            max_lr: 1e-4,
            weight_decay: 3e-4,
            lambda: 0.3,
            rows: 7,
            variant: Variant::Max,
            use_sdw: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            variant: self.variant,
            lambda: self.lambda,
            use_sdw: self.use_sdw,
            rows: self.rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.max_lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.loss_config().validate()
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_l_rank: f64,
    pub mean_l_reg: f64,
    pub mean_omega_d: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

pub fn write_log<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Positive and negative seen-label indices per trainable sample.
pub(crate) struct TrainingView {
    pub vectors: Vec<Vec<f64>>,
    pub samples: Vec<(usize, Vec<usize>, Vec<usize>)>,
    pub skipped: usize,
}

impl TrainingView {
    pub fn build(dataset: &Dataset, wordvecs: &WordVecTable) -> Result<Self> {
        let seen: Vec<&String> = dataset.split().seen.iter().collect();
        let vectors = seen
            .iter()
            .map(|l| wordvecs.lookup(l).map(|v| v.into_owned()))
            .collect::<Result<Vec<_>>>()?;
        let index: HashMap<&str, usize> = seen.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

        let mut samples = Vec::new();
        let mut skipped = 0;
        for i in 0..dataset.len() {
            let mut is_pos = vec![false; seen.len()];
            for l in dataset.seen_labels(i) {
                is_pos[index[l]] = true;
            }
            let (pos, neg): (Vec<usize>, Vec<usize>) = (0..seen.len()).partition(|&j| is_pos[j]);
            if pos.is_empty() || neg.is_empty() {
                skipped += 1;
            } else {
                samples.push((i, pos, neg));
            }
        }
        Ok(Self {
            vectors,
            samples,
            skipped,
        })
    }

    pub fn instance(&self, k: usize) -> LabelInstance<'_> {
        let (_, pos, neg) = &self.samples[k];
        LabelInstance::new(
            pos.iter().map(|&j| self.vectors[j].as_slice()).collect(),
            neg.iter().map(|&j| self.vectors[j].as_slice()).collect(),
        )
    }
}

/// Trains a head on the seen labels of `dataset`.
///
/// Per sample the positives are its seen labels and the negatives every
/// other seen label; samples with no positive or no negative are skipped.
/// The batch objective is the mean per-sample loss.
pub fn train(dataset: &Dataset, wordvecs: &WordVecTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let loss_cfg = cfg.loss_config();
    let view = TrainingView::build(dataset, wordvecs)?;
    if view.samples.is_empty() {
        return Err(Error::Invalid(
            "no trainable samples (every sample lacks seen positives or negatives)".into(),
        ));
    }

    let features = dataset.features_f64();
    let d_f = dataset.feature_dim();
    let feature = |i: usize| &features[i * d_f..(i + 1) * d_f];

    let mut params = ModelParams::init(cfg.rows, wordvecs.dim(), d_f, cfg.seed)?;
    let mut grads = Gradients::zeros(params.shape());
    let mut opt = AdamW::new(
        params.as_slice().len(),
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let n = view.samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let schedule = OneCycle::new(cfg.max_lr, steps_per_epoch * cfg.epochs as u64)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let mut lr = 0.0;
        for batch in batches(n, cfg.batch_size, cfg.seed, epoch as u64)? {
            let outputs: Vec<LossOutput> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&k| {
                        let a = params.forward(feature(view.samples[k].0))?;
                        final_loss(&a, &view.instance(k), &loss_cfg)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;

            grads.clear();
            for (&k, out) in batch.iter().zip(&outputs) {
                params.backward_into(feature(view.samples[k].0), &out.grad, &mut grads)?;
                sums[0] += out.value;
                sums[1] += out.l_rank;
                sums[2] += out.l_reg;
                sums[3] += out.omega_d;
            }
            grads.scale(1.0 / batch.len() as f64);

            lr = schedule.lr_at(opt.steps())?;
            opt.step(params.as_mut_slice(), grads.as_slice(), lr)?;
            params.round_to_f32();
        }
        let nf = n as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: sums[0] / nf,
            mean_l_rank: sums[1] / nf,
            mean_l_reg: sums[2] / nf,
            mean_omega_d: sums[3] / nf,
            lr,
            skipped_samples: view.skipped,
        });
    }
    Ok(TrainOutcome { params, log })
}
