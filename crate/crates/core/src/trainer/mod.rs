//! Deterministic SGD training over graphs, and a seeded synthetic dataset.
//!
//! Enough to drive per-epoch weight updates for soft pruning on small
//! networks. Batch norm trains on batch statistics; channels flagged
//! frozen use their running statistics and never change.

mod data;
mod tape;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{execute, Graph, GraphError, Op, BETA, GAMMA, MEAN, VAR};
use crate::tensor::{with_dtype, Element, Tensor, TensorError};

pub use data::{DataSpec, Split, SynthDataset, SynthSpec};
pub use tape::{param_key, Backward};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("{0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid data spec: {0}")]
    DataSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Weight of the batch statistic in the running-statistics update.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
            || !(0.0..=1.0).contains(&self.bn_momentum)
        {
            return Err(TrainError::InvalidConfig(
                "momentum, weight decay or bn momentum out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Loss and gradients with batch norm in training mode. Leaves the graph,
/// including running statistics, untouched.
pub fn loss_and_gradients(g: &Graph, x: &Tensor, labels: &[usize]) -> Result<Backward, TrainError> {
    tape::dispatch(g, x, labels, true)
}

/// Training-mode output, batch norm normalizing with batch statistics.
pub fn training_forward(g: &Graph, x: &Tensor) -> Result<Tensor, TrainError> {
    let labels = vec![0; x.shape().n];
    Ok(tape::dispatch(g, x, &labels, false)?.logits)
}

/// Training-mode loss only.
pub fn training_loss(g: &Graph, x: &Tensor, labels: &[usize]) -> Result<f64, TrainError> {
    Ok(tape::dispatch(g, x, labels, false)?.loss)
}

/// [`loss_and_gradients`] plus the running-statistics update of every
/// non-frozen batch-norm channel:
/// `μ ← (1−m)·μ + m·μ_B`, `σ² ← (1−m)·σ² + m·σ²_B·N/(N−1)`.
pub fn forward_backward(
    g: &mut Graph,
    x: &Tensor,
    labels: &[usize],
    bn_momentum: f64,
) -> Result<Backward, TrainError> {
    let back = loss_and_gradients(g, x, labels)?;
    let shapes = g.validate()?;
    for (id, (mean, var)) in &back.batch_stats {
        let s = shapes.shape(id).expect("validated");
        let count = (x.shape().n * s.h * s.w) as f64;
        let unbias = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        let node = g.get_mut(id)?;
        let frozen = node.frozen_channels(s.c);
        with_dtype!(node.param(MEAN)?.dtype(), T => {
            let m = T::of(bn_momentum);
            let keep = T::of(1.0 - bn_momentum);
            let rm = node.param_mut(MEAN)?.as_mut_slice::<T>()?;
            for c in 0..s.c {
                if !frozen[c] {
                    rm[c] = keep * rm[c] + m * T::of(mean[c]);
                }
            }
            let rv = node.param_mut(VAR)?.as_mut_slice::<T>()?;
            for c in 0..s.c {
                if !frozen[c] {
                    rv[c] = keep * rv[c] + m * T::of(var[c] * unbias);
                }
            }
        });
    }
    Ok(back)
}

/// Momentum SGD with L2 weight decay:
/// `v ← momentum·v + g + wd·p`, `p ← p − lr·v`.
///
/// Frozen batch-norm channels are skipped entirely, weight decay included.
pub fn sgd_step(
    g: &mut Graph,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (key, grad) in grads {
        let (node_id, pname) = key
            .rsplit_once('/')
            .ok_or_else(|| TrainError::Shape(format!("malformed parameter key `{key}`")))?;
        let node = g.get_mut(node_id)?;
        let frozen = match &node.op {
            Op::Bn { .. } if pname == GAMMA || pname == BETA => node.frozen_channels(grad.len()),
            _ => vec![false; grad.len()],
        };
        let p = node.param_mut(pname)?;
        if p.shape() != grad.shape() {
            return Err(TrainError::Shape(format!(
                "gradient {} for parameter {key} of shape {}",
                grad.shape(),
                p.shape()
            )));
        }
        let v = velocity
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape(), grad.dtype()));
        if v.shape() != grad.shape() {
            *v = Tensor::zeros(grad.shape(), grad.dtype());
        }
        with_dtype!(p.dtype(), T => {
            let (lr, mom, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
            let gs = grad.as_slice::<T>()?;
            let vs = v.as_mut_slice::<T>()?;
            let ps = p.as_mut_slice::<T>()?;
            // Per-channel params and per-filter weights share the flag index
            // only for BN, where both are vectors.
            for i in 0..ps.len() {
                if frozen.get(i).copied().unwrap_or(false) {
                    continue;
                }
                vs[i] = mom * vs[i] + gs[i] + wd * ps[i];
                ps[i] -= lr * vs[i];
            }
        });
    }
    Ok(())
}

/// Holds the SGD velocity across epochs.
#[derive(Debug, Clone, Default)]
pub struct Trainer {
    pub cfg: TrainConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    /// Sample order of epoch `epoch`, a pure function of the seed.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64,
        );
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `data` in mini-batches; returns the mean batch loss.
    pub fn train_epoch(
        &mut self,
        g: &mut Graph,
        data: &Split,
        epoch: usize,
    ) -> Result<f64, TrainError> {
        let order = self.epoch_order(data.len(), epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = data.batch(chunk, g.dtype())?;
            let back = forward_backward(g, &x, &y, self.cfg.bn_momentum)?;
            sgd_step(g, &back.grads, &mut self.velocity, &self.cfg)?;
            total += back.loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Drops velocity for parameters whose shape changed (e.g. after
    /// fusion) so they restart from rest.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Fraction of `data` classified correctly, batch norm in inference mode.
pub fn evaluate(g: &Graph, data: &Split) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = data.batch(chunk, g.dtype())?;
        let logits = execute(g, &x)?;
        let classes = logits.shape().sample_len();
        let v = logits.to_f64_vec();
        for (s, &label) in y.iter().enumerate() {
            let row = &v[s * classes..(s + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (k, &val)| if val > row[b] { k } else { b });
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Parameters that SGD updates, for snapshotting.
pub fn trainable_params(g: &Graph) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for n in g.nodes() {
        let names: &[&str] = match n.op {
            Op::Conv(_) | Op::Fc { .. } => &["weight", "bias"],
            Op::Bn { .. } => &[GAMMA, BETA],
            _ => &[],
        };
        for &name in names {
            if let Some(t) = n.params.get(name) {
                out.insert(param_key(&n.id, name), t.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
