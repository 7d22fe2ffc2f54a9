//! Dynamic ℓ2-norm filter pruning and physical removal of pruned filters.
//!
//! Each epoch, after the weights have been updated, every convolution has
//! its lowest-norm filters zeroized: fused convolutions lose exactly the
//! filters fusion added (conservative pruning), the rest lose
//! `⌊p·n⌋` filters when continued pruning is on. Zeroized filters keep
//! training and may be kept again in a later epoch. [`materialize`] then
//! deletes the final zero filters.

mod materialize;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionReport;
use crate::graph::{Graph, GraphError, Op, OpKind, BETA, BIAS, MEAN, WEIGHT};
use crate::tensor::{with_dtype, Element, Tensor, TensorError};

pub use materialize::{materialize, MaterializeSummary};

/// Upper bound on the continued-pruning rate unless explicitly lifted.
pub const MAX_RATE: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("pruning rate {rate} outside [0, {max}]")]
    RateOutOfRange { rate: f64, max: f64 },
    #[error("invalid pruning config: {0}")]
    InvalidConfig(String),
    #[error("cannot select {count} of {len} filters")]
    CountOutOfRange { count: usize, len: usize },
    #[error("fusion report names `{0}`, which is not a convolution of this graph")]
    UnknownNode(String),
    #[error("fusion report does not match `{node}`: {detail}")]
    ReportMismatch { node: String, detail: String },
    #[error("mask for `{node}` is inconsistent with the graph: {detail}")]
    InconsistentMask { node: String, detail: String },
    #[error("training hook failed in epoch {epoch}: {message}")]
    Hook { epoch: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    /// Prune fused convolutions back to their original size only.
    Conservative,
    /// Also prune `⌊p·n⌋` filters of every non-fused convolution.
    Continued,
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMode::Conservative => "conservative",
            PruneMode::Continued => "continued",
        })
    }
}

impl FromStr for PruneMode {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self, PruneError> {
        match s {
            "conservative" => Ok(PruneMode::Conservative),
            "continued" => Ok(PruneMode::Continued),
            other => Err(PruneError::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// Ordering among filters of equal norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowerIndexFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub mode: PruneMode,
    /// Continued-pruning rate `p`; ignored in conservative mode.
    pub rate: f64,
    pub epochs: usize,
    pub tie_break: TieBreak,
}

impl PruneConfig {
    pub fn conservative(epochs: usize) -> Self {
        PruneConfig {
            mode: PruneMode::Conservative,
            rate: 0.0,
            epochs,
            tie_break: TieBreak::LowerIndexFirst,
        }
    }

    pub fn continued(rate: f64, epochs: usize) -> Self {
        PruneConfig {
            mode: PruneMode::Continued,
            rate,
            epochs,
            tie_break: TieBreak::LowerIndexFirst,
        }
    }

    /// Checks `rate ∈ [0, max_rate]` and `epochs ≥ 1`.
    pub fn validate(&self, max_rate: f64) -> Result<(), PruneError> {
        if !(0.0..=max_rate).contains(&self.rate) {
            return Err(PruneError::RateOutOfRange {
                rate: self.rate,
                max: max_rate,
            });
        }
        if self.epochs == 0 {
            return Err(PruneError::InvalidConfig(
                "at least one epoch is required".into(),
            ));
        }
        Ok(())
    }

    /// Filters to zeroize in a non-fused convolution with `n` filters.
    pub fn continued_count(&self, n: usize) -> usize {
        match self.mode {
            PruneMode::Conservative => 0,
            // The small slack keeps e.g. 0.29 · 100 from flooring to 28.
            PruneMode::Continued => ((self.rate * n as f64) + 1e-9).floor() as usize,
        }
    }
}

/// Filters zeroized in one epoch, per convolution, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSelection {
    pub epoch: usize,
    pub selected: BTreeMap<String, Vec<usize>>,
}

/// Keep flags per convolution filter plus the per-epoch selections that
/// produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    /// `true` = kept, `false` = zeroized.
    pub keep: BTreeMap<String, Vec<bool>>,
    pub history: Vec<EpochSelection>,
}

impl PruneMask {
    /// All-keep mask over every convolution of `g`.
    pub fn all_keep(g: &Graph) -> Self {
        let keep = g
            .nodes()
            .filter_map(|n| n.conv_spec().map(|s| (n.id.clone(), vec![true; s.filters])))
            .collect();
        PruneMask {
            keep,
            history: Vec::new(),
        }
    }

    pub fn zeroized(&self, conv: &str) -> Vec<usize> {
        self.keep
            .get(conv)
            .map(|k| {
                k.iter()
                    .enumerate()
                    .filter(|(_, &v)| !v)
                    .map(|(i, _)| i)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn is_all_keep(&self) -> bool {
        self.keep.values().all(|k| k.iter().all(|&v| v))
    }

    pub fn zeroized_total(&self) -> usize {
        self.keep
            .values()
            .map(|k| k.iter().filter(|&&v| !v).count())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask is always serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// `‖W_k‖₂` for every filter `k` of a `k×c×r×s` weight tensor.
pub fn filter_l2_norms(w: &Tensor) -> Vec<f64> {
    let per = w.shape().sample_len();
    let v = w.to_f64_vec();
    if per == 0 {
        return vec![0.0; w.shape().n];
    }
    v.chunks(per)
        .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// The `count` indices of smallest norm, returned in ascending index order.
pub fn select_prune_indices(
    norms: &[f64],
    count: usize,
    tie: TieBreak,
) -> Result<Vec<usize>, PruneError> {
    if count > norms.len() {
        return Err(PruneError::CountOutOfRange {
            count,
            len: norms.len(),
        });
    }
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    match tie {
        TieBreak::LowerIndexFirst => {
            idx.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)))
        }
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Number of filters each convolution loses per epoch.
pub fn prune_counts(
    g: &Graph,
    report: &FusionReport,
    cfg: &PruneConfig,
) -> Result<BTreeMap<String, usize>, PruneError> {
    for (id, fc) in &report.convs {
        let spec = g
            .node(id)
            .and_then(|n| n.conv_spec())
            .ok_or_else(|| PruneError::UnknownNode(id.clone()))?;
        if spec.filters != fc.fused_filters {
            return Err(PruneError::ReportMismatch {
                node: id.clone(),
                detail: format!(
                    "{} filters, report expects {}",
                    spec.filters, fc.fused_filters
                ),
            });
        }
        if fc.original_filters > fc.fused_filters {
            return Err(PruneError::ReportMismatch {
                node: id.clone(),
                detail: format!(
                    "original count {} exceeds fused count {}",
                    fc.original_filters, fc.fused_filters
                ),
            });
        }
    }
    Ok(g.nodes()
        .filter_map(|n| {
            let spec = n.conv_spec()?;
            let count = match report.convs.get(&n.id) {
                Some(fc) => fc.surplus(),
                None => cfg.continued_count(spec.filters),
            };
            Some((n.id.clone(), count))
        })
        .collect())
}

/// Zeroes filter `k` of `conv` along with its bias and, when the conv feeds
/// a batch norm, that channel's β and running mean, so the channel emits
/// exact zeros in inference.
pub(crate) fn zeroize_filters(
    g: &mut Graph,
    conv: &str,
    filters: &[usize],
) -> Result<(), PruneError> {
    if filters.is_empty() {
        return Ok(());
    }
    let bn = following_bn(g, conv);
    let node = g.get_mut(conv)?;
    let per = node.param(WEIGHT)?.shape().sample_len();
    with_dtype!(node.param(WEIGHT)?.dtype(), T => {
        let w = node.param_mut(WEIGHT)?.as_mut_slice::<T>()?;
        for &k in filters {
            w[k * per..(k + 1) * per].fill(T::zero());
        }
        if let Some(b) = node.params.get_mut(BIAS) {
            let b = b.as_mut_slice::<T>()?;
            for &k in filters {
                b[k] = T::zero();
            }
        }
        if let Some(bn) = bn {
            let bn = g.get_mut(&bn)?;
            for name in [BETA, MEAN] {
                let v = bn.param_mut(name)?.as_mut_slice::<T>()?;
                for &k in filters {
                    v[k] = T::zero();
                }
            }
        }
    });
    Ok(())
}

/// The batch norm reading `conv` when it is the conv's only reader.
pub(crate) fn following_bn(g: &Graph, conv: &str) -> Option<String> {
    let c = g.consumers(conv);
    (c.len() == 1 && g.node(c[0]).is_some_and(|n| n.kind() == OpKind::Bn)).then(|| c[0].to_string())
}

/// One pruning step: rank filters by ℓ2 norm and zeroize the lowest ones
/// in place. Previously zeroized filters are ranked by their current norm
/// like any other.
pub fn soft_prune_epoch(
    g: &mut Graph,
    report: &FusionReport,
    cfg: &PruneConfig,
) -> Result<PruneMask, PruneError> {
    soft_prune_epoch_numbered(g, report, cfg, 0)
}

fn soft_prune_epoch_numbered(
    g: &mut Graph,
    report: &FusionReport,
    cfg: &PruneConfig,
    epoch: usize,
) -> Result<PruneMask, PruneError> {
    let counts = prune_counts(g, report, cfg)?;
    let mut mask = PruneMask::default();
    let mut selection = EpochSelection {
        epoch,
        selected: BTreeMap::new(),
    };
    for (id, count) in counts {
        let w = g.get(&id)?.param(WEIGHT)?;
        let chosen = select_prune_indices(&filter_l2_norms(w), count, cfg.tie_break)?;
        zeroize_filters(g, &id, &chosen)?;
        let mut keep = vec![true; w_filters(g, &id)?];
        for &k in &chosen {
            keep[k] = false;
        }
        mask.keep.insert(id.clone(), keep);
        selection.selected.insert(id, chosen);
    }
    mask.history.push(selection);
    Ok(mask)
}

fn w_filters(g: &Graph, id: &str) -> Result<usize, PruneError> {
    match &g.get(id)?.op {
        Op::Conv(s) => Ok(s.filters),
        _ => Err(PruneError::UnknownNode(id.to_string())),
    }
}

/// Alternates `update` (one epoch of training) and [`soft_prune_epoch`]
/// for `cfg.epochs` epochs. The returned mask is the final epoch's, with
/// every epoch's selection in its history.
pub fn dynamic_prune<F, E>(
    g: &Graph,
    report: &FusionReport,
    cfg: &PruneConfig,
    mut update: F,
) -> Result<(Graph, PruneMask), PruneError>
where
    F: FnMut(&mut Graph, usize) -> Result<(), E>,
    E: fmt::Display,
{
    if cfg.epochs == 0 {
        return Err(PruneError::InvalidConfig(
            "at least one epoch is required".into(),
        ));
    }
    let mut g = g.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last = PruneMask::default();
    for epoch in 0..cfg.epochs {
        update(&mut g, epoch).map_err(|e| PruneError::Hook {
            epoch,
            message: e.to_string(),
        })?;
        last = soft_prune_epoch_numbered(&mut g, report, cfg, epoch)?;
        history.append(&mut last.history);
    }
    last.history = history;
    Ok((g, last))
}

/// Whether every filter marked as zeroized in `mask` is exactly zero.
pub(crate) fn check_zeroized<T: Element>(w: &[T], per: usize, keep: &[bool]) -> Option<usize> {
    keep.iter()
        .enumerate()
        .filter(|(_, &k)| !k)
        .map(|(i, _)| i)
        .find(|&k| w[k * per..(k + 1) * per].iter().any(|v| *v != T::zero()))
}
