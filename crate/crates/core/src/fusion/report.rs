use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BlockKind, FusionError};

/// Where a filter (or input channel) of a fused convolution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    /// Identity passthrough weights.
    XconvIdentity,
    /// Zero-padded 1×1 projection weights.
    PconvProjection,
}

/// Bookkeeping for one convolution touched by fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedConv {
    pub block: String,
    /// Filter count before fusion (`m`).
    pub original_filters: usize,
    /// Filter count right after fusion (`n`).
    pub fused_filters: usize,
    pub filters: Vec<Provenance>,
    pub channels: Vec<Provenance>,
}

impl FusedConv {
    pub fn passthrough_filters(&self) -> usize {
        self.filters
            .iter()
            .filter(|p| **p != Provenance::Original)
            .count()
    }

    pub fn passthrough_channels(&self) -> usize {
        self.channels
            .iter()
            .filter(|p| **p != Provenance::Original)
            .count()
    }

    /// Filters to zeroize per pruning epoch: `n − m`.
    pub fn surplus(&self) -> usize {
        self.fused_filters - self.original_filters
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedBlock {
    pub tag: String,
    pub kind: BlockKind,
    pub convs: Vec<String>,
    /// Node ids deleted by the rewrite (the add, plus shortcut operators).
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedBlock {
    pub tag: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    #[serde(default)]
    pub option: Option<String>,
    pub convs: BTreeMap<String, FusedConv>,
    pub blocks: Vec<FusedBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedBlock>,
}

impl FusionReport {
    pub fn is_empty(&self) -> bool {
        self.convs.is_empty() && self.blocks.is_empty()
    }

    pub fn is_fused(&self, conv: &str) -> bool {
        self.convs.contains_key(conv)
    }

    pub fn removed_adds(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.removed)
            .filter(|id| id.ends_with("add"))
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Which blocks to fuse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FusionOption {
    /// `x/n`: every block of the first `fused` of `total` stages.
    Stages { fused: usize, total: usize },
    /// `(s1, s2, ..., sn)`: the first `s_i` blocks of stage `i`.
    Blocks(Vec<usize>),
}

impl FusionOption {
    pub fn none(total: usize) -> Self {
        FusionOption::Stages { fused: 0, total }
    }

    pub fn all(total: usize) -> Self {
        FusionOption::Stages {
            fused: total,
            total,
        }
    }

    /// Checks the option against the per-stage block counts of a graph.
    pub fn check(&self, blocks_per_stage: &[usize]) -> Result<(), FusionError> {
        match self {
            FusionOption::Stages { fused, total } => {
                if *total != blocks_per_stage.len() {
                    return Err(FusionError::InvalidOption(format!(
                        "option {self} names {total} stages, model has {}",
                        blocks_per_stage.len()
                    )));
                }
                if fused > total {
                    return Err(FusionError::InvalidOption(format!(
                        "{fused} > {total} in {self}"
                    )));
                }
            }
            FusionOption::Blocks(counts) => {
                if counts.len() != blocks_per_stage.len() {
                    return Err(FusionError::InvalidOption(format!(
                        "option {self} names {} stages, model has {}",
                        counts.len(),
                        blocks_per_stage.len()
                    )));
                }
                for (i, (&want, &have)) in counts.iter().zip(blocks_per_stage).enumerate() {
                    if want > have {
                        return Err(FusionError::InvalidOption(format!(
                            "stage{} has {have} blocks, option asks for {want}",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether block `j` of stage `i` (both 1-based) is selected.
    pub fn selects(&self, stage: usize, block: usize) -> bool {
        match self {
            FusionOption::Stages { fused, .. } => stage >= 1 && stage <= *fused,
            FusionOption::Blocks(counts) => {
                stage >= 1
                    && counts
                        .get(stage - 1)
                        .is_some_and(|&c| block >= 1 && block <= c)
            }
        }
    }
}

impl fmt::Display for FusionOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionOption::Stages { fused, total } => write!(f, "{fused}/{total}"),
            FusionOption::Blocks(c) => {
                let parts: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                write!(f, "({})", parts.join(","))
            }
        }
    }
}

impl FromStr for FusionOption {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, FusionError> {
        let s = s.trim();
        let bad = |why: &str| FusionError::InvalidOption(format!("`{s}`: {why}"));
        if let Some((x, n)) = s.split_once('/') {
            let fused: usize = x.trim().parse().map_err(|_| bad("x is not a count"))?;
            let total: usize = n.trim().parse().map_err(|_| bad("n is not a count"))?;
            if fused > total {
                return Err(bad("x exceeds n"));
            }
            return Ok(FusionOption::Stages { fused, total });
        }
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .unwrap_or(s);
        let counts = inner
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("expected x/n or (s1,s2,...)"))?;
        if counts.is_empty() {
            return Err(bad("no stages"));
        }
        Ok(FusionOption::Blocks(counts))
    }
}
