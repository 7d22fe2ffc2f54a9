//! Cost accounting: FLOP counts, wall-clock profiles and the speedup model.
//!
//! One multiply-accumulate counts as two FLOPs. Operators fall into
//! parametric ones (COP: conv, fc) and non-parametric ones (SOP: add, relu,
//! bn, pools); everything else is `other`. There is no system-call time in
//! an in-process engine, so the `sys` figure is always 0.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{execute_timed, Graph, GraphError, Op, OpKind};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("fraction p = {0} is outside [0, 1]")]
    Fraction(f64),
    #[error("acceleration factor a = {0} must be positive")]
    Factor(f64),
    #[error("the bound is infinite for p = 1")]
    Unbounded,
    #[error("at least one run is required")]
    NoRuns,
    #[error("profile line {line}: {detail}")]
    Profile { line: usize, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cop,
    Sop,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Cop, Category::Sop, Category::Other];

    pub fn of(kind: OpKind) -> Category {
        match kind {
            OpKind::Conv | OpKind::Fc => Category::Cop,
            OpKind::Add | OpKind::Relu | OpKind::Bn | OpKind::MaxPool | OpKind::GAvgPool => {
                Category::Sop
            }
            OpKind::Input | OpKind::Output | OpKind::Concat => Category::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Cop => "cop",
            Category::Sop => "sop",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub id: String,
    pub kind: OpKind,
    pub category: Category,
    pub flops: u64,
    /// Mean wall time in seconds, for profiled reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

/// Per-node costs in schedule order. Input nodes do no work and are left
/// out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    /// Measured runs behind the times, 0 for a pure FLOP count.
    #[serde(default)]
    pub runs: usize,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn category_flops(&self, c: Category) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.category == c)
            .map(|n| n.flops)
            .sum()
    }

    pub fn kind_flops(&self, k: OpKind) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.kind == k)
            .map(|n| n.flops)
            .sum()
    }

    pub fn is_timed(&self) -> bool {
        !self.nodes.is_empty() && self.nodes.iter().all(|n| n.seconds.is_some())
    }

    pub fn total_seconds(&self) -> Option<f64> {
        self.is_timed()
            .then(|| self.nodes.iter().filter_map(|n| n.seconds).sum())
    }

    pub fn category_seconds(&self, c: Category) -> Option<f64> {
        self.is_timed().then(|| {
            self.nodes
                .iter()
                .filter(|n| n.category == c)
                .filter_map(|n| n.seconds)
                .sum()
        })
    }

    /// Always 0: the engine makes no system calls between operators.
    pub fn sys_seconds(&self) -> f64 {
        0.0
    }

    /// Fraction of time (profiled reports) or FLOPs spent in `c`.
    pub fn share(&self, c: Category) -> f64 {
        let (part, total) = match (self.category_seconds(c), self.total_seconds()) {
            (Some(p), Some(t)) => (p, t),
            _ => (self.category_flops(c) as f64, self.total_flops() as f64),
        };
        if total > 0.0 {
            part / total
        } else {
            0.0
        }
    }

    pub fn by_category(&self) -> BTreeMap<Category, u64> {
        Category::ALL
            .iter()
            .map(|&c| (c, self.category_flops(c)))
            .collect()
    }

    pub fn by_kind(&self) -> BTreeMap<OpKind, u64> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.kind).or_insert(0) += n.flops;
        }
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// `category seconds` lines, the format [`parse_profile`] reads.
    /// `None` for an untimed report.
    pub fn profile_text(&self) -> Option<String> {
        let mut out = String::new();
        for c in Category::ALL {
            out.push_str(&format!("{c} {:e}\n", self.category_seconds(c)?));
        }
        out.push_str(&format!("sys {:e}\n", self.sys_seconds()));
        Some(out)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let timed = self.is_timed();
        for n in &self.nodes {
            write!(
                f,
                "{:<32} {:<8} {:<5} {:>14}",
                n.id, n.kind, n.category, n.flops
            )?;
            if let Some(s) = n.seconds.filter(|_| timed) {
                write!(f, " {s:>12.3e}s")?;
            }
            writeln!(f)?;
        }
        for c in Category::ALL {
            write!(
                f,
                "total {c:<5} flops {:>14} share {:>6.2}%",
                self.category_flops(c),
                100.0 * self.share(c)
            )?;
            if let Some(s) = self.category_seconds(c) {
                write!(f, " time {s:.3e}s")?;
            }
            writeln!(f)?;
        }
        write!(f, "total flops {}", self.total_flops())?;
        if let Some(s) = self.total_seconds() {
            write!(f, " time {s:.3e}s sys 0s over {} runs", self.runs)?;
        }
        Ok(())
    }
}

fn node_flops(op: &Op, input: crate::tensor::Shape, out: crate::tensor::Shape) -> u64 {
    let elems = |s: crate::tensor::Shape| s.len() as u64;
    match op {
        Op::Conv(spec) => {
            let (r, s) = spec.kernel;
            let pixels = (out.n * out.h * out.w) as u64;
            let macs = (spec.filters * spec.channels * r * s) as u64 * pixels;
            2 * macs
                + if spec.bias {
                    spec.filters as u64 * pixels
                } else {
                    0
                }
        }
        Op::Fc {
            inputs, outputs, ..
        } => 2 * (inputs * outputs * out.n) as u64,
        Op::Add | Op::Relu => elems(out),
        Op::Bn { .. } => 2 * elems(out),
        Op::MaxPool(p) => elems(out) * (p.window.0 * p.window.1) as u64,
        Op::GAvgPool => elems(input),
        Op::Input | Op::Output | Op::Concat => 0,
    }
}

/// FLOPs of every node at the graph's nominal input shape.
pub fn count_flops(g: &Graph) -> Result<CostReport, AnalysisError> {
    let table = g.validate()?;
    let mut nodes = Vec::with_capacity(table.order.len());
    for id in &table.order {
        let node = g.get(id)?;
        if node.kind() == OpKind::Input {
            continue;
        }
        let out = table.shapes[id];
        let input = node.inputs.first().map_or(out, |i| table.shapes[i]);
        nodes.push(NodeCost {
            id: id.clone(),
            kind: node.kind(),
            category: Category::of(node.kind()),
            flops: node_flops(&node.op, input, out),
            seconds: None,
        });
    }
    Ok(CostReport { nodes, runs: 0 })
}

/// Runs discarded before timing starts: ⌈runs/10⌉.
pub fn warmup_runs(runs: usize) -> usize {
    runs.div_ceil(10)
}

/// Mean per-node wall time over `runs` timed executions on `x`, after
/// [`warmup_runs`] untimed ones. Single-threaded.
pub fn profile(g: &Graph, x: &Tensor, runs: usize) -> Result<CostReport, AnalysisError> {
    if runs == 0 {
        return Err(AnalysisError::NoRuns);
    }
    let mut report = count_flops(g)?;
    for _ in 0..warmup_runs(runs) {
        execute_timed(g, x)?;
    }
    let mut sums: BTreeMap<String, Duration> = BTreeMap::new();
    for _ in 0..runs {
        let (_, times) = execute_timed(g, x)?;
        for (id, d) in times {
            *sums.entry(id).or_default() += d;
        }
    }
    for n in &mut report.nodes {
        n.seconds = Some(
            sums.get(&n.id)
                .map_or(0.0, |d| d.as_secs_f64() / runs as f64),
        );
    }
    report.runs = runs;
    Ok(report)
}

/// Overall speedup when a fraction `p` of the work runs `a` times faster:
/// `1 / ((1 − p) + p/a)`.
pub fn speedup(p: f64, a: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AnalysisError::Fraction(p));
    }
    if !(a > 0.0) {
        return Err(AnalysisError::Factor(a));
    }
    Ok(1.0 / ((1.0 - p) + p / a))
}

/// Limit of [`speedup`] as `a → ∞`: `1 / (1 − p)`.
pub fn amdahl_bound(p: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AnalysisError::Fraction(p));
    }
    if p == 1.0 {
        return Err(AnalysisError::Unbounded);
    }
    Ok(1.0 / (1.0 - p))
}

/// Reads `name seconds` lines; blank lines and `#` comments are skipped.
pub fn parse_profile(text: &str) -> Result<BTreeMap<String, f64>, AnalysisError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| AnalysisError::Profile {
            line: i + 1,
            detail,
        };
        let mut parts = line.split_whitespace();
        let (Some(name), Some(secs), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("expected `name seconds`, got `{line}`")));
        };
        let secs: f64 = secs
            .parse()
            .map_err(|_| bad(format!("`{secs}` is not a number")))?;
        if !(secs >= 0.0) || !secs.is_finite() {
            return Err(bad(format!("time {secs} must be finite and non-negative")));
        }
        if out.insert(name.to_string(), secs).is_some() {
            return Err(bad(format!("`{name}` listed twice")));
        }
    }
    Ok(out)
}

/// Fraction of the profiled time spent in `accelerated`, and the speedup
/// of accelerating it by `factor`.
pub fn profile_speedup(
    profile: &BTreeMap<String, f64>,
    accelerated: &[String],
    factor: f64,
) -> Result<(f64, f64), AnalysisError> {
    let total: f64 = profile.values().sum();
    let mut part = 0.0;
    for name in accelerated {
        part += profile.get(name).ok_or_else(|| AnalysisError::Profile {
            line: 0,
            detail: format!("no entry named `{name}`"),
        })?;
    }
    if !(total > 0.0) {
        return Err(AnalysisError::Profile {
            line: 0,
            detail: "total time is zero".into(),
        });
    }
    let p = (part / total).min(1.0);
    Ok((p, speedup(p, factor)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub before: u64,
    pub after: u64,
}

impl Delta {
    pub fn absolute(&self) -> i128 {
        self.after as i128 - self.before as i128
    }

    /// `(after − before) / before`, 0 when both are 0.
    pub fn relative(&self) -> f64 {
        if self.before == 0 {
            if self.after == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.absolute() as f64 / self.before as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub categories: BTreeMap<Category, Delta>,
    pub kinds: BTreeMap<OpKind, Delta>,
    pub total: Delta,
    /// Ratio of total FLOPs before to after.
    pub predicted_speedup: f64,
}

impl fmt::Display for DeltaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, name: &str, d: &Delta| {
            writeln!(
                f,
                "{name:<9} {:>14} -> {:>14} {:>+15} ({:+.2}%)",
                d.before,
                d.after,
                d.absolute(),
                100.0 * d.relative()
            )
        };
        for (c, d) in &self.categories {
            row(f, c.as_str(), d)?;
        }
        for (k, d) in &self.kinds {
            row(f, k.as_str(), d)?;
        }
        row(f, "total", &self.total)?;
        write!(f, "predicted speedup {:.4}", self.predicted_speedup)
    }
}

/// FLOP deltas per category and per kind.
pub fn compare(before: &CostReport, after: &CostReport) -> DeltaReport {
    let categories = Category::ALL
        .iter()
        .map(|&c| {
            (
                c,
                Delta {
                    before: before.category_flops(c),
                    after: after.category_flops(c),
                },
            )
        })
        .collect();
    let (bk, ak) = (before.by_kind(), after.by_kind());
    let kinds = bk
        .keys()
        .chain(ak.keys())
        .map(|&k| {
            (
                k,
                Delta {
                    before: bk.get(&k).copied().unwrap_or(0),
                    after: ak.get(&k).copied().unwrap_or(0),
                },
            )
        })
        .collect();
    let total = Delta {
        before: before.total_flops(),
        after: after.total_flops(),
    };
    let predicted_speedup = if total.after == 0 {
        if total.before == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        total.before as f64 / total.after as f64
    };
    DeltaReport {
        categories,
        kinds,
        total,
        predicted_speedup,
    }
}
