use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::fusion::FusionReport;
use crate::graph::{Graph, Op, OpKind, BETA, BIAS, GAMMA, MEAN, VAR, WEIGHT};
use crate::tensor::with_dtype;

use super::{check_zeroized, PruneError, PruneMask};

/// What [`materialize`] did to each convolution with zeroized filters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterializeSummary {
    /// Filters physically removed, per conv.
    pub removed: BTreeMap<String, Vec<usize>>,
    /// Zero filters left in place because the conv's channels reach an add,
    /// concat or the graph output, where the channel count is pinned.
    pub retained_coupled: BTreeMap<String, Vec<usize>>,
    /// Filter count of every conv after materialization.
    pub filters: BTreeMap<String, usize>,
}

/// Nodes that carry a conv's channels unchanged, and the readers that end
/// the walk.
struct Reach {
    passthrough: Vec<String>,
    readers: Vec<String>,
    coupled: bool,
}

fn reach(g: &Graph, conv: &str) -> Reach {
    let mut r = Reach {
        passthrough: Vec::new(),
        readers: Vec::new(),
        coupled: false,
    };
    let mut stack = vec![conv.to_string()];
    let mut seen = BTreeSet::new();
    while let Some(id) = stack.pop() {
        for c in g.consumers(&id) {
            if !seen.insert(c.to_string()) {
                continue;
            }
            match g.node(c).map(|n| n.kind()) {
                Some(OpKind::Bn | OpKind::Relu | OpKind::MaxPool | OpKind::GAvgPool) => {
                    r.passthrough.push(c.to_string());
                    stack.push(c.to_string());
                }
                Some(OpKind::Conv | OpKind::Fc) => r.readers.push(c.to_string()),
                _ => r.coupled = true,
            }
        }
    }
    r
}

/// Physically deletes the zeroized filters of `mask`.
///
/// Removing filter `k` of a conv also removes channel `k` from every batch
/// norm, relu and pool it flows through, and input channel `k` from every
/// conv or fc reading it. Convs whose channels reach an add, concat or the
/// output keep their zero filters; the summary lists them. Because the
/// removed channels were exact zeros, the result computes bit-identical
/// outputs to the masked graph.
pub fn materialize(
    g: &Graph,
    mask: &PruneMask,
    report: &FusionReport,
) -> Result<(Graph, MaterializeSummary), PruneError> {
    g.validate()?;
    for id in report.convs.keys() {
        if g.node(id).and_then(|n| n.conv_spec()).is_none() {
            return Err(PruneError::UnknownNode(id.clone()));
        }
    }
    let mut summary = MaterializeSummary::default();
    // (node, kept channel indices) for channel-wise slicing.
    let mut filter_cuts: Vec<(String, Vec<usize>)> = Vec::new();
    let mut channel_cuts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut reader_cuts: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for (id, keep) in &mask.keep {
        let bad = |detail: String| PruneError::InconsistentMask {
            node: id.clone(),
            detail,
        };
        let node = g.node(id).ok_or_else(|| bad("no such node".into()))?;
        let spec = node
            .conv_spec()
            .ok_or_else(|| bad("not a convolution".into()))?;
        if keep.len() != spec.filters {
            return Err(bad(format!(
                "{} flags for {} filters",
                keep.len(),
                spec.filters
            )));
        }
        let w = node.param(WEIGHT)?;
        let per = w.shape().sample_len();
        let nonzero = with_dtype!(w.dtype(), T => check_zeroized::<T>(w.as_slice()?, per, keep));
        if let Some(k) = nonzero {
            return Err(bad(format!("filter {k} is masked but has nonzero weights")));
        }
        if let Some(b) = node.params.get(BIAS) {
            let b = b.to_f64_vec();
            if let Some(k) = keep
                .iter()
                .enumerate()
                .position(|(k, &kept)| !kept && b[k] != 0.0)
            {
                return Err(bad(format!("filter {k} is masked but has a nonzero bias")));
            }
        }

        let dropped: Vec<usize> = (0..keep.len()).filter(|&k| !keep[k]).collect();
        if dropped.is_empty() {
            continue;
        }
        let r = reach(g, id);
        if r.coupled {
            summary.retained_coupled.insert(id.clone(), dropped);
            continue;
        }
        if dropped.len() == keep.len() {
            return Err(bad("every filter is masked; the layer would vanish".into()));
        }
        let kept: Vec<usize> = (0..keep.len()).filter(|&k| keep[k]).collect();
        for p in r.passthrough {
            channel_cuts.insert(p, kept.clone());
        }
        for reader in r.readers {
            reader_cuts.insert(reader, kept.clone());
        }
        filter_cuts.push((id.clone(), kept));
        summary.removed.insert(id.clone(), dropped);
    }

    let mut out = g.clone();
    for (id, kept) in filter_cuts {
        let node = out.get_mut(&id)?;
        let w = node.param(WEIGHT)?.select_axis0(&kept)?;
        node.params.insert(WEIGHT.into(), w);
        if let Some(b) = node.params.get(BIAS) {
            let b = b.select_axis1(&kept)?;
            node.params.insert(BIAS.into(), b);
        }
        if let Op::Conv(s) = &mut node.op {
            s.filters = kept.len();
        }
    }
    for (id, kept) in channel_cuts {
        let node = out.get_mut(&id)?;
        if let Op::Bn { frozen, .. } = &mut node.op {
            if !frozen.is_empty() {
                *frozen = kept.iter().map(|&k| frozen[k]).collect();
            }
            for name in [GAMMA, BETA, MEAN, VAR] {
                let t = node.param(name)?.select_axis1(&kept)?;
                node.params.insert(name.into(), t);
            }
        }
    }
    for (id, kept) in reader_cuts {
        let node = out.get_mut(&id)?;
        let w = node.param(WEIGHT)?.select_axis1(&kept)?;
        node.params.insert(WEIGHT.into(), w);
        match &mut node.op {
            Op::Conv(s) => s.channels = kept.len(),
            Op::Fc { inputs, .. } => *inputs = kept.len(),
            _ => {}
        }
    }
    out.validate()?;
    summary.filters = out
        .nodes()
        .filter_map(|n| n.conv_spec().map(|s| (n.id.clone(), s.filters)))
        .collect();
    Ok((out, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, FuseOptions, FusionOption};
    use crate::graph::execute;
    use crate::pruning::{soft_prune_epoch, PruneConfig};
    use crate::tensor::{DType, Shape, Tensor};
    use crate::zoo::{build, Family, InitRule, ZooSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pruned(rate: f64, seed: u64) -> (Graph, FusionReport, PruneMask) {
        let g =
            build(&ZooSpec::new(Family::Resnet20, seed).init(InitRule::KaimingRandomBn)).unwrap();
        let (mut f, rep) = fuse(&g, &FusionOption::all(3), FuseOptions::default()).unwrap();
        let cfg = if rate == 0.0 {
            PruneConfig::conservative(1)
        } else {
            PruneConfig::continued(rate, 1)
        };
        let mask = soft_prune_epoch(&mut f, &rep, &cfg).unwrap();
        (f, rep, mask)
    }

    #[test]
    fn conservative_restores_original_shapes() {
        let (masked, rep, mask) = pruned(0.0, 1);
        let (m, summary) = materialize(&masked, &mask, &rep).unwrap();
        let orig = build(&ZooSpec::new(Family::Resnet20, 1)).unwrap();
        for (id, fc) in &rep.convs {
            let s = m.get(id).unwrap().conv_spec().unwrap();
            let o = orig.get(id).unwrap().conv_spec().unwrap();
            assert_eq!(s.filters, fc.original_filters);
            assert_eq!(s.filters, o.filters);
        }
        let s = m.get("stage1.block1.conv2").unwrap().conv_spec().unwrap();
        assert_eq!(s.channels, 16);
        assert_eq!(m.count_kind(OpKind::Add), 0);
        assert!(summary.retained_coupled.is_empty());
    }

    #[test]
    fn masked_and_materialized_agree_bitwise() {
        for rate in [0.0, 0.1, 0.2, 0.3] {
            let (masked, rep, mask) = pruned(rate, 2);
            let (m, _) = materialize(&masked, &mask, &rep).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let shape = Shape::new(3, 3, 32, 32);
            let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_f64(shape, DType::F32, &v).unwrap();
            assert!(
                execute(&masked, &x)
                    .unwrap()
                    .bit_eq(&execute(&m, &x).unwrap()),
                "rate {rate}"
            );
        }
    }

    #[test]
    fn coupled_convs_keep_zero_filters() {
        let g = build(&ZooSpec::new(Family::Resnet20, 3).init(InitRule::KaimingRandomBn)).unwrap();
        let (mut f, rep) = fuse(&g, &"1/3".parse().unwrap(), FuseOptions::default()).unwrap();
        let mask = soft_prune_epoch(&mut f, &rep, &PruneConfig::continued(0.25, 1)).unwrap();
        let (m, summary) = materialize(&f, &mask, &rep).unwrap();
        // Second convs of unfused blocks feed an add.
        assert!(summary.retained_coupled.contains_key("stage2.block2.conv2"));
        assert!(summary.removed.contains_key("stage2.block2.conv1"));
        assert_eq!(
            m.get("stage2.block2.conv2")
                .unwrap()
                .conv_spec()
                .unwrap()
                .filters,
            32
        );
        assert_eq!(
            m.get("stage2.block2.conv1")
                .unwrap()
                .conv_spec()
                .unwrap()
                .filters,
            24
        );
    }

    #[test]
    fn all_keep_is_identity() {
        let (g, rep) = {
            let g = build(&ZooSpec::new(Family::Resnet8Tiny, 4)).unwrap();
            fuse(&g, &FusionOption::all(3), FuseOptions::default()).unwrap()
        };
        let (m, summary) = materialize(&g, &PruneMask::all_keep(&g), &rep).unwrap();
        assert_eq!(m, g);
        assert!(summary.removed.is_empty());
    }

    #[test]
    fn inconsistent_masks_are_rejected() {
        let (masked, rep, mut mask) = pruned(0.0, 5);
        let id = "stage1.block1.conv1";
        let k = mask.keep[id].iter().position(|&v| v).unwrap();
        mask.keep.get_mut(id).unwrap()[k] = false;
        assert!(matches!(
            materialize(&masked, &mask, &rep),
            Err(PruneError::InconsistentMask { .. })
        ));
        mask.keep.get_mut(id).unwrap().push(true);
        assert!(matches!(
            materialize(&masked, &mask, &rep),
            Err(PruneError::InconsistentMask { .. })
        ));
    }
}
