use std::collections::BTreeMap;

use crate::graph::{Graph, Node, Op, OpKind, BIAS, WEIGHT};
use crate::tensor::{with_dtype, BnParams, ConvSpec, Element, Shape, Tensor};

use super::pattern::{
    find_residual_blocks, is_provably_nonneg, parse_block_tag, BlockKind, BlockMatch,
};
use super::report::{FusedBlock, FusedConv, FusionOption, FusionReport, Provenance, SkippedBlock};
use super::weights::{check_omega, make_identity_weights, pad_conv_weights, unit_variance};
use super::FusionError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuseOptions {
    /// Treat the graph input as non-negative (e.g. images in `[0, 1]`).
    pub assume_nonneg: bool,
    /// Leave blocks whose BN scale fails the `OMEGA_MIN` guard unfused and
    /// list them in the report instead of failing the whole pass.
    pub skip_ill_conditioned: bool,
}

/// Everything a block rewrite writes back, computed before the graph is
/// touched so that a failing block leaves it intact.
struct Plan {
    conv1_weight: Tensor,
    conv1_bias: Option<Tensor>,
    conv1_spec: ConvSpec,
    bn1: Option<(BnParams, Vec<bool>)>,
    conv2_weight: Tensor,
    conv2_bias: Option<Tensor>,
    conv2_spec: ConvSpec,
}

fn mismatch(m: &BlockMatch, detail: impl Into<String>) -> FusionError {
    FusionError::PatternMismatch {
        block: m.name().to_string(),
        detail: detail.into(),
    }
}

fn conv_of<'a>(g: &'a Graph, id: &str) -> Result<(&'a Node, ConvSpec), FusionError> {
    let node = g.get(id)?;
    let spec = *node
        .conv_spec()
        .ok_or_else(|| FusionError::PatternMismatch {
            block: id.to_string(),
            detail: "expected a convolution".into(),
        })?;
    Ok((node, spec))
}

fn bn_of(g: &Graph, id: Option<&String>) -> Result<Option<BnParams>, FusionError> {
    match id {
        Some(id) => Ok(Some(g.get(id)?.bn_params()?)),
        None => Ok(None),
    }
}

fn check_kernels(m: &BlockMatch, c1: &ConvSpec, c2: &ConvSpec) -> Result<(), FusionError> {
    for (id, spec) in [(&m.conv1, c1), (&m.conv2, c2)] {
        let (r, s) = spec.kernel;
        if r % 2 == 0 || s % 2 == 0 || c1.kernel != c2.kernel {
            return Err(FusionError::NonOddKernel {
                node: id.clone(),
                kernel: spec.kernel,
            });
        }
        if !spec.is_same_padded() {
            return Err(mismatch(
                m,
                format!(
                    "`{id}` padding {:?} is not centred for kernel {:?}",
                    spec.pad, spec.kernel
                ),
            ));
        }
    }
    if c2.stride != (1, 1) {
        return Err(mismatch(
            m,
            format!(
                "`{}` has stride {:?}; the second convolution must be stride 1",
                m.conv2, c2.stride
            ),
        ));
    }
    Ok(())
}

fn plan_block<T: Element>(g: &Graph, m: &BlockMatch) -> Result<Plan, FusionError> {
    let (n1, c1) = conv_of(g, &m.conv1)?;
    let (n2, c2) = conv_of(g, &m.conv2)?;
    check_kernels(m, &c1, &c2)?;
    let channels = c1.channels;
    let (r, s) = c2.kernel;

    // Shortcut as weights over the block input plus a per-filter bias.
    let (short_w, short_b): (Vec<T>, Option<Vec<T>>) = match m.kind {
        BlockKind::Basic => {
            if c1.stride != (1, 1) {
                return Err(FusionError::StrideMismatch {
                    block: m.name().to_string(),
                    conv1: c1.stride,
                    shortcut: (1, 1),
                });
            }
            if c2.filters != channels {
                return Err(mismatch(
                    m,
                    format!(
                        "identity shortcut carries {channels} channels into {} filters",
                        c2.filters
                    ),
                ));
            }
            let w = make_identity_weights(channels, r, s, g.dtype())?;
            (w.as_slice::<T>()?.to_vec(), None)
        }
        BlockKind::Projection => {
            let sc_id = m
                .shortcut_conv
                .as_ref()
                .ok_or_else(|| mismatch(m, "projection block without shortcut conv"))?;
            let (sn, sspec) = conv_of(g, sc_id)?;
            if sspec.stride != c1.stride {
                return Err(FusionError::StrideMismatch {
                    block: m.name().to_string(),
                    conv1: c1.stride,
                    shortcut: sspec.stride,
                });
            }
            if sspec.kernel != (1, 1) || sspec.pad != (0, 0) {
                return Err(mismatch(
                    m,
                    format!("shortcut `{sc_id}` is not a 1x1 convolution without padding"),
                ));
            }
            if sspec.filters != c2.filters || sspec.channels != channels {
                return Err(mismatch(
                    m,
                    "shortcut and main path disagree on channel counts",
                ));
            }
            let mut w = sn.param(WEIGHT)?.as_slice::<T>()?.to_vec();
            let mut b = match sn.params.get(BIAS) {
                Some(b) if sspec.bias => b.as_slice::<T>()?.to_vec(),
                _ => vec![T::zero(); sspec.filters],
            };
            if let Some(p) = bn_of(g, m.shortcut_bn.as_ref())? {
                let (om, la) = p.omega_lambda::<T>()?;
                let per = sspec.channels;
                for (i, v) in w.iter_mut().enumerate() {
                    *v = *v * om[i / per];
                }
                for k in 0..b.len() {
                    b[k] = om[k] * b[k] + la[k];
                }
            }
            let wt = Tensor::from_vec(Shape::new(sspec.filters, sspec.channels, 1, 1), w)?;
            let padded = pad_conv_weights(&wt, r, s)?;
            let bias = b.iter().any(|v| *v != T::zero()).then_some(b);
            (padded.as_slice::<T>()?.to_vec(), bias)
        }
    };

    // Inverse BN adjustment so bn2 hands the shortcut through unscaled.
    let bn2 = bn_of(g, m.bn2.as_ref())?;
    let omega2: Option<Vec<T>> = match &bn2 {
        Some(p) => {
            let (om, _) = p.omega_lambda::<T>()?;
            check_omega(&om, m.bn2.as_deref().unwrap_or_default())?;
            Some(om)
        }
        None => None,
    };
    let per_filter = channels * r * s;
    let mut short_w = short_w;
    let mut short_b = short_b;
    if let Some(om) = &omega2 {
        for (i, v) in short_w.iter_mut().enumerate() {
            *v = *v / om[i / per_filter];
        }
        if let Some(b) = &mut short_b {
            for (k, v) in b.iter_mut().enumerate() {
                *v = *v / om[k];
            }
        }
    }

    // conv1: original filters, then `channels` passthrough filters.
    let ident = make_identity_weights(channels, c1.kernel.0, c1.kernel.1, g.dtype())?;
    let w1 = n1.param(WEIGHT)?;
    let conv1_weight = Tensor::concat_axis0(&[w1, &ident])?;
    let conv1_bias = match n1.params.get(BIAS) {
        Some(b) if c1.bias => {
            let mut v = b.as_slice::<T>()?.to_vec();
            v.resize(c1.filters + channels, T::zero());
            Some(Tensor::from_vec(Shape::vector(v.len()), v)?)
        }
        _ => None,
    };
    let mut conv1_spec = c1;
    conv1_spec.filters = c1.filters + channels;

    let bn1 = match &m.bn1 {
        Some(id) => {
            let node = g.get(id)?;
            let p = node.bn_params()?;
            let mut frozen = node.frozen_channels(p.channels());
            frozen.resize(p.channels(), false);
            frozen.extend(std::iter::repeat_n(true, channels));
            let ext = |t: &Tensor, v: T| -> Result<Tensor, FusionError> {
                let mut d = t.as_slice::<T>()?.to_vec();
                d.resize(d.len() + channels, v);
                Ok(Tensor::from_vec(Shape::vector(d.len()), d)?)
            };
            let var1 = unit_variance::<T>(p.eps)?;
            let ext_p = BnParams {
                gamma: ext(&p.gamma, T::one())?,
                beta: ext(&p.beta, T::zero())?,
                mean: ext(&p.mean, T::zero())?,
                var: ext(&p.var, var1)?,
                eps: p.eps,
            };
            Some((ext_p, frozen))
        }
        None => None,
    };

    // conv2: every filter gains `channels` extra input channels.
    let w2 = n2.param(WEIGHT)?.as_slice::<T>()?;
    let old_per = c2.channels * r * s;
    let mut conv2_data = Vec::with_capacity(c2.filters * (old_per + per_filter));
    for k in 0..c2.filters {
        conv2_data.extend_from_slice(&w2[k * old_per..(k + 1) * old_per]);
        conv2_data.extend_from_slice(&short_w[k * per_filter..(k + 1) * per_filter]);
    }
    let mut conv2_spec = c2;
    conv2_spec.channels = c2.channels + channels;
    let conv2_weight = Tensor::from_vec(conv2_spec.weight_shape(), conv2_data)?;
    let old_b2 = match n2.params.get(BIAS) {
        Some(b) if c2.bias => Some(b.as_slice::<T>()?.to_vec()),
        _ => None,
    };
    let conv2_bias = match (old_b2, short_b) {
        (None, None) => None,
        (Some(b), None) => Some(b),
        (None, Some(sb)) => Some(sb),
        (Some(b), Some(sb)) => Some(b.iter().zip(&sb).map(|(&x, &y)| x + y).collect()),
    };
    let conv2_bias = match conv2_bias {
        Some(v) => {
            conv2_spec.bias = true;
            Some(Tensor::from_vec(Shape::vector(v.len()), v)?)
        }
        None => None,
    };

    Ok(Plan {
        conv1_weight,
        conv1_bias,
        conv1_spec,
        bn1,
        conv2_weight,
        conv2_bias,
        conv2_spec,
    })
}

fn set_conv(
    g: &mut Graph,
    id: &str,
    spec: ConvSpec,
    w: Tensor,
    b: Option<Tensor>,
) -> Result<(), FusionError> {
    let node = g.get_mut(id)?;
    node.op = Op::Conv(spec);
    node.params.insert(WEIGHT.into(), w);
    match b {
        Some(b) => {
            node.params.insert(BIAS.into(), b);
        }
        None => {
            node.params.remove(BIAS);
        }
    }
    Ok(())
}

fn fuse_block(
    g: &mut Graph,
    m: &BlockMatch,
    opts: FuseOptions,
) -> Result<(FusedBlock, [(String, FusedConv); 2]), FusionError> {
    if !is_provably_nonneg(g, &m.input, opts.assume_nonneg) {
        return Err(mismatch(
            m,
            format!("block input `{}` is not provably non-negative", m.input),
        ));
    }
    let plan = with_dtype!(g.dtype(), T => plan_block::<T>(g, m)?);

    let (m1, c_in) = {
        let (_, c1) = conv_of(g, &m.conv1)?;
        (c1.filters, c1.channels)
    };
    let (m2, k2) = {
        let (_, c2) = conv_of(g, &m.conv2)?;
        (c2.filters, c2.channels)
    };
    let short_prov = match m.kind {
        BlockKind::Basic => Provenance::XconvIdentity,
        BlockKind::Projection => Provenance::PconvProjection,
    };

    set_conv(
        g,
        &m.conv1,
        plan.conv1_spec,
        plan.conv1_weight,
        plan.conv1_bias,
    )?;
    if let (Some(id), Some((p, frozen))) = (&m.bn1, plan.bn1) {
        let node = g.get_mut(id)?;
        node.set_bn_params(p);
        if let Op::Bn { frozen: f, .. } = &mut node.op {
            *f = frozen;
        }
    }
    set_conv(
        g,
        &m.conv2,
        plan.conv2_spec,
        plan.conv2_weight,
        plan.conv2_bias,
    )?;

    let tail = m.main_tail().to_string();
    g.replace_uses(&m.add, &tail);
    let mut removed = vec![m.add.clone()];
    g.remove(&m.add);
    for id in [&m.shortcut_bn, &m.shortcut_conv].into_iter().flatten() {
        g.remove(id);
        removed.push(id.clone());
    }

    let tag = m.name().to_string();
    let conv1 = FusedConv {
        block: tag.clone(),
        original_filters: m1,
        fused_filters: m1 + c_in,
        filters: [
            vec![Provenance::Original; m1],
            vec![Provenance::XconvIdentity; c_in],
        ]
        .concat(),
        channels: vec![Provenance::Original; c_in],
    };
    let conv2 = FusedConv {
        block: tag.clone(),
        original_filters: m2,
        fused_filters: m2,
        filters: vec![Provenance::Original; m2],
        channels: [vec![Provenance::Original; k2], vec![short_prov; c_in]].concat(),
    };
    Ok((
        FusedBlock {
            tag,
            kind: m.kind,
            convs: vec![m.conv1.clone(), m.conv2.clone()],
            removed,
        },
        [(m.conv1.clone(), conv1), (m.conv2.clone(), conv2)],
    ))
}

fn record(report: &mut FusionReport, (block, convs): (FusedBlock, [(String, FusedConv); 2])) {
    for (id, c) in convs {
        report.convs.insert(id, c);
    }
    report.blocks.push(block);
}

/// Rewrites one identity-shortcut block in place and records it in `report`.
/// On error the graph is left as it was.
pub fn fuse_basic_block(
    g: &mut Graph,
    m: &BlockMatch,
    opts: FuseOptions,
    report: &mut FusionReport,
) -> Result<(), FusionError> {
    if m.kind != BlockKind::Basic {
        return Err(mismatch(m, "not an identity-shortcut block"));
    }
    record(report, fuse_block(g, m, opts)?);
    Ok(())
}

/// Rewrites one 1×1-projection block in place and records it in `report`.
/// On error the graph is left as it was.
pub fn fuse_projection_block(
    g: &mut Graph,
    m: &BlockMatch,
    opts: FuseOptions,
    report: &mut FusionReport,
) -> Result<(), FusionError> {
    if m.kind != BlockKind::Projection {
        return Err(mismatch(m, "not a projection-shortcut block"));
    }
    record(report, fuse_block(g, m, opts)?);
    Ok(())
}

/// Number of matched blocks per stage, indexed from stage 1.
fn blocks_per_stage(matches: &[BlockMatch]) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for m in matches {
        if let Some((i, _)) = m.tag.as_deref().and_then(parse_block_tag) {
            *counts.entry(i).or_default() += 1;
        }
    }
    let stages = counts.keys().next_back().copied().unwrap_or(0);
    (1..=stages)
        .map(|i| counts.get(&i).copied().unwrap_or(0))
        .collect()
}

/// Fuses every residual block selected by `opt`, in stage order.
///
/// The pass is atomic: on error the input graph is untouched and no partial
/// result escapes.
pub fn fuse(
    g: &Graph,
    opt: &FusionOption,
    opts: FuseOptions,
) -> Result<(Graph, FusionReport), FusionError> {
    g.validate()?;
    let matches = find_residual_blocks(g);
    opt.check(&blocks_per_stage(&matches))?;

    let mut selected: Vec<(usize, usize, &BlockMatch)> = matches
        .iter()
        .filter_map(|m| {
            let (i, j) = m.tag.as_deref().and_then(parse_block_tag)?;
            opt.selects(i, j).then_some((i, j, m))
        })
        .collect();
    selected.sort_by_key(|&(i, j, _)| (i, j));

    let mut out = g.clone();
    let mut report = FusionReport {
        option: Some(opt.to_string()),
        ..Default::default()
    };
    for (_, _, m) in selected {
        match fuse_block(&mut out, m, opts) {
            Ok(r) => record(&mut report, r),
            Err(e @ FusionError::NearZeroOmega { .. }) if opts.skip_ill_conditioned => {
                report.skipped.push(SkippedBlock {
                    tag: m.name().to_string(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    out.validate()?;
    Ok((out, report))
}

/// Folds every batch norm into the convolution feeding it.
///
/// Each BN must read a convolution that has no other reader. Filter `k`
/// becomes `ω_k·W_k` with bias `ω_k·b_k + λ_k`.
pub fn fold_bn(g: &Graph) -> Result<Graph, FusionError> {
    g.validate()?;
    let mut out = g.clone();
    let bns: Vec<String> = g
        .nodes()
        .filter(|n| n.kind() == OpKind::Bn)
        .map(|n| n.id.clone())
        .collect();
    for id in bns {
        let bn = out.get(&id)?;
        let conv_id = bn.inputs[0].clone();
        let preceded = out.node(&conv_id).is_some_and(|c| c.kind() == OpKind::Conv)
            && out.consumers(&conv_id).len() == 1;
        if !preceded {
            return Err(FusionError::BnWithoutPrecedingConv(id));
        }
        let p = bn.bn_params()?;
        let conv = out.get(&conv_id)?;
        let mut spec = *conv.conv_spec().expect("checked above");
        let (w, b) = with_dtype!(out.dtype(), T => {
            let (om, la) = p.omega_lambda::<T>()?;
            let per = spec.channels * spec.kernel.0 * spec.kernel.1;
            let w: Vec<T> = conv.param(WEIGHT)?.as_slice::<T>()?
                .iter()
                .enumerate()
                .map(|(i, &v)| om[i / per] * v)
                .collect();
            let b: Vec<T> = match conv.params.get(BIAS) {
                Some(b) if spec.bias => b.as_slice::<T>()?.iter().zip(&om).zip(&la).map(|((&b, &o), &l)| o * b + l).collect(),
                _ => la.clone(),
            };
            (Tensor::from_vec(spec.weight_shape(), w)?, Tensor::from_vec(Shape::vector(spec.filters), b)?)
        });
        spec.bias = true;
        set_conv(&mut out, &conv_id, spec, w, Some(b))?;
        out.replace_uses(&id, &conv_id);
        out.remove(&id);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::execute;
    use crate::tensor::DType;
    use crate::zoo::{build, Family, InitRule, ZooSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(shape: Shape, dtype: DType, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, dtype, &v).unwrap()
    }

    fn model(family: Family, dtype: DType, seed: u64) -> Graph {
        let mut spec = ZooSpec::new(family, seed)
            .init(InitRule::KaimingRandomBn)
            .dtype(dtype);
        if family.is_imagenet() {
            spec = spec.input(Shape::new(1, 3, 32, 32));
        }
        build(&spec).unwrap()
    }

    #[test]
    fn resnet20_shapes_after_full_fusion() {
        let g = model(Family::Resnet20, DType::F32, 1);
        let (f, rep) = fuse(&g, &"3/3".parse().unwrap(), FuseOptions::default()).unwrap();
        assert_eq!(f.count_kind(OpKind::Add), 0);
        assert_eq!(rep.blocks.len(), 9);
        assert_eq!(rep.removed_adds(), 9);

        let c1 = f.get("stage1.block1.conv1").unwrap().conv_spec().unwrap();
        assert_eq!((c1.filters, c1.channels), (32, 16));
        let c2 = f.get("stage1.block1.conv2").unwrap().conv_spec().unwrap();
        assert_eq!((c2.filters, c2.channels), (16, 32));

        let p1 = f.get("stage2.block1.conv1").unwrap().conv_spec().unwrap();
        assert_eq!((p1.filters, p1.stride), (48, (2, 2)));
        let p2 = f.get("stage2.block1.conv2").unwrap().conv_spec().unwrap();
        assert_eq!((p2.filters, p2.channels), (32, 48));
        assert!(f.node("stage2.block1.shortcut.conv").is_none());
        assert!(f.node("stage2.block1.shortcut.bn").is_none());

        for (id, c) in &rep.convs {
            assert_eq!(c.filters.len(), c.fused_filters, "{id}");
            assert_eq!(c.surplus(), c.passthrough_filters(), "{id}");
        }
        let removed: usize = rep.blocks.iter().map(|b| b.removed.len()).sum();
        assert_eq!(removed, 9 + 2 * 2);
    }

    #[test]
    fn option_selects_stages() {
        let g = model(Family::Resnet20, DType::F32, 2);
        let (f, rep) = fuse(&g, &"1/3".parse().unwrap(), FuseOptions::default()).unwrap();
        assert_eq!(rep.blocks.len(), 3);
        assert_eq!(f.count_kind(OpKind::Add), 6);

        let (f, rep) = fuse(&g, &"0/3".parse().unwrap(), FuseOptions::default()).unwrap();
        assert!(rep.is_empty());
        assert_eq!(f, g);

        let (_, rep) = fuse(&g, &"(1,0,2)".parse().unwrap(), FuseOptions::default()).unwrap();
        let tags: Vec<_> = rep.blocks.iter().map(|b| b.tag.as_str()).collect();
        assert_eq!(tags, ["stage1.block1", "stage3.block1", "stage3.block2"]);

        assert!(matches!(
            fuse(&g, &"2/4".parse().unwrap(), FuseOptions::default()),
            Err(FusionError::InvalidOption(_))
        ));
    }

    #[test]
    fn equivalence_binary32_and_binary64() {
        for (dtype, tol) in [(DType::F32, 1e-4), (DType::F64, 1e-10)] {
            for family in [Family::Resnet8Tiny, Family::Resnet20] {
                let g = model(family, dtype, 7);
                let x = input(g.input_shape(), dtype, 8);
                let y0 = execute(&g, &x).unwrap();
                let (f, _) = fuse(
                    &g,
                    &FusionOption::all(family.stages().len()),
                    FuseOptions::default(),
                )
                .unwrap();
                let y1 = execute(&f, &x).unwrap();
                let err = y0.max_abs_diff(&y1).unwrap();
                assert!(err <= tol, "{family:?} {dtype:?}: {err:e}");
            }
        }
    }

    #[test]
    fn single_block_functions_leave_graph_alone_on_error() {
        let g = model(Family::Resnet20, DType::F32, 3);
        let ms = find_residual_blocks(&g);
        let mut work = g.clone();
        let mut rep = FusionReport::default();
        assert!(
            fuse_projection_block(&mut work, &ms[0], FuseOptions::default(), &mut rep).is_err()
        );
        assert_eq!(work, g);
        fuse_basic_block(&mut work, &ms[0], FuseOptions::default(), &mut rep).unwrap();
        fuse_projection_block(&mut work, &ms[3], FuseOptions::default(), &mut rep).unwrap();
        assert_eq!(rep.blocks.len(), 2);
        work.validate().unwrap();
    }

    #[test]
    fn non_negative_input_is_required() {
        // Tiny graph whose only block reads the network input directly.
        let dt = DType::F64;
        let mut g = Graph::new("x", Shape::new(1, 2, 5, 5), dt);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = |id: &str, inp: &str| {
            let mut n = Node::conv(id, inp, ConvSpec::new(2, 2, 3, 1, 1), dt)
                .with_tag(format!("stage1.block1.{id}"));
            let v: Vec<f64> = (0..36).map(|_| rng.gen_range(-0.5..0.5)).collect();
            n.params.insert(
                WEIGHT.into(),
                Tensor::from_f64(Shape::new(2, 2, 3, 3), dt, &v).unwrap(),
            );
            n
        };
        g.add(conv("c1", "x")).unwrap();
        g.add(Node::new("r1", Op::Relu, &["c1"])).unwrap();
        g.add(conv("c2", "r1")).unwrap();
        g.add(Node::new("add", Op::Add, &["c2", "x"]).with_tag("stage1.block1.add"))
            .unwrap();
        g.add(Node::new("r2", Op::Relu, &["add"])).unwrap();
        g.add(Node::new("y", Op::Output, &["r2"])).unwrap();
        let opt: FusionOption = "1/1".parse().unwrap();
        assert!(matches!(
            fuse(&g, &opt, FuseOptions::default()),
            Err(FusionError::PatternMismatch { .. })
        ));

        let opts = FuseOptions {
            assume_nonneg: true,
            ..Default::default()
        };
        let (f, _) = fuse(&g, &opt, opts).unwrap();
        let x = input(g.input_shape(), dt, 6);
        let xpos = Tensor::from_f64(
            x.shape(),
            dt,
            &x.to_f64_vec().iter().map(|v| v.abs()).collect::<Vec<_>>(),
        )
        .unwrap();
        let d = execute(&g, &xpos)
            .unwrap()
            .max_abs_diff(&execute(&f, &xpos).unwrap())
            .unwrap();
        assert!(d < 1e-12);
        // The override is a promise: negative inputs break equivalence.
        let d = execute(&g, &x)
            .unwrap()
            .max_abs_diff(&execute(&f, &x).unwrap())
            .unwrap();
        assert!(d > 1e-6);
    }

    #[test]
    fn near_zero_scale_is_refused_or_skipped() {
        let mut g = model(Family::Resnet20, DType::F32, 4);
        let bn = g.get_mut("stage2.block2.bn2").unwrap();
        bn.param_mut(crate::graph::GAMMA)
            .unwrap()
            .as_mut_slice::<f32>()
            .unwrap()[5] = 0.0;
        let opt = FusionOption::all(3);
        let err = fuse(&g, &opt, FuseOptions::default()).unwrap_err();
        assert!(
            matches!(err, FusionError::NearZeroOmega { channel: 5, .. }),
            "{err}"
        );

        let opts = FuseOptions {
            skip_ill_conditioned: true,
            ..Default::default()
        };
        let (f, rep) = fuse(&g, &opt, opts).unwrap();
        assert_eq!(rep.skipped.len(), 1);
        assert_eq!(rep.skipped[0].tag, "stage2.block2");
        assert_eq!(f.count_kind(OpKind::Add), 1);
    }

    #[test]
    fn stride_mismatch_is_reported() {
        let mut g = model(Family::Resnet20, DType::F32, 5);
        if let Op::Conv(s) = &mut g.get_mut("stage2.block1.shortcut.conv").unwrap().op {
            s.stride = (1, 1);
        }
        let err = fuse(&g, &"(0,1,0)".parse().unwrap(), FuseOptions::default());
        // Shapes no longer line up, so validation rejects it before matching.
        assert!(err.is_err());

        let ms = find_residual_blocks(&g);
        let mut rep = FusionReport::default();
        let mut work = g.clone();
        let e =
            fuse_projection_block(&mut work, &ms[3], FuseOptions::default(), &mut rep).unwrap_err();
        assert!(matches!(e, FusionError::StrideMismatch { .. }), "{e}");
    }

    #[test]
    fn frozen_flags_mark_passthrough_channels() {
        let g = model(Family::Resnet8Tiny, DType::F32, 9);
        let (f, _) = fuse(&g, &FusionOption::all(g_stages(&g)), FuseOptions::default()).unwrap();
        let bn = f.get("stage1.block1.bn1").unwrap();
        let c = bn.bn_params().unwrap().channels();
        let frozen = bn.frozen_channels(c);
        let half = c / 2;
        assert!(frozen[..half].iter().all(|f| !f));
        assert!(frozen[half..].iter().all(|f| *f));
    }

    fn g_stages(g: &Graph) -> usize {
        blocks_per_stage(&find_residual_blocks(g)).len()
    }

    #[test]
    fn fold_bn_equivalence() {
        for family in [Family::Resnet8Tiny, Family::Resnet20] {
            let g = model(family, DType::F32, 11);
            let x = input(g.input_shape(), DType::F32, 12);
            let y0 = execute(&g, &x).unwrap();
            let folded = fold_bn(&g).unwrap();
            assert_eq!(folded.count_kind(OpKind::Bn), 0);
            assert!(y0.max_abs_diff(&execute(&folded, &x).unwrap()).unwrap() <= 1e-4);

            let (fused, _) =
                fuse(&g, &FusionOption::all(g_stages(&g)), FuseOptions::default()).unwrap();
            let ff = fold_bn(&fused).unwrap();
            assert_eq!(ff.count_kind(OpKind::Bn) + ff.count_kind(OpKind::Add), 0);
            assert!(y0.max_abs_diff(&execute(&ff, &x).unwrap()).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn fold_identity_bn_keeps_weights() {
        let g = build(&ZooSpec::new(Family::Resnet8Tiny, 3)).unwrap();
        let f = fold_bn(&g).unwrap();
        let before = g.get("stem.conv").unwrap().param(WEIGHT).unwrap();
        let after = f.get("stem.conv").unwrap().param(WEIGHT).unwrap();
        // ω = 1/√(1+ε) is not exactly one, so compare loosely.
        assert!(before.max_abs_diff(after).unwrap() < 1e-5);
    }

    #[test]
    fn fold_requires_a_preceding_conv() {
        let dt = DType::F32;
        let mut g = Graph::new("x", Shape::new(1, 2, 3, 3), dt);
        g.add(Node::bn("b", "x", 2, dt, 1e-5)).unwrap();
        g.add(Node::new("y", Op::Output, &["b"])).unwrap();
        assert!(matches!(fold_bn(&g), Err(FusionError::BnWithoutPrecedingConv(id)) if id == "b"));
    }
}
