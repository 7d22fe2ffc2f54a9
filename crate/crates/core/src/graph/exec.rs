use std::collections::HashMap;
use std::time::{Duration, Instant};

use super::{Graph, GraphError, Node, Op, Result, BIAS, WEIGHT};
use crate::tensor::{self, Tensor};

/// Runs the graph on `x` in the default topological order.
///
/// The batch extent of `x` may differ from the nominal input shape; the
/// per-sample extents must match. Batch norm always runs in inference mode.
pub fn execute(g: &Graph, x: &Tensor) -> Result<Tensor> {
    let table = g.validate()?;
    run(g, x, &table.order, false, None).map(|(y, _)| y)
}

/// Runs the graph with a caller-supplied schedule, which must be a valid
/// topological order of all nodes.
pub fn execute_with_order(g: &Graph, x: &Tensor, order: &[String]) -> Result<Tensor> {
    g.validate()?;
    check_order(g, order)?;
    run(g, x, order, false, None).map(|(y, _)| y)
}

/// Runs the graph and returns the output of every node.
pub fn execute_trace(g: &Graph, x: &Tensor) -> Result<HashMap<String, Tensor>> {
    let table = g.validate()?;
    run(g, x, &table.order, true, None).map(|(_, all)| all)
}

/// Runs the graph and reports the wall time of every node, in schedule
/// order.
pub fn execute_timed(g: &Graph, x: &Tensor) -> Result<(Tensor, Vec<(String, Duration)>)> {
    let table = g.validate()?;
    let mut times = Vec::with_capacity(table.order.len());
    let y = run(g, x, &table.order, false, Some(&mut times))?.0;
    Ok((y, times))
}

/// Sets the running mean and variance of every batch norm to the statistics
/// of its input over `x` (biased variance, per channel over n, h, w).
///
/// Batch norms are calibrated in topological order, so each one sees
/// activations already normalized by the calibrated layers before it. This
/// puts an untrained network in the state a trained one would be in, with
/// activations of order one throughout.
pub fn calibrate_bn(g: &mut Graph, x: &Tensor) -> Result<()> {
    let order = g.validate()?.order;
    let mut values: HashMap<String, Tensor> = HashMap::new();
    for id in &order {
        let node = g.get(id)?;
        if let Op::Bn { .. } = node.op {
            let input = &values[&node.inputs[0]];
            let (mean, var) = channel_stats(input);
            let mut p = node.bn_params()?;
            let c = p.channels();
            p.mean = Tensor::from_f64(crate::tensor::Shape::vector(c), g.dtype(), &mean).map_err(
                |source| GraphError::Kernel {
                    node: id.clone(),
                    source,
                },
            )?;
            p.var = Tensor::from_f64(crate::tensor::Shape::vector(c), g.dtype(), &var).map_err(
                |source| GraphError::Kernel {
                    node: id.clone(),
                    source,
                },
            )?;
            g.get_mut(id)?.set_bn_params(p);
        }
        let node = g.get(id)?;
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
        let y = eval(node, x, &args).map_err(|source| GraphError::Kernel {
            node: id.clone(),
            source,
        })?;
        values.insert(id.clone(), y);
    }
    Ok(())
}

fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let v = t.to_f64_vec();
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let chunks =
            || (0..s.n).flat_map(|n| v[(n * s.c + c) * plane..(n * s.c + c + 1) * plane].iter());
        let m = chunks().sum::<f64>() / count;
        mean[c] = m;
        var[c] = chunks().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
    }
    (mean, var)
}

fn check_order(g: &Graph, order: &[String]) -> Result<()> {
    if order.len() != g.len() {
        return Err(GraphError::InvalidOrder(format!(
            "{} entries for {} nodes",
            order.len(),
            g.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for id in order {
        let node = g.get(id)?;
        for i in &node.inputs {
            if !seen.contains(i.as_str()) {
                return Err(GraphError::InvalidOrder(format!(
                    "`{id}` scheduled before its input `{i}`"
                )));
            }
        }
        if !seen.insert(id.as_str()) {
            return Err(GraphError::InvalidOrder(format!("`{id}` scheduled twice")));
        }
    }
    Ok(())
}

fn run(
    g: &Graph,
    x: &Tensor,
    order: &[String],
    keep_all: bool,
    mut times: Option<&mut Vec<(String, Duration)>>,
) -> Result<(Tensor, HashMap<String, Tensor>)> {
    let expected = g.input_shape();
    let found = x.shape();
    if (found.c, found.h, found.w) != (expected.c, expected.h, expected.w) || found.n == 0 {
        return Err(GraphError::InputShape { expected, found });
    }
    if x.dtype() != g.dtype() {
        return Err(GraphError::Kernel {
            node: g.input_id().unwrap_or("input").to_string(),
            source: tensor::TensorError::DTypeMismatch {
                expected: g.dtype(),
                found: x.dtype(),
            },
        });
    }

    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for n in g.nodes() {
        for i in &n.inputs {
            *remaining.entry(i.as_str()).or_default() += 1;
        }
    }
    let mut values: HashMap<String, Tensor> = HashMap::new();
    let mut all = HashMap::new();
    let mut output = None;
    for id in order {
        let node = g.get(id)?;
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
        let start = Instant::now();
        let y = eval(node, x, &args).map_err(|source| GraphError::Kernel {
            node: id.clone(),
            source,
        })?;
        if let Some(t) = times.as_deref_mut() {
            t.push((id.clone(), start.elapsed()));
        }
        if matches!(node.op, Op::Output) {
            output = Some(y.clone());
        }
        for i in &node.inputs {
            let left = remaining.get_mut(i.as_str()).unwrap();
            *left -= 1;
            if *left == 0 && !keep_all {
                values.remove(i);
            }
        }
        if keep_all {
            all.insert(id.clone(), y.clone());
        }
        values.insert(id.clone(), y);
    }
    let output = output.ok_or(GraphError::OutputCount(0))?;
    Ok((output, all))
}

fn eval(node: &Node, x: &Tensor, args: &[&Tensor]) -> tensor::Result<Tensor> {
    let param = |name: &str| {
        node.params.get(name).ok_or_else(|| {
            tensor::TensorError::InvalidArgument(format!("missing parameter `{name}`"))
        })
    };
    match &node.op {
        Op::Input => Ok(x.clone()),
        Op::Output => Ok(args[0].clone()),
        Op::Conv(spec) => {
            let bias = if spec.bias { Some(param(BIAS)?) } else { None };
            tensor::conv2d(args[0], param(WEIGHT)?, bias, spec)
        }
        Op::Bn { .. } => {
            let p = node
                .bn_params()
                .map_err(|e| tensor::TensorError::InvalidArgument(e.to_string()))?;
            tensor::batch_norm_inference(args[0], &p)
        }
        Op::Relu => tensor::relu(args[0]),
        Op::Add => tensor::elementwise_add(args[0], args[1]),
        Op::Concat => tensor::concat_channels(args),
        Op::MaxPool(p) => tensor::max_pool(args[0], p),
        Op::GAvgPool => tensor::global_avg_pool(args[0]),
        Op::Fc { bias, .. } => {
            let b = if *bias { Some(param(BIAS)?) } else { None };
            tensor::fully_connected(args[0], param(WEIGHT)?, b)
        }
    }
}
