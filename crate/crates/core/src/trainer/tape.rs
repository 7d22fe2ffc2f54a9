//! Training-mode forward pass with a reverse sweep over the same schedule.

use std::collections::{BTreeMap, HashMap};

use crate::graph::{Graph, Node, Op, BETA, BIAS, GAMMA, MEAN, VAR, WEIGHT};
use crate::tensor::{
    conv2d_raw, max_pool_raw, valid_range, with_dtype, ConvSpec, Element, Shape, Tensor,
};

use super::TrainError;

/// Loss, parameter gradients keyed `node/param`, and the gradient with
/// respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub input_grad: Tensor,
    /// Training-mode network output.
    pub logits: Tensor,
    /// Batch mean and biased variance seen by each batch norm.
    pub batch_stats: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub fn param_key(node: &str, param: &str) -> String {
    format!("{node}/{param}")
}

struct Act<T> {
    shape: Shape,
    data: Vec<T>,
}

enum Cache<T> {
    None,
    Bn {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        frozen: Vec<bool>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Pool(Vec<usize>),
}

fn param<'a, T: Element>(node: &'a Node, name: &str) -> Result<&'a [T], TrainError> {
    Ok(node.param(name)?.as_slice::<T>()?)
}

/// Softmax cross-entropy averaged over the batch, and its gradient.
fn softmax_xent<T: Element>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<T>), TrainError> {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    let inv_n = T::one() / T::of(n as f64);
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TrainError::Label { label, classes });
        }
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss += (sum.ln() - (row[label] - max)).to_f64().unwrap();
        for k in 0..classes {
            let p = exps[k] / sum;
            let t = if k == label { T::one() } else { T::zero() };
            grad[s * classes + k] = (p - t) * inv_n;
        }
    }
    Ok((loss / n as f64, grad))
}

fn im2col<T: Element>(x: &[T], xs: Shape, spec: &ConvSpec, out: Shape, cols: &mut [T]) {
    let (r, s) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let p_len = out.h * out.w;
    cols.fill(T::zero());
    for t in 0..spec.channels {
        let plane = &x[t * xs.h * xs.w..][..xs.h * xs.w];
        for i in 0..r {
            let (oh_lo, oh_hi) = valid_range(out.h, xs.h, i, sh, ph);
            for j in 0..s {
                let q = (t * r + i) * s + j;
                let (ow_lo, ow_hi) = valid_range(out.w, xs.w, j, sw, pw);
                let dst = &mut cols[q * p_len..][..p_len];
                for oh in oh_lo..oh_hi {
                    let row = &plane[(sh * oh + i - ph) * xs.w..][..xs.w];
                    for ow in ow_lo..ow_hi {
                        dst[oh * out.w + ow] = row[sw * ow + j - pw];
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], xs: Shape, spec: &ConvSpec, out: Shape, dx: &mut [T]) {
    let (r, s) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let p_len = out.h * out.w;
    for t in 0..spec.channels {
        let plane = &mut dx[t * xs.h * xs.w..][..xs.h * xs.w];
        for i in 0..r {
            let (oh_lo, oh_hi) = valid_range(out.h, xs.h, i, sh, ph);
            for j in 0..s {
                let q = (t * r + i) * s + j;
                let (ow_lo, ow_hi) = valid_range(out.w, xs.w, j, sw, pw);
                let src = &cols[q * p_len..][..p_len];
                for oh in oh_lo..oh_hi {
                    let base = (sh * oh + i - ph) * xs.w;
                    for ow in ow_lo..ow_hi {
                        let idx = base + sw * ow + j - pw;
                        plane[idx] = plane[idx] + src[oh * out.w + ow];
                    }
                }
            }
        }
    }
}

struct ConvGrads<T> {
    dw: Vec<T>,
    db: Vec<T>,
    dx: Vec<T>,
}

fn conv_backward<T: Element>(
    x: &[T],
    xs: Shape,
    w: &[T],
    spec: &ConvSpec,
    out: Shape,
    dy: &[T],
) -> ConvGrads<T> {
    let q_len = spec.channels * spec.kernel.0 * spec.kernel.1;
    let p_len = out.h * out.w;
    let k_len = spec.filters;
    let sample = xs.sample_len();
    let mut g = ConvGrads {
        dw: vec![T::zero(); k_len * q_len],
        db: vec![T::zero(); k_len],
        dx: vec![T::zero(); x.len()],
    };
    let mut cols = vec![T::zero(); q_len * p_len];
    let mut dcols = vec![T::zero(); q_len * p_len];
    for n in 0..xs.n {
        im2col(&x[n * sample..][..sample], xs, spec, out, &mut cols);
        dcols.fill(T::zero());
        let dyn_ = &dy[n * k_len * p_len..][..k_len * p_len];
        for k in 0..k_len {
            let dyk = &dyn_[k * p_len..][..p_len];
            g.db[k] = g.db[k] + dyk.iter().copied().fold(T::zero(), |a, v| a + v);
            let wk = &w[k * q_len..][..q_len];
            let dwk = &mut g.dw[k * q_len..][..q_len];
            for q in 0..q_len {
                let col = &cols[q * p_len..][..p_len];
                dwk[q] = dwk[q] + col.iter().zip(dyk).fold(T::zero(), |a, (&c, &d)| a + c * d);
                let wv = wk[q];
                if wv != T::zero() {
                    for (dc, &d) in dcols[q * p_len..][..p_len].iter_mut().zip(dyk) {
                        *dc = *dc + wv * d;
                    }
                }
            }
        }
        col2im(&dcols, xs, spec, out, &mut g.dx[n * sample..][..sample]);
    }
    g
}

fn accumulate<T: Element>(grads: &mut HashMap<String, Vec<T>>, id: &str, g: Vec<T>) {
    match grads.get_mut(id) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => {
            grads.insert(id.to_string(), g);
        }
    }
}

pub(super) fn run<T: Element>(
    g: &Graph,
    x: &Tensor,
    labels: &[usize],
    backward: bool,
) -> Result<Backward, TrainError> {
    let table = g.validate()?;
    let xs = x.shape();
    let nominal = g.input_shape();
    if (xs.c, xs.h, xs.w) != (nominal.c, nominal.h, nominal.w) || xs.n != labels.len() || xs.n == 0
    {
        return Err(TrainError::Shape(format!(
            "batch {xs} with {} labels for a graph taking {nominal}",
            labels.len()
        )));
    }
    let order = &table.order;
    let mut acts: HashMap<&str, Act<T>> = HashMap::new();
    let mut caches: HashMap<&str, Cache<T>> = HashMap::new();
    let mut out_id = None;

    for id in order {
        let node = g.get(id)?;
        let shape = table.shapes[id];
        let out_shape = Shape { n: xs.n, ..shape };
        let arg = |i: usize| &acts[node.inputs[i].as_str()];
        let (data, cache) = match &node.op {
            Op::Input => (x.as_slice::<T>()?.to_vec(), Cache::None),
            Op::Output => {
                out_id = Some(id.as_str());
                (arg(0).data.clone(), Cache::None)
            }
            Op::Conv(spec) => {
                let a = arg(0);
                let b = if spec.bias {
                    Some(param::<T>(node, BIAS)?)
                } else {
                    None
                };
                (
                    conv2d_raw(
                        &a.data,
                        a.shape,
                        param::<T>(node, WEIGHT)?,
                        b,
                        spec,
                        out_shape,
                    ),
                    Cache::None,
                )
            }
            Op::Bn { eps, .. } => {
                let a = arg(0);
                let s = a.shape;
                let plane = s.plane();
                let count = T::of((s.n * plane) as f64);
                let eps = T::of(*eps);
                let gamma = param::<T>(node, GAMMA)?;
                let beta = param::<T>(node, BETA)?;
                let rmean = param::<T>(node, MEAN)?;
                let rvar = param::<T>(node, VAR)?;
                let frozen = node.frozen_channels(s.c);
                let mut mean = vec![T::zero(); s.c];
                let mut var = vec![T::zero(); s.c];
                let mut inv_std = vec![T::zero(); s.c];
                let mut xhat = vec![T::zero(); a.data.len()];
                let mut y = vec![T::zero(); a.data.len()];
                for c in 0..s.c {
                    let planes = || (0..s.n).map(move |n| (n * s.c + c) * plane);
                    let (m, v) = if frozen[c] {
                        (rmean[c], rvar[c])
                    } else {
                        let m = planes()
                            .flat_map(|o| a.data[o..o + plane].iter().copied())
                            .fold(T::zero(), |acc, v| acc + v)
                            / count;
                        let v = planes()
                            .flat_map(|o| a.data[o..o + plane].iter().copied())
                            .fold(T::zero(), |acc, v| acc + (v - m) * (v - m))
                            / count;
                        (m, v)
                    };
                    mean[c] = m;
                    var[c] = v;
                    let is = T::one() / (v + eps).sqrt();
                    inv_std[c] = is;
                    for o in planes() {
                        for i in o..o + plane {
                            let h = (a.data[i] - m) * is;
                            xhat[i] = h;
                            y[i] = gamma[c] * h + beta[c];
                        }
                    }
                }
                (
                    y,
                    Cache::Bn {
                        xhat,
                        inv_std,
                        frozen,
                        mean,
                        var,
                    },
                )
            }
            Op::Relu => (
                arg(0)
                    .data
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect(),
                Cache::None,
            ),
            Op::Add => {
                let (a, b) = (arg(0), arg(1));
                (
                    a.data.iter().zip(&b.data).map(|(&p, &q)| p + q).collect(),
                    Cache::None,
                )
            }
            Op::Concat => {
                let mut y = Vec::with_capacity(out_shape.len());
                for n in 0..xs.n {
                    for i in 0..node.inputs.len() {
                        let a = arg(i);
                        let len = a.shape.sample_len();
                        y.extend_from_slice(&a.data[n * len..(n + 1) * len]);
                    }
                }
                (y, Cache::None)
            }
            Op::MaxPool(p) => {
                let a = arg(0);
                let (y, idx) = max_pool_raw(&a.data, a.shape, p, out_shape);
                (y, Cache::Pool(idx))
            }
            Op::GAvgPool => {
                let a = arg(0);
                let plane = a.shape.plane();
                let denom = T::of(plane as f64);
                (
                    a.data
                        .chunks_exact(plane)
                        .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) / denom)
                        .collect(),
                    Cache::None,
                )
            }
            Op::Fc {
                inputs,
                outputs,
                bias,
            } => {
                let a = arg(0);
                let w = param::<T>(node, WEIGHT)?;
                let b = if *bias {
                    Some(param::<T>(node, BIAS)?)
                } else {
                    None
                };
                let mut y = Vec::with_capacity(xs.n * outputs);
                for n in 0..xs.n {
                    let row = &a.data[n * inputs..(n + 1) * inputs];
                    for o in 0..*outputs {
                        let wr = &w[o * inputs..(o + 1) * inputs];
                        let mut acc = row.iter().zip(wr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        if let Some(b) = b {
                            acc = acc + b[o];
                        }
                        y.push(acc);
                    }
                }
                (y, Cache::None)
            }
        };
        acts.insert(
            id.as_str(),
            Act {
                shape: out_shape,
                data,
            },
        );
        caches.insert(id.as_str(), cache);
    }

    let out_id = out_id.ok_or_else(|| TrainError::Shape("graph has no output".into()))?;
    let logits = &acts[out_id];
    let classes = logits.shape.sample_len();
    let (loss, dlogits) = softmax_xent(&logits.data, classes, labels)?;

    let mut batch_stats = BTreeMap::new();
    for (id, cache) in &caches {
        if let Cache::Bn { mean, var, .. } = cache {
            let f = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>();
            batch_stats.insert(id.to_string(), (f(mean), f(var)));
        }
    }
    let input_id = g.input_id().unwrap_or("input").to_string();
    let logits = Tensor::from_vec(logits.shape, logits.data.clone())?;
    if !backward {
        return Ok(Backward {
            loss,
            grads: BTreeMap::new(),
            input_grad: Tensor::zeros(xs, x.dtype()),
            logits,
            batch_stats,
        });
    }

    let mut dgrads: HashMap<String, Vec<T>> = HashMap::new();
    dgrads.insert(out_id.to_string(), dlogits);
    let mut pgrads: BTreeMap<String, Tensor> = BTreeMap::new();
    for id in order.iter().rev() {
        let Some(dy) = dgrads.remove(id.as_str()) else {
            continue;
        };
        let node = g.get(id)?;
        let act = &acts[id.as_str()];
        let input = |i: usize| &acts[node.inputs[i].as_str()];
        match &node.op {
            Op::Input => {
                dgrads.insert(id.clone(), dy);
            }
            Op::Output | Op::Add => {
                for i in 0..node.inputs.len() {
                    accumulate(&mut dgrads, &node.inputs[i], dy.clone());
                }
            }
            Op::Conv(spec) => {
                let a = input(0);
                let cg = conv_backward(
                    &a.data,
                    a.shape,
                    param::<T>(node, WEIGHT)?,
                    spec,
                    act.shape,
                    &dy,
                );
                pgrads.insert(
                    param_key(id, WEIGHT),
                    Tensor::from_vec(spec.weight_shape(), cg.dw)?,
                );
                if spec.bias {
                    pgrads.insert(
                        param_key(id, BIAS),
                        Tensor::from_vec(Shape::vector(spec.filters), cg.db)?,
                    );
                }
                accumulate(&mut dgrads, &node.inputs[0], cg.dx);
            }
            Op::Bn { .. } => {
                let Cache::Bn {
                    xhat,
                    inv_std,
                    frozen,
                    ..
                } = &caches[id.as_str()]
                else {
                    unreachable!()
                };
                let s = act.shape;
                let plane = s.plane();
                let count = T::of((s.n * plane) as f64);
                let gamma = param::<T>(node, GAMMA)?;
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                let mut dx = vec![T::zero(); dy.len()];
                for c in 0..s.c {
                    let planes = || (0..s.n).map(move |n| (n * s.c + c) * plane);
                    let (mut sg, mut sb) = (T::zero(), T::zero());
                    for o in planes() {
                        for i in o..o + plane {
                            sb = sb + dy[i];
                            sg = sg + dy[i] * xhat[i];
                        }
                    }
                    let k = gamma[c] * inv_std[c];
                    if frozen[c] {
                        for o in planes() {
                            for i in o..o + plane {
                                dx[i] = k * dy[i];
                            }
                        }
                        continue;
                    }
                    dgamma[c] = sg;
                    dbeta[c] = sb;
                    for o in planes() {
                        for i in o..o + plane {
                            dx[i] = k / count * (count * dy[i] - sb - xhat[i] * sg);
                        }
                    }
                }
                pgrads.insert(
                    param_key(id, GAMMA),
                    Tensor::from_vec(Shape::vector(s.c), dgamma)?,
                );
                pgrads.insert(
                    param_key(id, BETA),
                    Tensor::from_vec(Shape::vector(s.c), dbeta)?,
                );
                accumulate(&mut dgrads, &node.inputs[0], dx);
            }
            Op::Relu => {
                let a = input(0);
                let dx = a
                    .data
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(&mut dgrads, &node.inputs[0], dx);
            }
            Op::Concat => {
                let total = act.shape.sample_len();
                let mut off = 0;
                for i in 0..node.inputs.len() {
                    let a = input(i);
                    let len = a.shape.sample_len();
                    let mut dx = Vec::with_capacity(a.data.len());
                    for n in 0..act.shape.n {
                        dx.extend_from_slice(&dy[n * total + off..][..len]);
                    }
                    off += len;
                    accumulate(&mut dgrads, &node.inputs[i], dx);
                }
            }
            Op::MaxPool(_) => {
                let Cache::Pool(idx) = &caches[id.as_str()] else {
                    unreachable!()
                };
                let mut dx = vec![T::zero(); input(0).data.len()];
                for (&i, &d) in idx.iter().zip(&dy) {
                    dx[i] = dx[i] + d;
                }
                accumulate(&mut dgrads, &node.inputs[0], dx);
            }
            Op::GAvgPool => {
                let a = input(0);
                let plane = a.shape.plane();
                let denom = T::of(plane as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d / denom, plane))
                    .collect();
                accumulate(&mut dgrads, &node.inputs[0], dx);
            }
            Op::Fc {
                inputs,
                outputs,
                bias,
            } => {
                let a = input(0);
                let w = param::<T>(node, WEIGHT)?;
                let (fi, fo) = (*inputs, *outputs);
                let mut dw = vec![T::zero(); fo * fi];
                let mut db = vec![T::zero(); fo];
                let mut dx = vec![T::zero(); a.data.len()];
                for n in 0..act.shape.n {
                    let row = &a.data[n * fi..(n + 1) * fi];
                    let dxr = &mut dx[n * fi..(n + 1) * fi];
                    for o in 0..fo {
                        let d = dy[n * fo + o];
                        db[o] = db[o] + d;
                        let wr = &w[o * fi..(o + 1) * fi];
                        let dwr = &mut dw[o * fi..(o + 1) * fi];
                        for f in 0..fi {
                            dwr[f] = dwr[f] + d * row[f];
                            dxr[f] = dxr[f] + d * wr[f];
                        }
                    }
                }
                pgrads.insert(
                    param_key(id, WEIGHT),
                    Tensor::from_vec(Shape::new(fo, fi, 1, 1), dw)?,
                );
                if *bias {
                    pgrads.insert(
                        param_key(id, BIAS),
                        Tensor::from_vec(Shape::vector(fo), db)?,
                    );
                }
                accumulate(&mut dgrads, &node.inputs[0], dx);
            }
        }
    }
    let input_grad = match dgrads.remove(&input_id) {
        Some(d) => Tensor::from_vec(xs, d)?,
        None => Tensor::zeros(xs, x.dtype()),
    };
    Ok(Backward {
        loss,
        grads: pgrads,
        input_grad,
        logits,
        batch_stats,
    })
}

pub(super) fn dispatch(
    g: &Graph,
    x: &Tensor,
    labels: &[usize],
    backward: bool,
) -> Result<Backward, TrainError> {
    if x.dtype() != g.dtype() {
        return Err(TrainError::Shape(format!(
            "batch is {}, graph is {}",
            x.dtype().name(),
            g.dtype().name()
        )));
    }
    with_dtype!(g.dtype(), T => run::<T>(g, x, labels, backward))
}
