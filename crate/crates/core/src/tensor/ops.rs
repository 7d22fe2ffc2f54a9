//! Reference kernels.
//!
//! All kernels are sequential. The convolution accumulates every output
//! element in the fixed order (input channel, kernel row, kernel column),
//! starting from +0 and adding the bias last, so results are reproducible
//! bit for bit and identical to a naive nested-loop evaluation.

use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::{with_dtype, DType, Element, Result, Shape, Tensor, TensorError};

/// Configuration of a 2-D convolution: `filters × channels × kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(filters: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            filters,
            channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            pad: (pad, pad),
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.filters, self.channels, self.kernel.0, self.kernel.1)
    }

    /// Padding that keeps the spatial size at stride 1 for odd kernels.
    pub fn is_same_padded(&self) -> bool {
        self.kernel.0 % 2 == 1
            && self.kernel.1 % 2 == 1
            && self.pad == ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = window_out(h, self.kernel.0, self.stride.0, self.pad.0);
        let wo = window_out(w, self.kernel.1, self.stride.1, self.pad.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(TensorError::EmptyOutput {
                input: Shape::new(1, self.channels, h, w),
                detail: format!(
                    "kernel {:?} stride {:?} pad {:?}",
                    self.kernel, self.stride, self.pad
                ),
            }),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels {
            return Err(TensorError::ShapeMismatch(format!(
                "conv expects {} input channels, got input {input}",
                self.channels
            )));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.filters, ho, wo))
    }

    fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(TensorError::InvalidArgument(
                "conv stride must be >= 1".into(),
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(TensorError::InvalidArgument(
                "conv kernel must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Max-pool window configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            window: (window, window),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(TensorError::InvalidArgument(
                "pool stride must be >= 1".into(),
            ));
        }
        if self.pad.0 >= self.window.0 || self.pad.1 >= self.window.1 {
            return Err(TensorError::InvalidArgument(
                "pool padding must be smaller than the window".into(),
            ));
        }
        let ho = window_out(input.h, self.window.0, self.stride.0, self.pad.0);
        let wo = window_out(input.w, self.window.1, self.stride.1, self.pad.1);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Shape::new(input.n, input.c, ho, wo)),
            _ => Err(TensorError::EmptyOutput {
                input,
                detail: format!("pool window {:?} stride {:?}", self.window, self.stride),
            }),
        }
    }
}

fn window_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = size + 2 * pad;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Range of output positions `o` for which `stride·o + tap − pad` lands in
/// `[0, size)`.
#[inline]
pub(crate) fn valid_range(
    out: usize,
    size: usize,
    tap: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let limit = size + pad;
    let hi = if limit > tap {
        ((limit - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Batch-norm parameters in their raw stored form.
///
/// The affine form `y = ω·x + λ` is always derived from these five arrays,
/// never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(channels: usize, dtype: DType, eps: f64) -> Self {
        let v = Shape::vector(channels);
        BnParams {
            gamma: Tensor::full(v, dtype, 1.0),
            beta: Tensor::zeros(v, dtype),
            mean: Tensor::zeros(v, dtype),
            var: Tensor::full(v, dtype, 1.0),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn dtype(&self) -> DType {
        self.gamma.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if t.len() != c {
                return Err(TensorError::InvalidBatchNorm(format!(
                    "{name} has {} entries, gamma has {c}",
                    t.len()
                )));
            }
            if t.dtype() != self.dtype() {
                return Err(TensorError::DTypeMismatch {
                    expected: self.dtype(),
                    found: t.dtype(),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(TensorError::InvalidBatchNorm(format!(
                "epsilon must be positive, got {}",
                self.eps
            )));
        }
        if let Some(k) = self.var.to_f64_vec().iter().position(|&v| v < 0.0) {
            return Err(TensorError::InvalidBatchNorm(format!(
                "negative running variance in channel {k}"
            )));
        }
        Ok(())
    }

    /// Per-channel scale `ω = γ / √(σ² + ε)` and shift `λ = β − ω·μ`.
    pub fn omega_lambda<T: Element>(&self) -> Result<(Vec<T>, Vec<T>)> {
        self.validate()?;
        let eps = T::of(self.eps);
        let gamma = self.gamma.as_slice::<T>()?;
        let beta = self.beta.as_slice::<T>()?;
        let mean = self.mean.as_slice::<T>()?;
        let var = self.var.as_slice::<T>()?;
        let omega: Vec<T> = gamma
            .iter()
            .zip(var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let lambda = beta
            .iter()
            .zip(mean)
            .zip(&omega)
            .map(|((&b, &m), &o)| b - o * m)
            .collect();
        Ok((omega, lambda))
    }

    /// `ω` as `f64`, for diagnostics and guards.
    pub fn omega_f64(&self) -> Result<Vec<f64>> {
        with_dtype!(self.dtype(), T => {
            let (o, _) = self.omega_lambda::<T>()?;
            Ok(o.into_iter().map(|v| v.to_f64().unwrap()).collect())
        })
    }
}

fn same_dtype(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DTypeMismatch {
            expected: a.dtype(),
            found: b.dtype(),
        });
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding.
///
/// `y(n,k,ho,wo) = Σ_{t,i,j} x(n, t, sh·ho + i − ph, sw·wo + j − pw) · w(k,t,i,j) + b_k`
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    same_dtype(x, w)?;
    if w.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "conv weight {} does not match spec {}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        same_dtype(x, b)?;
        if b.len() != spec.filters {
            return Err(TensorError::ShapeMismatch(format!(
                "conv bias has {} entries for {} filters",
                b.len(),
                spec.filters
            )));
        }
    }
    let out = spec.output_shape(x.shape())?;
    with_dtype!(x.dtype(), T => {
        let b = match bias {
            Some(b) => Some(b.as_slice::<T>()?),
            None => None,
        };
        let y = conv2d_raw::<T>(x.as_slice()?, x.shape(), w.as_slice()?, b, spec, out);
        Tensor::from_vec(out, y)
    })
}

const KB: usize = 4;
const PB: usize = 8;

/// Direct convolution as a packed GEMM over `q = (t, i, j)`.
///
/// Every output accumulates its taps sequentially in `q` order starting
/// from +0, so the result is bit-identical to the textbook loop. Padding
/// taps contribute ±0 products, which cannot change an accumulator that
/// started at +0 under round-to-nearest.
pub(crate) fn conv2d_raw<T: Element>(
    x: &[T],
    xs: Shape,
    w: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    out: Shape,
) -> Vec<T> {
    let (r, s) = spec.kernel;
    let c = spec.channels;
    let k_total = spec.filters;
    let q_len = c * r * s;
    let p_len = out.h * out.w;
    let k_blocks = k_total.div_ceil(KB);
    let p_blocks = p_len.div_ceil(PB);

    // Weights packed as [k_block][q][KB], zero-filled past the last filter.
    let mut wp = vec![T::zero(); k_blocks * q_len * KB];
    for k in 0..k_total {
        let (kb, kk) = (k / KB, k % KB);
        for q in 0..q_len {
            wp[(kb * q_len + q) * KB + kk] = w[k * q_len + q];
        }
    }

    let mut y = vec![T::zero(); out.len()];
    let mut xp = vec![T::zero(); p_blocks * q_len * PB];
    for n in 0..xs.n {
        im2col_packed(
            &x[n * c * xs.h * xs.w..][..c * xs.h * xs.w],
            xs,
            spec,
            out,
            &mut xp,
        );
        let yn = &mut y[n * k_total * p_len..][..k_total * p_len];
        for kb in 0..k_blocks {
            let wpanel = &wp[kb * q_len * KB..][..q_len * KB];
            for pb in 0..p_blocks {
                let xpanel = &xp[pb * q_len * PB..][..q_len * PB];
                let mut acc = [[T::zero(); PB]; KB];
                for (wq, xq) in wpanel.chunks_exact(KB).zip(xpanel.chunks_exact(PB)) {
                    for kk in 0..KB {
                        let wv = wq[kk];
                        for pp in 0..PB {
                            acc[kk][pp] = acc[kk][pp] + wv * xq[pp];
                        }
                    }
                }
                for (kk, row) in acc.iter().enumerate() {
                    let k = kb * KB + kk;
                    if k >= k_total {
                        break;
                    }
                    let p0 = pb * PB;
                    let m = PB.min(p_len - p0);
                    yn[k * p_len + p0..][..m].copy_from_slice(&row[..m]);
                }
            }
        }
        if let Some(b) = bias {
            for (k, plane) in yn.chunks_exact_mut(p_len).enumerate() {
                let bk = b[k];
                for v in plane.iter_mut() {
                    *v = *v + bk;
                }
            }
        }
    }
    y
}

/// Fills `xp` as `[p_block][q][PB]` with the input value each tap reads,
/// zero for padding and for positions past the last output.
fn im2col_packed<T: Element>(x: &[T], xs: Shape, spec: &ConvSpec, out: Shape, xp: &mut [T]) {
    let (r, s) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let q_len = spec.channels * r * s;
    let p_len = out.h * out.w;
    xp.fill(T::zero());
    for t in 0..spec.channels {
        let plane = &x[t * xs.h * xs.w..][..xs.h * xs.w];
        for i in 0..r {
            let (oh_lo, oh_hi) = valid_range(out.h, xs.h, i, sh, ph);
            for j in 0..s {
                let q = (t * r + i) * s + j;
                let (ow_lo, ow_hi) = valid_range(out.w, xs.w, j, sw, pw);
                for oh in oh_lo..oh_hi {
                    let row = &plane[(sh * oh + i - ph) * xs.w..][..xs.w];
                    for ow in ow_lo..ow_hi {
                        let p = oh * out.w + ow;
                        xp[((p / PB) * q_len + q) * PB + p % PB] = row[sw * ow + j - pw];
                    }
                }
            }
        }
    }
    debug_assert!(p_len <= xp.len() / q_len.max(1));
}

/// Inference-mode batch normalization: `y = ω·x + λ` per channel.
pub fn batch_norm_inference(x: &Tensor, p: &BnParams) -> Result<Tensor> {
    let xs = x.shape();
    if p.channels() != xs.c {
        return Err(TensorError::ShapeMismatch(format!(
            "batch norm has {} channels, input is {xs}",
            p.channels()
        )));
    }
    same_dtype(x, &p.gamma)?;
    with_dtype!(x.dtype(), T => {
        let (omega, lambda) = p.omega_lambda::<T>()?;
        let src = x.as_slice::<T>()?;
        let plane = xs.plane();
        let mut y = Vec::with_capacity(src.len());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let (o, l) = (omega[c], lambda[c]);
                let off = (n * xs.c + c) * plane;
                y.extend(src[off..off + plane].iter().map(|&v| o * v + l));
            }
        }
        Tensor::from_vec(xs, y)
    })
}

pub fn elementwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "add of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    same_dtype(a, b)?;
    with_dtype!(a.dtype(), T => {
        let y = a.as_slice::<T>()?
            .iter()
            .zip(b.as_slice::<T>()?)
            .map(|(&p, &q)| p + q)
            .collect();
        Tensor::from_vec(a.shape(), y)
    })
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    with_dtype!(x.dtype(), T => {
        let y = x.as_slice::<T>()?
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_vec(x.shape(), y)
    })
}

/// Stacks tensors along the channel axis, preserving input order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
    let s0 = first.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(TensorError::ShapeMismatch(format!(
                "channel concat of {s0} and {s}"
            )));
        }
        same_dtype(first, p)?;
        channels += s.c;
    }
    let plane = s0.plane();
    with_dtype!(first.dtype(), T => {
        let mut y = Vec::with_capacity(s0.n * channels * plane);
        for n in 0..s0.n {
            for p in parts {
                let src = p.as_slice::<T>()?;
                let len = p.shape().c * plane;
                y.extend_from_slice(&src[n * len..(n + 1) * len]);
            }
        }
        Tensor::from_vec(Shape::new(s0.n, channels, s0.h, s0.w), y)
    })
}

/// Mean over each channel plane; output is `n×c×1×1`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let plane = xs.plane();
    if plane == 0 {
        return Err(TensorError::EmptyOutput {
            input: xs,
            detail: "global average pool over an empty plane".into(),
        });
    }
    with_dtype!(x.dtype(), T => {
        let src = x.as_slice::<T>()?;
        let denom = T::of(plane as f64);
        let y = src
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), y)
    })
}

/// Max pooling. Padded positions never win.
pub fn max_pool(x: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let xs = x.shape();
    let out = spec.output_shape(xs)?;
    with_dtype!(x.dtype(), T => {
        let src = x.as_slice::<T>()?;
        let (y, _) = max_pool_raw::<T>(src, xs, spec, out);
        Tensor::from_vec(out, y)
    })
}

/// Returns pooled values and the flat input index that produced each.
pub(crate) fn max_pool_raw<T: Element>(
    x: &[T],
    xs: Shape,
    spec: &PoolSpec,
    out: Shape,
) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(out.len());
    let mut arg = Vec::with_capacity(out.len());
    for nc in 0..xs.n * xs.c {
        let base = nc * xs.plane();
        for oh in 0..out.h {
            for ow in 0..out.w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for i in 0..spec.window.0 {
                    let ih = (spec.stride.0 * oh + i) as isize - spec.pad.0 as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    for j in 0..spec.window.1 {
                        let iw = (spec.stride.1 * ow + j) as isize - spec.pad.1 as isize;
                        if iw < 0 || iw >= xs.w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * xs.w + iw as usize;
                        if x[idx] > best || best_i == usize::MAX {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}

/// Dense layer over the flattened `c·h·w` features of each sample.
///
/// `w` has shape `out×in×1×1`; the result is `n×out×1×1`.
pub fn fully_connected(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    let features = xs.sample_len();
    if ws.c * ws.h * ws.w != features {
        return Err(TensorError::ShapeMismatch(format!(
            "fc weight {ws} expects {} input features, input {xs} has {features}",
            ws.c * ws.h * ws.w
        )));
    }
    same_dtype(x, w)?;
    if let Some(b) = bias {
        same_dtype(x, b)?;
        if b.len() != ws.n {
            return Err(TensorError::ShapeMismatch(format!(
                "fc bias has {} entries for {} outputs",
                b.len(),
                ws.n
            )));
        }
    }
    with_dtype!(x.dtype(), T => {
        let src = x.as_slice::<T>()?;
        let wt = w.as_slice::<T>()?;
        let b = match bias {
            Some(b) => Some(b.as_slice::<T>()?),
            None => None,
        };
        let mut y = Vec::with_capacity(xs.n * ws.n);
        for n in 0..xs.n {
            let row = &src[n * features..(n + 1) * features];
            for o in 0..ws.n {
                let wr = &wt[o * features..(o + 1) * features];
                let mut acc = row.iter().zip(wr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                if let Some(b) = b {
                    acc += b[o];
                }
                y.push(acc);
            }
        }
        Tensor::from_vec(Shape::new(xs.n, ws.n, 1, 1), y)
    })
}
