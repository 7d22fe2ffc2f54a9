//! Weight constructors for auxiliary and padded convolutions.

use num_traits::Zero;

use crate::tensor::{with_dtype, DType, Element, Shape, Tensor, TensorError};

use super::FusionError;

/// Smallest `|ω|` accepted when dividing passthrough weights by a
/// following batch norm's scale.
pub const OMEGA_MIN: f64 = 1e-3;

/// `C×C×r×s` weights that make a stride-1, `((r−1)/2, (s−1)/2)`-padded
/// convolution reproduce its input exactly: a single 1 at the kernel
/// centre of filter `k`, input channel `k`.
pub fn make_identity_weights(
    channels: usize,
    r: usize,
    s: usize,
    dtype: DType,
) -> Result<Tensor, FusionError> {
    if r.is_multiple_of(2) || s.is_multiple_of(2) {
        return Err(FusionError::NonOddKernel {
            node: "<identity>".into(),
            kernel: (r, s),
        });
    }
    let shape = Shape::new(channels, channels, r, s);
    let mut v = vec![0.0; shape.len()];
    for k in 0..channels {
        v[((k * channels + k) * r + (r - 1) / 2) * s + (s - 1) / 2] = 1.0;
    }
    Ok(Tensor::from_f64(shape, dtype, &v)?)
}

/// Embeds a `k×c×1×1` kernel at the centre of a zero `k×c×r×s` kernel.
///
/// With padding `((r−1)/2, (s−1)/2)` the padded convolution reads exactly
/// the same input positions as the 1×1 convolution with padding 0, for any
/// stride.
pub fn pad_conv_weights(w: &Tensor, r: usize, s: usize) -> Result<Tensor, FusionError> {
    let ws = w.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(FusionError::PatternMismatch {
            block: "<pad>".into(),
            detail: format!("padded convolution needs a 1x1 source kernel, got {ws}"),
        });
    }
    if r.is_multiple_of(2) || s.is_multiple_of(2) {
        return Err(FusionError::NonOddKernel {
            node: "<pad>".into(),
            kernel: (r, s),
        });
    }
    with_dtype!(w.dtype(), T => {
        let src = w.as_slice::<T>()?;
        let shape = Shape::new(ws.n, ws.c, r, s);
        let mut out = vec![T::zero(); shape.len()];
        for (kc, &v) in src.iter().enumerate() {
            out[(kc * r + (r - 1) / 2) * s + (s - 1) / 2] = v;
        }
        Ok(Tensor::from_vec(shape, out)?)
    })
}

/// Divides filter `k` of `w` by `ω_k`.
///
/// Placed in front of a batch norm with scale `ω`, a passthrough filter
/// adjusted this way contributes exactly `x_k` to the normalized output.
/// `omega` is a per-filter vector in the same dtype as `w`.
pub fn adjust_identity_for_bn(w: &Tensor, omega: &Tensor) -> Result<Tensor, FusionError> {
    let ws = w.shape();
    if omega.len() != ws.n {
        return Err(FusionError::Tensor(TensorError::ShapeMismatch(format!(
            "{} scale entries for {} filters",
            omega.len(),
            ws.n
        ))));
    }
    with_dtype!(w.dtype(), T => {
        let om = omega.as_slice::<T>()?;
        check_omega(om, "<adjust>")?;
        let per = ws.sample_len();
        let src = w.as_slice::<T>()?;
        let out: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(i, &v)| v / om[i / per])
            .collect();
        Ok(Tensor::from_vec(ws, out)?)
    })
}

pub(crate) fn check_omega<T: Element>(omega: &[T], node: &str) -> Result<(), FusionError> {
    for (k, &o) in omega.iter().enumerate() {
        let v = o.to_f64().unwrap();
        if !(v.abs() > OMEGA_MIN) {
            return Err(FusionError::NearZeroOmega {
                node: node.to_string(),
                channel: k,
                omega: v,
            });
        }
    }
    Ok(())
}

/// Variance `v ≥ 0` with `fl(v + ε) = 1` exactly in `T`, so that a BN channel
/// with γ=1, β=0, μ=0 and this variance is the exact identity.
pub fn unit_variance<T: Element>(eps: f64) -> Result<T, FusionError> {
    let one = T::one();
    let e = T::of(eps);
    if !(e < one) {
        return Err(FusionError::Tensor(TensorError::InvalidBatchNorm(format!(
            "epsilon {eps} leaves no room for an identity channel"
        ))));
    }
    let mut v = one - e;
    for _ in 0..64 {
        let s = v + e;
        if s == one {
            return Ok(v);
        }
        v = if s > one { v.step_down() } else { v.step_up() };
    }
    Err(FusionError::Tensor(TensorError::InvalidBatchNorm(format!(
        "no variance makes sigma^2 + {eps} round to 1"
    ))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batch_norm_inference, conv2d, BnParams, ConvSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, dtype: DType, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_f64(shape, dtype, &v).unwrap()
    }

    #[test]
    fn identity_weight_layout() {
        let one = make_identity_weights(1, 1, 1, DType::F32).unwrap();
        assert_eq!(one.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(one.to_f64_vec(), vec![1.0]);

        let w = make_identity_weights(2, 3, 3, DType::F64).unwrap();
        let nz: Vec<_> = (0..2)
            .flat_map(|k| {
                (0..2)
                    .flat_map(move |c| (0..3).flat_map(move |i| (0..3).map(move |j| (k, c, i, j))))
            })
            .filter(|&(k, c, i, j)| w.get(k, c, i, j) != 0.0)
            .collect();
        assert_eq!(nz, vec![(0, 0, 1, 1), (1, 1, 1, 1)]);
        assert!(matches!(
            make_identity_weights(2, 2, 3, DType::F32),
            Err(FusionError::NonOddKernel { .. })
        ));
    }

    #[test]
    fn identity_conv_is_bit_exact() {
        for dtype in [DType::F32, DType::F64] {
            let x = random(Shape::new(1, 4, 6, 6), dtype, 11);
            for k in [1, 3, 5] {
                let w = make_identity_weights(4, k, k, dtype).unwrap();
                let y = conv2d(&x, &w, None, &ConvSpec::new(4, 4, k, 1, (k - 1) / 2)).unwrap();
                assert!(y.bit_eq(&x));
            }
        }
    }

    #[test]
    fn padding_a_pointwise_kernel() {
        let w = Tensor::from_f64(Shape::new(1, 1, 1, 1), DType::F32, &[5.0]).unwrap();
        let p = pad_conv_weights(&w, 3, 3).unwrap();
        assert_eq!(p.to_f64_vec(), vec![0., 0., 0., 0., 5., 0., 0., 0., 0.]);

        let w = random(Shape::new(8, 4, 1, 1), DType::F32, 3);
        let x = random(Shape::new(1, 4, 7, 7), DType::F32, 4);
        let p = pad_conv_weights(&w, 3, 3).unwrap();
        for stride in [1, 2, 3] {
            let a = conv2d(&x, &w, None, &ConvSpec::new(8, 4, 1, stride, 0)).unwrap();
            let b = conv2d(&x, &p, None, &ConvSpec::new(8, 4, 3, stride, 1)).unwrap();
            assert_eq!(a.shape().h, (7 - 1) / stride + 1);
            assert!(a.bit_eq(&b), "stride {stride}");
        }

        let z = pad_conv_weights(&Tensor::zeros(Shape::new(2, 2, 1, 1), DType::F32), 3, 3).unwrap();
        let y = conv2d(
            &x.slice_channels(0, 2).unwrap(),
            &z,
            None,
            &ConvSpec::new(2, 2, 3, 1, 1),
        )
        .unwrap();
        assert!(y.to_f64_vec().iter().all(|&v| v == 0.0));
        assert!(pad_conv_weights(&random(Shape::new(1, 1, 3, 3), DType::F32, 1), 3, 3).is_err());
    }

    #[test]
    fn inverse_bn_adjustment() {
        let w = make_identity_weights(2, 3, 3, DType::F64).unwrap();
        let ones = Tensor::full(Shape::vector(2), DType::F64, 1.0);
        assert!(adjust_identity_for_bn(&w, &ones).unwrap().bit_eq(&w));

        let om = Tensor::from_f64(Shape::vector(2), DType::F64, &[2.0, 4.0]).unwrap();
        let a = adjust_identity_for_bn(&w, &om).unwrap();
        assert_eq!(a.get(0, 0, 1, 1), 0.5);
        assert_eq!(a.get(1, 1, 1, 1), 0.25);

        let om = Tensor::from_f64(Shape::vector(2), DType::F64, &[1.0, 0.0]).unwrap();
        assert!(matches!(
            adjust_identity_for_bn(&w, &om),
            Err(FusionError::NearZeroOmega { channel: 1, .. })
        ));
    }

    #[test]
    fn unit_variance_gives_exact_identity_bn() {
        for eps in [1e-5, 1e-3, 0.1, 1e-7, 0.3] {
            let v32 = unit_variance::<f32>(eps).unwrap();
            assert_eq!(v32 + eps as f32, 1.0);
            let v64 = unit_variance::<f64>(eps).unwrap();
            assert_eq!(v64 + eps, 1.0);

            let x = random(Shape::new(2, 3, 4, 4), DType::F32, 9);
            let p = BnParams {
                gamma: Tensor::full(Shape::vector(3), DType::F32, 1.0),
                beta: Tensor::zeros(Shape::vector(3), DType::F32),
                mean: Tensor::zeros(Shape::vector(3), DType::F32),
                var: Tensor::from_vec(Shape::vector(3), vec![v32; 3]).unwrap(),
                eps,
            };
            assert!(batch_norm_inference(&x, &p).unwrap().bit_eq(&x));
        }
        assert!(unit_variance::<f32>(1.5).is_err());
    }
}
