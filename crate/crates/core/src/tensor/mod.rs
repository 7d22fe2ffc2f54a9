//! Dense 4-D tensors in N,C,H,W layout and the reference operator kernels.
//!
//! Every weight and activation in the toolkit is a [`Tensor`]. Storage is
//! either `f32` or `f64`; kernels are written once over the [`Element`]
//! trait and dispatched on the runtime [`DType`].

mod ops;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    batch_norm_inference, concat_channels, conv2d, elementwise_add, fully_connected,
    global_avg_pool, max_pool, relu, BnParams, ConvSpec, PoolSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("output spatial size would be smaller than 1 for input {input} with {detail}")]
    EmptyOutput { input: Shape, detail: String },
    #[error("invalid batch-norm parameters: {0}")]
    InvalidBatchNorm(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "binary32" | "float32" => Ok(DType::F32),
            "f64" | "binary64" | "float64" => Ok(DType::F64),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown dtype `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

/// Extent of a tensor along N, C, H and W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape used for per-channel parameter vectors: `1×len×1×1`.
    pub const fn vector(len: usize) -> Self {
        Shape::new(1, len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    /// Number of elements in one sample (C·H·W).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Scalar types a tensor can hold.
pub trait Element:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    fn into_buffer(v: Vec<Self>) -> Buffer;
    fn view(b: &Buffer) -> Option<&[Self]>;
    fn view_mut(b: &mut Buffer) -> Option<&mut [Self]>;
    fn take(b: Buffer) -> std::result::Result<Vec<Self>, Buffer>;
    /// Smallest representable value strictly greater than `self`.
    fn step_up(self) -> Self;
    /// Largest representable value strictly smaller than `self`.
    fn step_down(self) -> Self;
    fn of(v: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F32(v)
    }
    fn view(b: &Buffer) -> Option<&[Self]> {
        match b {
            Buffer::F32(v) => Some(v),
            Buffer::F64(_) => None,
        }
    }
    fn view_mut(b: &mut Buffer) -> Option<&mut [Self]> {
        match b {
            Buffer::F32(v) => Some(v),
            Buffer::F64(_) => None,
        }
    }
    fn take(b: Buffer) -> std::result::Result<Vec<Self>, Buffer> {
        match b {
            Buffer::F32(v) => Ok(v),
            other => Err(other),
        }
    }
    fn step_up(self) -> Self {
        self.next_up()
    }
    fn step_down(self) -> Self {
        self.next_down()
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn into_buffer(v: Vec<Self>) -> Buffer {
        Buffer::F64(v)
    }
    fn view(b: &Buffer) -> Option<&[Self]> {
        match b {
            Buffer::F64(v) => Some(v),
            Buffer::F32(_) => None,
        }
    }
    fn view_mut(b: &mut Buffer) -> Option<&mut [Self]> {
        match b {
            Buffer::F64(v) => Some(v),
            Buffer::F32(_) => None,
        }
    }
    fn take(b: Buffer) -> std::result::Result<Vec<Self>, Buffer> {
        match b {
            Buffer::F64(v) => Ok(v),
            other => Err(other),
        }
    }
    fn step_up(self) -> Self {
        self.next_up()
    }
    fn step_down(self) -> Self {
        self.next_down()
    }
    fn of(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Calls `$body` with `$T` bound to the scalar type matching `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::tensor::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::tensor::DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}
pub(crate) use ops::{conv2d_raw, max_pool_raw, valid_range};
pub(crate) use with_dtype;

/// A dense, immutable-by-convention 4-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Buffer,
}

impl Tensor {
    pub fn zeros(shape: Shape, dtype: DType) -> Self {
        let data = match dtype {
            DType::F32 => Buffer::F32(vec![0.0; shape.len()]),
            DType::F64 => Buffer::F64(vec![0.0; shape.len()]),
        };
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, dtype: DType, value: f64) -> Self {
        let data = match dtype {
            DType::F32 => Buffer::F32(vec![value as f32; shape.len()]),
            DType::F64 => Buffer::F64(vec![value; shape.len()]),
        };
        Tensor { shape, data }
    }

    /// Wraps already-validated values. Only the length is checked.
    pub fn from_vec<T: Element>(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected: shape.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: T::into_buffer(data),
        })
    }

    /// Constructor for values coming from outside the process (files, user
    /// input): additionally rejects NaN and infinities.
    pub fn from_external<T: Element>(shape: Shape, data: Vec<T>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Self::from_vec(shape, data)
    }

    /// Builds a tensor of the requested dtype from `f64` values.
    pub fn from_f64(shape: Shape, dtype: DType, values: &[f64]) -> Result<Self> {
        with_dtype!(dtype, T => Self::from_vec(shape, values.iter().map(|&v| T::of(v)).collect::<Vec<T>>()))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn buffer(&self) -> &Buffer {
        &self.data
    }

    pub fn as_slice<T: Element>(&self) -> Result<&[T]> {
        T::view(&self.data).ok_or(TensorError::DTypeMismatch {
            expected: T::DTYPE,
            found: self.dtype(),
        })
    }

    pub fn as_mut_slice<T: Element>(&mut self) -> Result<&mut [T]> {
        let found = self.dtype();
        T::view_mut(&mut self.data).ok_or(TensorError::DTypeMismatch {
            expected: T::DTYPE,
            found,
        })
    }

    pub fn into_vec<T: Element>(self) -> Result<Vec<T>> {
        T::take(self.data).map_err(|b| TensorError::DTypeMismatch {
            expected: T::DTYPE,
            found: b.dtype(),
        })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Buffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buffer::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        let i = ((n * s.c + c) * s.h + h) * s.w + w;
        match &self.data {
            Buffer::F32(v) => v[i] as f64,
            Buffer::F64(v) => v[i],
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let values = self.to_f64_vec();
        Tensor::from_f64(self.shape, dtype, &values).expect("shape preserved")
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Tensor> {
        if shape.len() != self.shape.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = match &self.data {
            Buffer::F32(v) => v.iter().position(|x| !x.is_finite()),
            Buffer::F64(v) => v.iter().position(|x| !x.is_finite()),
        };
        bad.map_or(Ok(()), |i| Err(TensorError::NonFinite(i)))
    }

    /// Largest absolute elementwise difference, computed in `f64`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{} vs {}",
                self.shape, other.shape
            )));
        }
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// True when shape, dtype and every stored bit agree.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (Buffer::F32(a), Buffer::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Buffer::F64(a), Buffer::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Keeps the listed indices along axis 0 (filters of a weight tensor,
    /// samples of an activation), in the given order.
    pub fn select_axis0(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape;
        let stride = s.sample_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.n) {
            return Err(TensorError::InvalidArgument(format!(
                "axis-0 index {bad} out of range for {s}"
            )));
        }
        with_dtype!(self.dtype(), T => {
            let src = self.as_slice::<T>()?;
            let mut out = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            }
            Tensor::from_vec(Shape::new(indices.len(), s.c, s.h, s.w), out)
        })
    }

    /// Keeps the listed indices along axis 1 (input channels of a weight
    /// tensor, channels of an activation), in the given order.
    pub fn select_axis1(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape;
        let plane = s.plane();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.c) {
            return Err(TensorError::InvalidArgument(format!(
                "axis-1 index {bad} out of range for {s}"
            )));
        }
        with_dtype!(self.dtype(), T => {
            let src = self.as_slice::<T>()?;
            let mut out = Vec::with_capacity(s.n * indices.len() * plane);
            for n in 0..s.n {
                for &c in indices {
                    let off = (n * s.c + c) * plane;
                    out.extend_from_slice(&src[off..off + plane]);
                }
            }
            Tensor::from_vec(Shape::new(s.n, indices.len(), s.h, s.w), out)
        })
    }

    /// Contiguous channel range `[start, end)` along axis 1.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_axis1(&idx)
    }

    /// Stacks tensors along axis 0. All other extents must agree.
    pub fn concat_axis0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = first.shape;
        let dtype = first.dtype();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return Err(TensorError::ShapeMismatch(format!(
                    "axis-0 concat of {s0} and {s}"
                )));
            }
            if p.dtype() != dtype {
                return Err(TensorError::DTypeMismatch {
                    expected: dtype,
                    found: p.dtype(),
                });
            }
            n += s.n;
        }
        with_dtype!(dtype, T => {
            let mut out = Vec::with_capacity(n * s0.sample_len());
            for p in parts {
                out.extend_from_slice(p.as_slice::<T>()?);
            }
            Tensor::from_vec(Shape::new(n, s0.c, s0.h, s0.w), out)
        })
    }

    /// Little-endian IEEE-754 bytes of the data, in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Buffer::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Buffer::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(shape: Shape, dtype: DType, bytes: &[u8]) -> Result<Tensor> {
        let expected = shape.len() * dtype.size_of();
        if bytes.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                len: bytes.len() / dtype.size_of(),
                expected: shape.len(),
            });
        }
        match dtype {
            DType::F32 => {
                let v: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_external(shape, v)
            }
            DType::F64 => {
                let v: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_external(shape, v)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_external_data() {
        let err =
            Tensor::from_external(Shape::new(1, 1, 1, 2), vec![1.0f32, f32::NAN]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite(1));
        assert!(Tensor::from_external(Shape::new(1, 1, 1, 1), vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn length_is_checked() {
        assert!(matches!(
            Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![0.0f32; 7]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn axis_selection() {
        let t = Tensor::from_f64(
            Shape::new(2, 3, 1, 1),
            DType::F64,
            &[0., 1., 2., 3., 4., 5.],
        )
        .unwrap();
        assert_eq!(t.select_axis0(&[1]).unwrap().to_f64_vec(), vec![3., 4., 5.]);
        assert_eq!(
            t.select_axis1(&[2, 0]).unwrap().to_f64_vec(),
            vec![2., 0., 5., 3.]
        );
        assert!(t.select_axis1(&[3]).is_err());
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let t =
            Tensor::from_f64(Shape::new(1, 1, 2, 2), DType::F32, &[0.1, -2.5, 1e-30, 7.0]).unwrap();
        let back = Tensor::from_le_bytes(t.shape(), DType::F32, &t.to_le_bytes()).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn dtype_parsing() {
        assert_eq!("binary64".parse::<DType>().unwrap(), DType::F64);
        assert!("f16".parse::<DType>().is_err());
    }
}
