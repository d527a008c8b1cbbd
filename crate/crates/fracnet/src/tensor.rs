//! Dense n-dimensional tensors stored as row-major buffers.
//!
//! The compute element type is generic over [`Scalar`] so the same graph code
//! runs in `f32` for training and in `f64` for finite-difference gradient
//! checks. `u8` exists only at the fixture/IO layer (see [`crate::fixture`]),
//! never inside the autodiff graph, so gradient buffers are always floating.

use num_traits::Float;
use thiserror::Error;

/// Element type codes used by the portable tensor fixture format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Floating element of the compute engine.
pub trait Scalar: Float + std::fmt::Debug + Default + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("conv2d produces non-positive output extent for input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding}, dilation {dilation}")]
    NonPositiveOutputExtent {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    #[error("pool window {window} larger than padded spatial extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },
    #[error("target row {row} is not one-hot")]
    MalformedOneHot { row: usize },
    #[error("softmax cross-entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}

/// Row-major dense tensor. Immutable after construction except for the
/// gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape wants {numel} elements, buffer holds {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![E::zero(); numel]).expect("zeros shape")
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("filled shape")
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar shape")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Converts elementwise to another scalar type through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Output spatial extent of a dilated strided cross-correlation, or `None`
/// when the window does not fit: floor((h + 2p - d*(k-1) - 1)/s) + 1.
pub fn conv_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = extent as i64 + 2 * padding as i64 - dilation as i64 * (kernel as i64 - 1) - 1;
    if span < 0 {
        return None;
    }
    Some((span / stride as i64) as usize + 1)
}

/// Receptive extent of a dilated kernel: (k-1)*d + 1.
pub fn effective_kernel_extent(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation + 1
}

/// Row-wise softmax with max-subtraction, outside the autodiff graph.
/// Stable for logits up to at least |1e4|.
pub fn softmax_rows<E: Scalar>(logits: &Tensor<E>) -> Tensor<E> {
    assert_eq!(logits.shape().len(), 2, "softmax_rows expects N x K");
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![E::zero(); n * k];
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * k + c] = e;
            sum = sum + e;
        }
        for c in 0..k {
            out[r * k + c] = out[r * k + c] / sum;
        }
    }
    Tensor::from_vec(logits.shape(), out).expect("softmax shape")
}

/// Row-major argmax per row; ties resolve to the lowest index.
pub fn argmax_rows<E: Scalar>(logits: &Tensor<E>) -> Vec<usize> {
    assert_eq!(logits.shape().len(), 2);
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|r| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks_element_count() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f64>::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn conv_extent_formula() {
        // 8 + 2*1 - 1*(3-1) - 1 = 7; 7/2 + 1 = 4
        assert_eq!(conv_out_extent(8, 3, 2, 1, 1), Some(4));
        assert_eq!(conv_out_extent(4, 1, 1, 0, 1), Some(4));
        assert_eq!(conv_out_extent(2, 3, 1, 0, 4), None);
    }

    #[test]
    fn dilation_receptive_extent() {
        assert_eq!(effective_kernel_extent(3, 4), 9);
        assert_eq!(effective_kernel_extent(1, 7), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_extreme_logits() {
        let logits =
            Tensor::<f64>::from_vec(&[2, 3], vec![1e4, -1e4, 0.0, 9999.5, 1e4, -42.0]).unwrap();
        let probs = softmax_rows(&logits);
        for r in 0..2 {
            let s: f64 = probs.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            assert!(probs.data()[r * 3..(r + 1) * 3]
                .iter()
                .all(|p| p.is_finite()));
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![0.5, 0.5, 0.1, 0.9]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
