//! Dense 4-D tensors and reverse-mode automatic differentiation.
//!
//! Tensors are NCHW, row-major, value types that are cheap to clone (the
//! payload is shared) and safe to move across threads. Differentiation is
//! define-by-run: operations executed through a [`Tape`] record backward
//! rules, [`Tape::backward`] replays them in reverse topological order, and
//! gradients accumulate until explicitly cleared.
//!
//! The element type is generic over [`Scalar`] so the same graph code runs
//! in `f32` for training and in `f64` when finite-difference gradient
//! checking needs headroom below the comparison tolerance.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub mod gradcheck;
mod ops;
mod tape;

pub use ops::ConvSpec;
pub use tape::{NodeId, Tape};

/// Element type of tensor payloads: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Errors raised by tensor construction, shape checks, and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Logical dimensions of a tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
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

    /// Shape of a scalar result such as a loss value.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Flat row-major offset of element `(n, c, y, x)`.
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense NCHW tensor. Cloning shares the payload; mutation copies on
/// write, so values already recorded on a tape are never disturbed.
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::InvalidArgument(format!(
                "data length {} does not fill shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); shape.numel()]),
            node: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            node: None,
        }
    }

    /// A `(1, 1, 1, 1)` tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable payload access; copies if shared and detaches from any tape,
    /// since recorded history no longer describes the new values.
    pub fn data_mut(&mut self) -> &mut [T] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn payload(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// The same values with no tape history.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if !self.shape.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            node: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_index_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 4), 4);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidArgument(_)));
    }

    #[test]
    fn clone_shares_and_mutation_copies() {
        let mut a = Tensor::<f32>::new(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[9.0, 2.0, 3.0]);
        assert_eq!(b.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn item_requires_scalar_shape() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 2));
        assert!(matches!(t.item(), Err(TensorError::NonScalarLoss(_))));
        assert_eq!(Tensor::<f32>::scalar(4.5).item().unwrap(), 4.5);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::new(Shape::new(1, 1, 1, 3), vec![0.1, -2.5, 7.0]).unwrap();
        let d = t.cast::<f64>();
        let back = d.cast::<f32>();
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn tensors_move_across_threads() {
        let t = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 3.0);
        let sum = std::thread::spawn(move || t.sum()).join().unwrap();
        assert_eq!(sum, 12.0);
    }
}
