//! Dense N x C x H x W tensors, row-major, with optional tape attachment.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::NodeId;

/// Batch / channels / rows / cols. All dimensions are at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dimensions must be >= 1");
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor. The payload is shared via `Arc`, so cloning a tensor (or
/// snapshotting a model) is cheap; writers copy on demand.
///
/// `requires_grad` marks parameters. A tensor only accumulates gradient once
/// it carries a tape node for the current forward pass; parameters are
/// attached to the tape at the start of each recorded forward
/// (define-by-run), detached tensors never accumulate.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: Shape) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!("data length {} does not match shape {}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, node: None })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor {
            shape,
            data: Arc::new(vec![T::ZERO; shape.numel()]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn ones(shape: Shape) -> Tensor<T> {
        Tensor::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::full(Shape::scalar(), value)
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

    /// Mutable access; copies if the payload is shared. Clears any tape
    /// attachment, since recorded values must stay immutable.
    pub fn data_mut(&mut self) -> &mut [T] {
        self.node = None;
        if Arc::strong_count(&self.data) != 1 || Arc::weak_count(&self.data) != 0 {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data).unwrap().as_mut_slice()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == Shape::scalar()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn requires_grad(mut self, flag: bool) -> Tensor<T> {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor<T> {
        self.node = Some(node);
        self
    }

    /// A copy sharing the payload but detached from any tape.
    pub fn detached(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![1.0, 2.0], Shape::new(1, 1, 1, 3));
        assert!(err.is_err());
        let ok = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], Shape::new(1, 1, 1, 3));
        assert!(ok.is_ok());
    }

    #[test]
    fn data_mut_copies_shared_payload() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.numel(), 120);
    }
}
