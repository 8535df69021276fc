//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape is define-by-run: every recorded forward pass builds a fresh
//! tape whose nodes are in topological order by construction. `backward`
//! walks the nodes in reverse, handing each node's output gradient to the
//! vector-Jacobian closure the op registered, which accumulates into the
//! node's parents. Using a tensor in several places therefore sums the
//! branch gradients.
//!
//! A tape and the tensors recorded on it are confined to one thread.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Vector-Jacobian closure: receives the gradient of the loss w.r.t. this
/// node's output and accumulates the input gradients into the sink.
type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<T>)>;

struct Node<T> {
    numel: usize,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf node for `t` (typically a parameter or an input whose
    /// gradient is wanted) and return the attached tensor. Attach each
    /// tensor once per tape; gradients from all its uses accumulate there.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.record(t.numel(), Box::new(|_, _| {}));
        t.clone().requires_grad(true).with_node(id)
    }

    pub(crate) fn record(&self, numel: usize, backward: BackwardFn<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { numel, backward: Some(backward) });
        id
    }
}

/// Accumulates gradient contributions keyed by node id.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    numels: Vec<usize>,
}

impl<T: Float> GradSink<T> {
    /// grads[id] += contribution
    pub fn accumulate(&mut self, id: NodeId, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.numels[id], "gradient size mismatch");
        match &mut self.grads[id] {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(contribution) {
                    *dst += *src;
                }
            }
            None => self.grads[id] = Some(contribution.to_vec()),
        }
    }

    /// Accumulate into a zero-initialized buffer through a closure, avoiding
    /// a temporary allocation for scatter-style backward rules.
    pub fn accumulate_with(&mut self, id: NodeId, fill: impl FnOnce(&mut [T])) {
        if self.grads[id].is_none() {
            self.grads[id] = Some(vec![T::ZERO; self.numels[id]]);
        }
        fill(self.grads[id].as_mut().unwrap());
    }
}

/// Gradients produced by `backward`, queried per tensor.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. `t`, if any flowed to it.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node().and_then(|id| self.grads.get(id).and_then(|g| g.as_deref()))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Reverse sweep. `loss` must be a scalar recorded on `tape`. Consumes the
/// tape's backward closures; a tape is good for one backward pass.
pub fn backward<T: Float>(tape: &Tape<T>, loss: &Tensor<T>) -> Result<Gradients<T>> {
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    let loss_node = loss.node().ok_or(Error::DetachedLoss)?;

    let mut nodes = tape.nodes.borrow_mut();
    let numels: Vec<usize> = nodes.iter().map(|n| n.numel).collect();
    let mut sink = GradSink { grads: vec![None; nodes.len()], numels };
    sink.grads[loss_node] = Some(vec![T::ONE]);

    for id in (0..=loss_node).rev() {
        if sink.grads[id].is_none() {
            continue;
        }
        if let Some(bw) = nodes[id].backward.take() {
            let grad_out = sink.grads[id].take().unwrap();
            bw(&grad_out, &mut sink);
            sink.grads[id] = Some(grad_out);
        }
    }

    Ok(Gradients { grads: sink.grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{add, mul, sum_all};
    use crate::tensor::Shape;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0], Shape::new(1, 3, 1, 1)).unwrap());
        let loss = sum_all(Some(&tape), &x);
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::from_vec(vec![2.0, -3.0], Shape::new(1, 2, 1, 1)).unwrap());
        let sq = mul(Some(&tape), &x, &x).unwrap();
        let loss = sum_all(Some(&tape), &sq);
        assert_eq!(loss.item(), 13.0);
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[4.0, -6.0]);
    }

    #[test]
    fn two_branch_use_accumulates() {
        // f(x) = sum(x) + sum(x) -> grad 2 everywhere
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::from_vec(vec![5.0, 7.0], Shape::new(1, 1, 1, 2)).unwrap());
        let s1 = sum_all(Some(&tape), &x);
        let s2 = sum_all(Some(&tape), &x);
        let loss = add(Some(&tape), &s1, &s2).unwrap();
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::ones(Shape::new(1, 1, 2, 2)));
        match backward(&tape, &x) {
            Err(Error::NonScalarLoss { .. }) => {}
            Err(other) => panic!("expected NonScalarLoss, got {other:?}"),
            Ok(_) => panic!("expected NonScalarLoss, got Ok"),
        }
    }

    #[test]
    fn detached_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let loss = Tensor::scalar(1.0);
        match backward(&tape, &loss) {
            Err(Error::DetachedLoss) => {}
            Err(other) => panic!("expected DetachedLoss, got {other:?}"),
            Ok(_) => panic!("expected DetachedLoss, got Ok"),
        }
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(
                &Tensor::<f64>::from_vec(vec![0.3, -1.7, 2.9, 0.01], Shape::new(1, 1, 2, 2))
                    .unwrap(),
            );
            let sq = mul(Some(&tape), &x, &x).unwrap();
            let s1 = sum_all(Some(&tape), &sq);
            let s2 = sum_all(Some(&tape), &x);
            let loss = add(Some(&tape), &s1, &s2).unwrap();
            let grads = backward(&tape, &loss).unwrap();
            (loss.item().to_bits(), grads.wrt(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_does_not_flow_to_detached_inputs() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::ones(Shape::new(1, 1, 1, 2)));
        let c = Tensor::<f64>::from_vec(vec![3.0, 4.0], Shape::new(1, 1, 1, 2)).unwrap();
        let prod = mul(Some(&tape), &x, &c).unwrap();
        let loss = sum_all(Some(&tape), &prod);
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[3.0, 4.0]);
        assert!(grads.wrt(&c).is_none());
    }
}
