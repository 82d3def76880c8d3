//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major and immutable after creation. Ops are pure
//! functions: when no input is attached to a [`Tape`] they just compute,
//! otherwise the result is recorded so [`backward`] can replay the chain
//! rule. A tape is confined to one thread and can be consumed by backward
//! exactly once.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Stream;

pub mod fdcheck;
pub mod ops;

type TapeRef = Rc<RefCell<TapeInner>>;

/// Produces one gradient per recorded parent, given the upstream gradient.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct NodeRec {
    parents: Vec<usize>,
    back: Option<BackFn>, // None for leaves
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<NodeRec>,
    consumed: bool,
}

/// Recording tape for one forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: TapeRef,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(RefCell::new(TapeInner::default())) }
    }

    /// Register `t` as a differentiable leaf and return the tracked handle.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(NodeRec { parents: Vec::new(), back: None });
            inner.nodes.len() - 1
        };
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(NodeHandle { tape: self.inner.clone(), id }),
        }
    }

    fn push(&self, parents: Vec<usize>, back: BackFn) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(NodeRec { parents, back: Some(back) });
        inner.nodes.len() - 1
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[derive(Clone)]
struct NodeHandle {
    tape: TapeRef,
    id: usize,
}

/// Dense n-dimensional f64 tensor.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeHandle>,
}

impl Tensor {
    /// Build from raw row-major data. Panics if the element count does not
    /// match the shape product.
    pub fn from_vec(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], vec![])
    }

    /// Standard-normal entries drawn from `stream`.
    pub fn randn(shape: &[usize], stream: &mut Stream) -> Tensor {
        Tensor::from_vec(stream.normal_vec(shape.iter().product()), shape.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    /// True when this tensor participates in a tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same data, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {index:?} out of bounds at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn tape(&self) -> Option<TapeRef> {
        self.node.as_ref().map(|n| n.tape.clone())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if self.requires_grad() {
            write!(f, " (tracked)")?;
        }
        Ok(())
    }
}

/// Find the single tape shared by the tracked inputs, if any.
fn common_tape(inputs: &[&Tensor]) -> Result<Option<TapeRef>> {
    let mut found: Option<TapeRef> = None;
    for t in inputs {
        if let Some(tape) = t.tape() {
            match &found {
                None => found = Some(tape),
                Some(prev) => {
                    if !Rc::ptr_eq(prev, &tape) {
                        return Err(Error::TapeMismatch);
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Attach `out` to the tape of the tracked inputs (if any), recording a
/// backward closure. The closure receives the upstream gradient plus a
/// "needed" flag per input and must return one gradient per needed input.
pub(crate) fn record(
    inputs: &[&Tensor],
    out: Tensor,
    back: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
) -> Result<Tensor> {
    let tape = match common_tape(inputs)? {
        Some(t) => t,
        None => return Ok(out),
    };
    let ids: Vec<Option<usize>> = inputs.iter().map(|t| t.node_id()).collect();
    let parents: Vec<usize> = ids.iter().filter_map(|id| *id).collect();
    let needed: Vec<bool> = ids.iter().map(|id| id.is_some()).collect();
    let adapted: BackFn = Box::new(move |g| {
        let grads = back(g, &needed);
        debug_assert_eq!(grads.len(), needed.len());
        grads
            .into_iter()
            .zip(&needed)
            .filter_map(|(grad, &need)| {
                if need {
                    Some(grad.expect("backward closure skipped a needed input"))
                } else {
                    debug_assert!(grad.is_none());
                    None
                }
            })
            .collect()
    });
    let id = Tape { inner: tape.clone() }.push(parents, adapted);
    Ok(Tensor { shape: out.shape, data: out.data, node: Some(NodeHandle { tape, id }) })
}

/// Gradients produced by [`backward`], addressable by the tensors that
/// participated in the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, as an untracked tensor.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node_id()?;
        self.grads
            .get(id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_vec(g.clone(), t.shape().to_vec()))
    }
}

/// Reverse pass over the tape that `loss` lives on. Visits each node once,
/// in reverse creation order; consumes the tape.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    let handle = loss.node.as_ref().ok_or(Error::NotOnTape)?;
    let inner = handle.tape.borrow();
    if inner.consumed {
        return Err(Error::DeadTape);
    }
    drop(inner);
    handle.tape.borrow_mut().consumed = true;

    let inner = handle.tape.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
    grads[handle.id] = Some(vec![1.0]);

    for id in (0..=handle.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &inner.nodes[id];
        if let Some(back) = &node.back {
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        } else {
            // Leaf: keep its gradient for the caller.
            grads[id] = Some(g);
        }
    }
    Ok(Gradients { grads })
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1.0, -2.0, 3.0], vec![3]));
        let loss = ops::sum_all(&x);
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let tape = Tape::new();
        let x0 = Tensor::from_vec(vec![0.5, -1.5, 2.0], vec![3]);
        let x = tape.watch(&x0);
        let loss = ops::sum_all(&ops::mul(&x, &x).unwrap());
        let grads = backward(&loss).unwrap();
        let g = grads.wrt(&x).unwrap();
        for (gi, xi) in g.data().iter().zip(x0.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn second_backward_on_same_tape_fails() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1.0], vec![1]));
        let loss = ops::sum_all(&x);
        backward(&loss).unwrap();
        assert!(matches!(backward(&loss), Err(Error::DeadTape)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::zeros(&[2, 2]));
        assert!(matches!(backward(&x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn untracked_loss_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(backward(&x), Err(Error::NotOnTape)));
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.watch(&Tensor::zeros(&[2]));
        let b = t2.watch(&Tensor::zeros(&[2]));
        assert!(matches!(ops::add(&a, &b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn grad_accumulates_over_reused_input() {
        // loss = sum(x + x) => grad 2 per element
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![3.0, 4.0], vec![2]));
        let loss = ops::sum_all(&ops::add(&x, &x).unwrap());
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, 2.0]);
    }
}
