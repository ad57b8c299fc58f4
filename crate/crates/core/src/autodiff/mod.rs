//! Minimal reverse-mode automatic differentiation on dynamic-rank tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. The design goals are exact
//! control over gradient routing (stop-gradient barriers are first-class via
//! [`Tape::detach`] and barrier leaves) and deterministic accumulation order,
//! not generality: only the operations the watermarking models need exist.

pub mod fd;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;

use crate::scalar::Scalar;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a tape. Cheap to copy; only valid on the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Backward rule: receives the output gradient and a sink that accumulates
/// contributions into parent nodes by index.
type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut dyn FnMut(usize, ArrayD<F>))>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    needs_grad: bool,
    back: Option<BackFn<F>>,
}

/// Gradient-recording tape. Single-threaded by design; the trainer is the
/// single writer and evaluation builds throwaway tapes per batch.
pub struct Tape<F: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, needs_grad: bool, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { value: Rc::new(value), needs_grad, back });
        Var { tape_id: self.id, index }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape_id, self.id, "Var used on a foreign tape");
        v.index
    }

    /// A gradient-tracked leaf (parameters, or inputs under test).
    pub fn leaf(&self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// A constant: never receives gradient. Barrier leaves for
    /// gradient-blocked data are constants by construction.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push(value, false, None)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        let idx = self.check(v);
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Scalar value of a rank-0 node.
    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        assert!(val.ndim() == 0, "expected scalar node");
        *val.first().expect("scalar node value")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        let idx = self.check(v);
        self.nodes.borrow()[idx].needs_grad
    }

    /// Stop-gradient: a new constant node sharing the input's value. The
    /// forward value is identical; no gradient flows back through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { value, needs_grad: false, back: None });
        Var { tape_id: self.id, index }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate for every node
    /// on a path to a gradient-tracked leaf; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let root = self.check(loss);
        let nodes = self.nodes.borrow();
        assert!(nodes[root].value.ndim() == 0, "backward requires a scalar loss");

        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root] = Some(ArrayD::from_elem(ndarray::IxDyn(&[]), F::one()));

        for i in (0..=root).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            if let Some(back) = &nodes[i].back {
                let g = grads[i].take().expect("grad present");
                {
                    let mut sink = |parent: usize, contrib: ArrayD<F>| {
                        debug_assert!(parent < i, "parents must precede children");
                        match &mut grads[parent] {
                            Some(acc) => {
                                *acc += &contrib;
                            }
                            slot @ None => {
                                *slot = Some(contrib);
                            }
                        }
                    };
                    back(&g, &mut sink);
                }
                grads[i] = Some(g);
            }
        }

        Gradients { tape_id: self.id, grads }
    }
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    tape_id: u64,
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, if any path contributed one.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        assert_eq!(v.tape_id, self.tape_id, "Var used on foreign gradients");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient or an explicit zero array of the given shape.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(ndarray::IxDyn(shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[1.0, 2.0]), true);
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let loss = tape.mse(y, tape.constant(arr(&[0.0, 0.0])));
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        // Forward value is untouched by the barrier.
        assert_eq!(*tape.value(d), *tape.value(x));
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // loss = (x + x)^2 at x = 3: d/dx = 8x = 24.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(arr(&[3.0]), true);
        let two_x = tape.add(x, x);
        let loss = tape.mse(two_x, tape.constant(arr(&[0.0])));
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        assert!((g[[0]] - 24.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "foreign tape")]
    fn cross_tape_vars_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(arr(&[1.0]), true);
        let _ = b.value(x);
    }
}
