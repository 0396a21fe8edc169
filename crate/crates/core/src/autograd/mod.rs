//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records one computation graph per forward pass. Every operation
//! pushes a node holding a closure that maps the output gradient to gradient
//! contributions for its parents. [`Tensor::backward`] walks the nodes in
//! reverse creation order and accumulates gradients, which callers fetch by
//! tensor id through [`Gradients`].
//!
//! Tapes are cheap, single-threaded and dropped after each step; parameters
//! live outside the tape and are re-bound as leaves on every forward pass.
//! Shape mismatches are programmer errors and panic.

mod conv;
mod ops;
pub mod fd;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use conv::{conv2d_raw, Conv2dSpec};

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

struct TapeInner {
    nodes: RefCell<Vec<Option<BackFn>>>,
}

/// A recording of one forward computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    fn push(&self, back: Option<BackFn>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(back);
        nodes.len() - 1
    }

    /// Register a gradient-carrying leaf (an input or a parameter binding).
    pub fn leaf(&self, data: ArrayD<f64>) -> Tensor {
        let id = self.push(None);
        Tensor {
            tape: self.clone(),
            id,
            data: Rc::new(data),
        }
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(ndarray::arr0(v).into_dyn())
    }

    /// Whether two handles refer to the same recording.
    pub fn is_same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A node in the computation graph together with its forward value.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    data: Rc<ArrayD<f64>>,
}

impl Tensor {
    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Value of a 0-dimensional tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.ndim(), 0, "item() on non-scalar tensor");
        *self.data.iter().next().unwrap()
    }

    /// Re-enter the value as a fresh leaf, severing the gradient path.
    pub fn detach(&self) -> Tensor {
        self.tape.leaf(self.data.as_ref().clone())
    }

    pub(crate) fn from_op(tape: &Tape, data: ArrayD<f64>, back: BackFn) -> Tensor {
        let id = tape.push(Some(back));
        Tensor {
            tape: tape.clone(),
            id,
            data: Rc::new(data),
        }
    }

    pub(crate) fn assert_same_tape(&self, other: &Tensor, op: &str) {
        assert!(
            self.tape.is_same(&other.tape),
            "{op}: tensors from different tapes"
        );
    }

    /// Reverse pass seeded with ones at `self` (normally a scalar loss).
    pub fn backward(&self) -> Gradients {
        let nodes = self.tape.inner.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[self.id] = Some(ArrayD::ones(IxDyn(self.data.shape())));
        for id in (0..=self.id).rev() {
            let Some(back) = nodes[id].as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            for (pid, pg) in back(g) {
                debug_assert!(pid < id, "backward edge must point to an earlier node");
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients {
            tape: self.tape.clone(),
            grads,
        }
    }
}

/// Gradients accumulated by one backward pass, indexed by tensor id.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        assert!(
            self.tape.is_same(&t.tape),
            "gradient lookup for a tensor from another tape"
        );
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `t`, zeros if the loss did not depend on it.
    pub fn wrt(&self, t: &Tensor) -> ArrayD<f64> {
        match self.get(t) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(t.shape())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    #[test]
    fn backward_through_shared_subexpression() {
        // f = (x*x) + x  =>  df/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[1.5, -2.0]).into_dyn());
        let f = x.mul(&x).add(&x).sum_all();
        let g = f.backward();
        let gx = g.wrt(&x);
        assert_abs_diff_eq!(gx[[0]], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gx[[1]], -3.0, epsilon = 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[3.0]).into_dyn());
        let f = x.detach().mul(&x).sum_all();
        let g = f.backward();
        // Only the non-detached factor contributes.
        assert_abs_diff_eq!(g.wrt(&x)[[0]], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = tape.leaf(arr1(&[5.0]).into_dyn());
        let f = x.sum_all();
        let g = f.backward();
        assert!(g.get(&y).is_none());
        assert_eq!(g.wrt(&y)[[0]], 0.0);
    }
}
