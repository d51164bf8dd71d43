//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to an immutable-shape, row-major value
//! buffer plus an optional gradient buffer. Operations build a computation
//! graph by linking each result to its parents together with a local
//! backward rule; node ids are handed out in creation order from a
//! thread-local counter, so walking reachable nodes by descending id is a
//! valid reverse topological order. The graph lives exactly as long as the
//! tensors referencing it: once the loss and intermediates are dropped
//! after [`Tensor::backward`], only the leaf parameters remain.
//!
//! Graphs are thread-confined (handles are `Rc`-based and not `Send`);
//! detached value buffers obtained via [`Tensor::to_vec`] are plain data
//! and may cross threads freely.

mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Local backward rule: `(output value, output gradient, parents)`.
/// The rule accumulates into each parent that requires a gradient.
type BackwardFn<F> = Box<dyn Fn(&[F], &[F], &[Tensor<F>])>;

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Shared handle to one tensor in a computation graph.
pub struct Tensor<F: Scalar = f64> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data.borrow())
            .finish()
    }
}

pub(crate) fn check_shape_len<F: Scalar>(
    op: &'static str,
    data: &[F],
    shape: &[usize],
) -> Result<()> {
    let numel: usize = shape.iter().product();
    if data.len() != numel {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            msg: format!("buffer holds {} values, shape needs {}", data.len(), numel),
        });
    }
    Ok(())
}

impl<F: Scalar> Tensor<F> {
    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_node_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Result of an operation. The node only retains its parents and
    /// backward rule when a gradient can actually flow, so inference
    /// graphs stay flat.
    pub(crate) fn from_op(
        data: Vec<F>,
        shape: Vec<usize>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_node_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        check_shape_len("from_vec", &data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Learnable leaf tensor; gradients accumulate across backward passes
    /// until [`Tensor::zero_grad`].
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        check_shape_len("param", &data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![F::zero(); numel], shape.to_vec(), false)
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Replace the value buffer in place (optimizer updates, perturbations).
    pub fn set_data(&self, data: Vec<F>) -> Result<()> {
        check_shape_len("set_data", &data, &self.node.shape)?;
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    /// Mutate the value buffer in place.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [F]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Add `delta` into this tensor's gradient buffer. No-op unless the
    /// tensor requires a gradient.
    pub(crate) fn accumulate_grad(&self, delta: &[F]) {
        if !self.node.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    /// Reverse-mode sweep from a scalar loss. Visits every reachable
    /// gradient-requiring node in reverse creation order. Leaf gradients
    /// accumulate across calls; intermediate gradients are reset per call.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }

        // Reachable gradient-requiring subgraph, deduplicated by id.
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor<F>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.node.requires_grad || !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        for t in &nodes {
            if !t.is_leaf() {
                *t.node.grad.borrow_mut() = Some(vec![F::zero(); t.numel()]);
            }
        }
        self.accumulate_grad_seed();

        for t in &nodes {
            if let Some(rule) = &t.node.backward {
                let out_grad = t
                    .node
                    .grad
                    .borrow()
                    .clone()
                    .expect("intermediate gradient allocated above");
                let out_data = t.node.data.borrow();
                rule(&out_data, &out_grad, &t.node.parents);
            }
        }
        Ok(())
    }

    fn accumulate_grad_seed(&self) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g[0] = g[0] + F::one(),
            None => *slot = Some(vec![F::one()]),
        }
    }
}

/// Boolean mask aligned with tensor shapes; `true` marks a valid position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(data: Vec<bool>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape {
                op: "mask",
                shape: shape.to_vec(),
                msg: format!("buffer holds {} values, shape needs {}", data.len(), numel),
            });
        }
        Ok(Mask {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn all_true(n: usize) -> Self {
        Mask {
            shape: vec![n],
            data: vec![true; n],
        }
    }

    /// Mask for a padded sequence: the first `valid` of `len` positions.
    pub fn prefix(valid: usize, len: usize) -> Self {
        Mask {
            shape: vec![len],
            data: (0..len).map(|i| i < valid).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Elementwise OR of two equal-shape masks.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mask union",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Mask {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    /// 0/1 constant tensor of shape `[n, 1]`, for zeroing rows of an
    /// `[n, d]` tensor by broadcast multiplication.
    pub fn as_column_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data: Vec<F> = self
            .data
            .iter()
            .map(|&b| if b { F::one() } else { F::zero() })
            .collect();
        Tensor::from_vec(data, &[self.data.len(), 1]).expect("mask column shape consistent")
    }
}

pub use ops::concat;

/// Central finite-difference check of reverse-mode gradients.
///
/// Runs `f` once for the analytic gradient of its scalar output with
/// respect to `x`, then perturbs each coordinate of `x` by `±eps` and
/// compares. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F: Scalar>(
    f: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    eps: F,
) -> Result<F> {
    let out = f(x)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    x.zero_grad();
    out.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![F::zero(); x.numel()]);

    let floor = F::from_f64(1e-8);
    let two = F::from_f64(2.0);
    let mut max_rel = F::zero();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.with_data_mut(|d| d[i] = orig + eps);
        let plus = f(x)?.item();
        x.with_data_mut(|d| d[i] = orig - eps);
        let minus = f(x)?.item();
        x.with_data_mut(|d| d[i] = orig);

        let numeric = (plus - minus) / (two * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
