//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is a tape of nodes built during one forward pass. Every op
//! appends a node holding its value and a backward closure; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into parameter leaves.
//! Graphs are rebuilt per step, which keeps control flow (ablation switches,
//! variable stage counts) trivial.
//!
//! The graph also carries the multiply counter used by the operation-count
//! profiler: each op adds its multiply count to the innermost active label
//! (see [`Graph::scoped`]), so a forward pass doubles as an exact, instrumented
//! cost measurement. Counts are recorded at node-creation time; backward
//! passes create no nodes and are not counted.

mod gradcheck;
mod ops_basic;
mod ops_conv;
mod ops_sample;

pub use gradcheck::{central_diff_grad, check_grads, check_grads_sampled, GradCheckReport};
pub use ops_conv::bilinear_resize_value;
pub use ops_sample::bilinear_points_value;
pub(crate) use ops_basic::{sigmoid_scalar, softmax_last_value};

use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A named, trainable tensor shared between a module and the graphs it is
/// used in. Gradients accumulate into `grad` across backward passes until
/// [`Param::zero_grad`] is called.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<ParamInner>>,
}

pub struct ParamInner {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                value,
                grad,
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grad(&self) -> ArrayD<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn set_value(&self, v: ArrayD<f64>) {
        let mut b = self.inner.borrow_mut();
        assert_eq!(b.value.shape(), v.shape(), "param {}: shape mismatch", b.name);
        b.value = v;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.fill(0.0);
    }

    pub fn borrow(&self) -> std::cell::Ref<'_, ParamInner> {
        self.inner.borrow()
    }

    pub fn borrow_mut(&self) -> std::cell::RefMut<'_, ParamInner> {
        self.inner.borrow_mut()
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.inner.borrow();
        write!(f, "Param({}, shape={:?})", b.name, b.value.shape())
    }
}

/// Multiply counts bucketed by label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpCounts {
    pub by_label: BTreeMap<String, u64>,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.by_label.values().sum()
    }

    /// Sum of all buckets whose label starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.by_label
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn get(&self, label: &str) -> u64 {
        self.by_label.get(label).copied().unwrap_or(0)
    }
}

/// Context handed to backward closures: read-only node values plus the
/// gradient accumulation buffer.
pub(crate) struct BwdCtx<'a> {
    values: &'a [ArrayD<f64>],
    grads: &'a mut [Option<ArrayD<f64>>],
}

impl BwdCtx<'_> {
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Accumulate `delta` into the gradient of `v`.
    pub fn accum(&mut self, v: Var, delta: ArrayD<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Mutable access to the gradient of `v`, allocated as zeros on first use
    /// (for ops that scatter into the gradient in place).
    pub fn grad_mut(&mut self, v: Var) -> &mut ArrayD<f64> {
        let shape = self.values[v.0].raw_dim();
        self.grads[v.0].get_or_insert_with(|| ArrayD::zeros(shape))
    }
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut BwdCtx)>;

/// One forward tape. See module docs.
#[derive(Default)]
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    backwards: Vec<Option<BackwardFn>>,
    params: Vec<Option<Param>>,
    needs_grad: Vec<bool>,
    counts: OpCounts,
    label_stack: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant leaf: gradients are not tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None, None, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    /// Leaf bound to a parameter; backward accumulates into the param's grad.
    pub fn param(&mut self, p: &Param) -> Var {
        let value = p.value();
        self.push(value, None, Some(p.clone()), true)
    }

    /// Input leaf whose gradient is tracked in the graph (used by gradient
    /// checks on non-parameter inputs).
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None, None, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("empty tensor")
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        backward: Option<BackwardFn>,
        param: Option<Param>,
        needs_grad: bool,
    ) -> Var {
        self.values.push(value);
        self.backwards.push(backward);
        self.params.push(param);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Convenience for unary/binary op construction: the result needs a grad
    /// iff any argument does; constants short-circuit the backward closure.
    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// Record `n` multiplies against the innermost active count label.
    pub(crate) fn count(&mut self, n: u64) {
        if n == 0 {
            return;
        }
        let label = self
            .label_stack
            .last()
            .cloned()
            .unwrap_or_else(|| "_unlabeled".to_string());
        *self.counts.by_label.entry(label).or_insert(0) += n;
    }

    /// Run `f` with `label` as the active multiply-count bucket.
    pub fn scoped<T>(&mut self, label: &str, f: impl FnOnce(&mut Graph) -> T) -> T {
        self.label_stack.push(label.to_string());
        let out = f(self);
        self.label_stack.pop();
        out
    }

    pub fn counts(&self) -> &OpCounts {
        &self.counts
    }

    pub fn reset_counts(&mut self) {
        self.counts = OpCounts::default();
    }

    /// Reverse pass from a scalar `root`. Gradients flow into parameter
    /// leaves (`Param::grad`). Returns the gradient buffer so callers can
    /// also inspect gradients of tracked input leaves.
    pub fn backward(&mut self, root: Var) -> GradStore {
        let n = self.values.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        let root_shape = self.values[root.0].raw_dim();
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be scalar, got shape {:?}",
            root_shape
        );
        grads[root.0] = Some(ArrayD::ones(root_shape));

        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(p) = &self.params[i] {
                let mut b = p.borrow_mut();
                b.grad += &g;
            }
            if let Some(bw) = &self.backwards[i] {
                let mut ctx = BwdCtx {
                    values: &self.values,
                    grads: &mut grads,
                };
                bw(&g, &mut ctx);
                // Intermediate grads are dropped once propagated.
            } else {
                // Leaf: keep the grad so GradStore can report it.
                grads[i] = Some(g);
            }
        }

        GradStore { grads }
    }
}

/// Gradients left over after a backward pass (for tracked input leaves).
pub struct GradStore {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradStore {
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn same_shape(a: &[usize], b: &[usize], op: &str) {
    assert_eq!(a, b, "{op}: shape mismatch");
}
