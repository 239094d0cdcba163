//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable N-dimensional array (row-major, N,C,H,W
//! order for images). Ops record the computation graph as parent links plus
//! a gradient closure on each result; [`Tensor::backward`] walks that graph
//! in reverse topological order and deposits gradients on every tensor that
//! requires them. All math is f64 with fixed summation order, so results
//! are bitwise reproducible for fixed inputs.
//!
//! Training-scale convolution lives in [`conv`]; the finite-difference
//! harness in [`gradcheck`].

pub mod conv;
pub mod fastexp;
pub mod gradcheck;
pub mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient context handed to an op's backward closure.
pub(crate) struct GradCtx<'a> {
    /// Output values of the op (the node's own data).
    pub out: &'a [f64],
    /// Upstream gradient, same length as `out`.
    pub upstream: &'a [f64],
    /// The op's inputs, in recorded order.
    pub parents: &'a [Tensor],
}

impl GradCtx<'_> {
    /// True when the parent at `idx` needs a gradient; expensive backward
    /// paths (e.g. conv input gradients for the data batch) check this to
    /// skip dead work.
    pub fn needs(&self, idx: usize) -> bool {
        self.parents[idx].requires_grad()
    }
}

type GradFn = Box<dyn Fn(&GradCtx<'_>) -> Result<Vec<Option<Vec<f64>>>>>;

struct Inner {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    grad: RefCell<Option<Vec<f64>>>,
    backward_done: Cell<bool>,
}

/// Dense f64 tensor participating in a recorded computation graph.
///
/// Cloning is cheap (reference count). Values are immutable after creation;
/// gradients live in a side cell populated by [`Tensor::backward`] and are
/// drained with [`Tensor::take_grad`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, op={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.op, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    /// Leaf tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op: "leaf",
                shape: shape.to_vec(),
                data,
                requires_grad,
                parents: Vec::new(),
                grad_fn: None,
                grad: RefCell::new(None),
                backward_done: Cell::new(false),
            }),
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel], requires_grad).expect("consistent shape")
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[], vec![v], false).expect("scalar")
    }

    /// Result of an op. Verifies the output is finite: overflow is an
    /// error, never a silent value.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut all_finite = true;
        for v in &data {
            all_finite &= v.is_finite();
        }
        if !all_finite {
            let bad = data.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::numeric(format!(
                "op `{op}` produced non-finite value {} at flat index {bad}",
                data[bad]
            )));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                shape,
                data,
                requires_grad,
                parents,
                grad_fn: if requires_grad { Some(grad_fn) } else { None },
                grad: RefCell::new(None),
                backward_done: Cell::new(false),
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Gradient deposited by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Remove and return the deposited gradient, enabling a later backward
    /// pass through this tensor.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow_mut().take()
    }

    /// Detached copy: same values, no graph history, no grad requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.inner.data.clone(), false).expect("same shape")
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Deposits the total derivative on every tensor in the graph that
    /// requires a gradient. Calling backward twice on the same graph is an
    /// error, as is backward through a tensor still holding an undrained
    /// gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.inner.backward_done.get() {
            return Err(Error::usage(
                "backward already called on this graph".to_string(),
            ));
        }
        self.inner.backward_done.set(true);

        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(grad_fn) = &node.inner.grad_fn {
                let ctx = GradCtx {
                    out: &node.inner.data,
                    upstream: &g,
                    parents: &node.inner.parents,
                };
                let prof_t0 = std::time::Instant::now();
                let parent_grads = grad_fn(&ctx)?;
                profile_record(&node.inner, prof_t0.elapsed().as_secs_f64());
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    debug_assert_eq!(pg.len(), parent.numel());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a += v;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
            if node.requires_grad() {
                let mut slot = node.inner.grad.borrow_mut();
                if slot.is_some() {
                    return Err(Error::usage(format!(
                        "tensor {} already holds a gradient; take_grad() before reusing it in a new graph",
                        node.id()
                    )));
                }
                *slot = Some(g);
            }
        }
        Ok(())
    }
}

// Temporary development profiling; enabled with EFFNET_PROFILE=1.
use std::sync::Mutex;
static PROFILE: Mutex<Option<std::collections::BTreeMap<String, (u64, f64)>>> =
    Mutex::new(None);

fn profile_record(node: &Inner, secs: f64) {
    if std::env::var_os("EFFNET_PROFILE").is_none() {
        return;
    }
    let key = format!("{}:{:?}", node.op, node.shape);
    profile_label(key, secs);
}

pub(crate) fn profile_label(key: String, secs: f64) {
    if std::env::var_os("EFFNET_PROFILE").is_none() {
        return;
    }
    let mut guard = PROFILE.lock().unwrap();
    let map = guard.get_or_insert_with(Default::default);
    let e = map.entry(key).or_insert((0, 0.0));
    e.0 += 1;
    e.1 += secs;
}

/// Dump accumulated backward timings (development aid).
pub fn profile_dump() {
    let guard = PROFILE.lock().unwrap();
    if let Some(map) = guard.as_ref() {
        for (op, (n, t)) in map {
            eprintln!("backward {op:20} calls {n:6} total {:.3}s", t);
        }
    }
}

/// Topological order (parents before consumers) of the graph below `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Iterative post-order DFS; (node, child cursor) stack.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, cursor)) = stack.pop() {
        if cursor < node.inner.parents.len() {
            let child = node.inner.parents[cursor].clone();
            stack.push((node, cursor + 1));
            if visited.insert(child.id()) {
                stack.push((child, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    pub(crate) fn random_tensor(
        rng: &mut CounterRng,
        shape: &[usize],
        requires_grad: bool,
    ) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(shape, data, requires_grad).unwrap()
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5], false).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_elementwise_square_sum() {
        // loss = sum(x * x), x = [1, 2] -> grad [2, 4]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_on_same_graph_errors() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn reusing_leaf_without_draining_grad_errors() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        x.sum_all().unwrap().backward().unwrap();
        let second = x.sum_all().unwrap();
        assert!(matches!(second.backward(), Err(Error::Usage(_))));
        // After draining, a fresh graph works again.
        assert_eq!(x.take_grad().unwrap(), vec![1.0, 1.0]);
        let third = x.sum_all().unwrap();
        third.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x) + sum(x) + sum(x) -> grad 3 per element
        let x = Tensor::from_vec(&[4], vec![0.5; 4], true).unwrap();
        let s1 = x.sum_all().unwrap();
        let s2 = x.sum_all().unwrap();
        let s3 = x.sum_all().unwrap();
        let loss = s1.add(&s2).unwrap().add(&s3).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn non_finite_op_output_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![1.0e308], false).unwrap();
        let err = x.mul(&x).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn constant_graph_records_no_grad_fn() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0], false).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(y.inner.grad_fn.is_none());
    }
}
