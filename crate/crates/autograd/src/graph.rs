//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written with [`Var`] operations, so a
//! gradient computed with `create_graph = true` is an ordinary differentiable
//! node and can be differentiated again. The convolution family is closed
//! under differentiation: `conv2d`, `conv_transpose2d` and
//! `conv2d_weight_grad` are each other's adjoints.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::{ConvGeometry, Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// `(upstream gradient, parents, which parents need a gradient)`.
type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[Var<T>], &[bool]) -> Vec<Option<Var<T>>> + Send + Sync>;

struct Node<T> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in the computation graph. Cheap to clone.
pub struct Var<T>(Arc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Arc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Scalar> Var<T> {
    /// A leaf that does not take part in differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf whose gradient can be requested.
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        if !requires_grad {
            return Var::constant(value);
        }
        Var(Arc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, n| {
                vec![
                    n[0].then(|| g.mul(&p[1])),
                    n[1].then(|| g.mul(&p[0])),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let value = self.value().map(|a| a * s);
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let value = self.value().map(|a| a + s);
        Var::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&self, c: &Tensor<T>) -> Var<T> {
        let value = self.value().zip_map(c, |a, b| a * b);
        let c = c.clone();
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.mul_const(&c))]))
    }

    /// Square root whose derivative is taken as zero where the input is zero,
    /// so norms of all-zero vectors stay differentiable.
    pub fn sqrt(&self) -> Var<T> {
        let value = self.value().map(|a| a.sqrt());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let half = T::from_f64_lossy(0.5);
                vec![Some(g.mul(&p[0].sqrt().safe_recip()).scale(half))]
            }),
        )
    }

    /// `1/x`, with `1/0` defined as `0`.
    pub fn safe_recip(&self) -> Var<T> {
        let value = self.value().map(safe_recip);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let r = p[0].safe_recip();
                vec![Some(g.mul(&r).mul(&r).neg())]
            }),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        let value = self.value().map(|a| a.tanh());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let t = p[0].tanh();
                let deriv = t.mul(&t).neg().add_scalar(T::one());
                vec![Some(g.mul(&deriv))]
            }),
        )
    }

    /// `max(x, slope * x)` realised as a product with a constant slope map.
    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let mask = self.value().map(|a| if a > T::zero() { T::one() } else { slope });
        self.mul_const(&mask)
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    // ---- reductions and broadcasts -----------------------------------

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.expand(&shape))]))
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel()).expect("count");
        self.sum().scale(T::one() / n)
    }

    /// Broadcasts a `[1]` tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<T> {
        assert_eq!(self.value().numel(), 1, "expand requires a single element");
        let value = Tensor::full(shape, self.value().item());
        Var::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.sum())]))
    }

    /// Sums over all axes except `axis`.
    pub fn sum_keep_axis(&self, axis: usize) -> Var<T> {
        let value = self.value().sum_keep_axis(axis);
        let shape = self.shape().to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.broadcast_axis(axis, &shape))]),
        )
    }

    /// Broadcasts a 1-d var along `axis` of `shape`.
    pub fn broadcast_axis(&self, axis: usize, shape: &[usize]) -> Var<T> {
        let value = self.value().broadcast_axis(axis, shape);
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.sum_keep_axis(axis))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let value = self.value().reshape(shape);
        let orig = self.shape().to_vec();
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.reshape(&orig))]))
    }

    // ---- structural --------------------------------------------------

    pub fn concat_channels(parts: &[Var<T>]) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let value = Tensor::concat_channels(&values);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, _, n| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(n)
                    .map(|(&w, &need)| {
                        let out = need.then(|| g.slice_channels(offset, w));
                        offset += w;
                        out
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Var<T> {
        let value = self.value().slice_channels(start, len);
        let total = self.shape()[1];
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.pad_channels(start, total))]),
        )
    }

    pub fn pad_channels(&self, start: usize, total: usize) -> Var<T> {
        let value = self.value().pad_channels(start, total);
        let len = self.shape()[1];
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.slice_channels(start, len))]),
        )
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Var<T> {
        let value = self.value().gather_rows(indices);
        let rows = self.shape()[0];
        let idx = indices.to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.scatter_rows(&idx, rows))]),
        )
    }

    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Var<T> {
        let value = self.value().scatter_rows(indices, rows);
        let idx = indices.to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.gather_rows(&idx))]),
        )
    }

    pub fn transpose2d(&self) -> Var<T> {
        let value = self.value().transpose2d();
        Var::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.transpose2d())]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().matmul(other.value());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, n| {
                vec![
                    n[0].then(|| g.matmul(&p[1].transpose2d())),
                    n[1].then(|| p[0].transpose2d().matmul(g)),
                ]
            }),
        )
    }

    /// `self` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, k, k]`.
    pub fn conv2d(&self, weight: &Var<T>, geom: ConvGeometry) -> Var<T> {
        let value = self.value().conv2d(weight.value(), geom);
        let in_hw = (self.shape()[2], self.shape()[3]);
        Var::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, p, n| {
                vec![
                    n[0].then(|| g.conv_transpose2d(&p[1], geom, in_hw)),
                    n[1].then(|| p[0].conv2d_weight_grad(g, geom)),
                ]
            }),
        )
    }

    /// `self` is `[N, Co, Ho, Wo]`, `weight` is `[Co, Ci, k, k]`; output is
    /// `[N, Ci, out_h, out_w]`.
    pub fn conv_transpose2d(&self, weight: &Var<T>, geom: ConvGeometry, out_hw: (usize, usize)) -> Var<T> {
        let value = self.value().conv_transpose2d(weight.value(), geom, out_hw);
        Var::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, p, n| {
                vec![
                    n[0].then(|| g.conv2d(&p[1], geom)),
                    n[1].then(|| g.conv2d_weight_grad(&p[0], geom)),
                ]
            }),
        )
    }

    /// Weight gradient of a convolution of `self` producing `grad_out`.
    pub fn conv2d_weight_grad(&self, grad_out: &Var<T>, geom: ConvGeometry) -> Var<T> {
        let value = self.value().conv2d_weight_grad(grad_out.value(), geom);
        let in_hw = (self.shape()[2], self.shape()[3]);
        Var::from_op(
            value,
            vec![self.clone(), grad_out.clone()],
            Box::new(move |g, p, n| {
                vec![
                    n[0].then(|| p[1].conv_transpose2d(g, geom, in_hw)),
                    n[1].then(|| p[0].conv2d(g, geom)),
                ]
            }),
        )
    }
}

fn safe_recip<T: Scalar>(a: T) -> T {
    if a == T::zero() {
        T::zero()
    } else {
        T::one() / a
    }
}

/// Gradients of a single-element `output` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable;
/// otherwise they are constants. An entry is `None` when `output` does not
/// depend on that input.
pub fn grad<T: Scalar>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
    if !output.requires_grad() {
        return vec![None; wrt.len()];
    }
    let order = topo_order(output);
    // Only nodes with a path to some `wrt` variable carry useful gradients.
    let mut needed: HashSet<u64> = wrt.iter().map(Var::id).collect();
    for node in &order {
        if node.0.parents.iter().any(|p| needed.contains(&p.id())) {
            needed.insert(node.id());
        }
    }
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::full(output.shape(), T::one())));

    for node in order.iter().rev() {
        let Some(backward) = node.0.backward.as_ref() else {
            continue;
        };
        if !needed.contains(&node.id()) {
            continue;
        }
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        let mask: Vec<bool> = node.0.parents.iter().map(|p| needed.contains(&p.id())).collect();
        let parent_grads = if create_graph {
            backward(&g, &node.0.parents, &mask)
        } else {
            // Constant inputs keep the backward computation off the graph.
            let parents: Vec<Var<T>> = node.0.parents.iter().map(|p| Var::constant(p.value().clone())).collect();
            backward(&g.detach(), &parents, &mask)
        };
        for ((parent, pg), need) in node.0.parents.iter().zip(parent_grads).zip(mask) {
            let Some(pg) = pg else { continue };
            if !need {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }
    wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}

fn topo_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // Iterative DFS to stay clear of stack limits on deep graphs.
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.0.parents {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
