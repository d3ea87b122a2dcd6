//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written with [`Var`] operations, so a
//! gradient computed with `create_graph = true` can be differentiated again.
//! The R1 penalty relies on this.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, Window};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched to `enabled`, restoring it afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[Var<T>], &Var<T>) -> Vec<Option<Var<T>>>>;

struct GradFn<T: Scalar> {
    name: &'static str,
    inputs: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A tensor that remembers how it was computed.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn node(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// Leaf that gradients are accumulated for.
    pub fn param(value: Tensor<T>) -> Self {
        Self::node(value, true, None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::node(value, false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn from_op(
        name: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        backward: impl Fn(&Var<T>, &[Var<T>], &Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        if grad_enabled() && inputs.iter().any(Var::requires_grad) {
            Self::node(
                value,
                true,
                Some(GradFn {
                    name,
                    inputs,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
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

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    // -- elementwise binary ------------------------------------------------

    fn broadcast_binary(
        &self,
        other: &Self,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&Var<T>, &[Var<T>], &Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        let value = self
            .value()
            .zip_map(other.value(), f)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        Self::from_op(name, value, vec![self.clone(), other.clone()], backward)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.broadcast_binary(other, "add", |a, b| a + b, |g, x, _| {
            vec![Some(g.sum_to(x[0].shape())), Some(g.sum_to(x[1].shape()))]
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.broadcast_binary(other, "sub", |a, b| a - b, |g, x, _| {
            vec![
                Some(g.sum_to(x[0].shape())),
                Some(g.neg().sum_to(x[1].shape())),
            ]
        })
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.broadcast_binary(other, "mul", |a, b| a * b, |g, x, _| {
            vec![
                Some(g.mul(&x[1]).sum_to(x[0].shape())),
                Some(g.mul(&x[0]).sum_to(x[1].shape())),
            ]
        })
    }

    pub fn div(&self, other: &Self) -> Self {
        self.broadcast_binary(other, "div", |a, b| a / b, |g, x, out| {
            vec![
                Some(g.div(&x[1]).sum_to(x[0].shape())),
                Some(g.mul(out).div(&x[1]).neg().sum_to(x[1].shape())),
            ]
        })
    }

    // -- elementwise unary -------------------------------------------------

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        backward: impl Fn(&Var<T>, &[Var<T>], &Var<T>) -> Vec<Option<Var<T>>> + 'static,
    ) -> Self {
        Self::from_op(name, self.value().map(f), vec![self.clone()], backward)
    }

    pub fn neg(&self) -> Self {
        self.unary("neg", |a| -a, |g, _, _| vec![Some(g.neg())])
    }

    pub fn scale(&self, factor: T) -> Self {
        self.unary("scale", move |a| a * factor, move |g, _, _| {
            vec![Some(g.scale(factor))]
        })
    }

    pub fn add_scalar(&self, offset: T) -> Self {
        self.unary("add_scalar", move |a| a + offset, |g, _, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Self {
        self.unary("exp", T::exp, |g, _, out| vec![Some(g.mul(out))])
    }

    pub fn ln(&self) -> Self {
        self.unary("ln", T::ln, |g, x, _| vec![Some(g.div(&x[0]))])
    }

    pub fn sqrt(&self) -> Self {
        self.unary("sqrt", T::sqrt, |g, _, out| {
            vec![Some(g.div(&out.scale(T::lit(2.0))))]
        })
    }

    pub fn square(&self) -> Self {
        self.unary("square", |a| a * a, |g, x, _| {
            vec![Some(g.mul(&x[0].scale(T::lit(2.0))))]
        })
    }

    pub fn tanh(&self) -> Self {
        self.unary("tanh", T::tanh, |g, _, out| {
            vec![Some(g.sub(&g.mul(&out.square())))]
        })
    }

    pub fn sigmoid(&self) -> Self {
        self.unary("sigmoid", sigmoid, |g, _, out| {
            let slope = out.sub(&out.square());
            vec![Some(g.mul(&slope))]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        self.unary("softplus", softplus, |g, x, _| vec![Some(g.mul(&x[0].sigmoid()))])
    }

    pub fn abs(&self) -> Self {
        self.unary("abs", T::abs, |g, x, _| {
            let sign = x[0].value().map(|v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            vec![Some(g.mul(&Var::constant(sign)))]
        })
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.unary(
            "leaky_relu",
            move |a| if a > T::zero() { a } else { a * slope },
            move |g, x, _| {
                let mask = x[0]
                    .value()
                    .map(|v| if v > T::zero() { T::one() } else { slope });
                vec![Some(g.mul(&Var::constant(mask)))]
            },
        )
    }

    /// Rounds to the nearest multiple of `step` (ties away from zero) in the
    /// forward pass and passes the gradient through unchanged.
    pub fn round_to_step_ste(&self, step: T) -> Self {
        self.unary(
            "round_ste",
            move |a| (a / step).round() * step,
            |g, _, _| vec![Some(g.clone())],
        )
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let value = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        Self::from_op("reshape", value, vec![self.clone()], |g, x, _| {
            vec![Some(g.reshape(x[0].shape()))]
        })
    }

    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let value = tensor::sum_to(self.value(), shape);
        Self::from_op("sum_to", value, vec![self.clone()], |g, x, _| {
            vec![Some(g.broadcast_to(x[0].shape()))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let value = tensor::broadcast_to(self.value(), shape);
        Self::from_op("broadcast_to", value, vec![self.clone()], |g, x, _| {
            vec![Some(g.sum_to(x[0].shape()))]
        })
    }

    pub fn sum(&self) -> Self {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Self {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Mean over `axes`, keeping them as size-1 axes.
    pub fn mean_keep(&self, axes: &[usize]) -> Self {
        let mut shape = self.shape().to_vec();
        let mut count = 1;
        for &a in axes {
            count *= shape[a];
            shape[a] = 1;
        }
        self.sum_to(&shape)
            .scale(T::one() / T::from_usize(count).unwrap())
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let value = tensor::narrow(self.value(), axis, start, len);
        Self::from_op("narrow", value, vec![self.clone()], move |g, x, _| {
            vec![Some(g.embed(axis, start, x[0].shape()[axis]))]
        })
    }

    fn embed(&self, axis: usize, start: usize, total: usize) -> Self {
        let len = self.shape()[axis];
        let value = tensor::embed(self.value(), axis, start, total);
        Self::from_op("embed", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let value = tensor::concat(&values, axis).unwrap_or_else(|e| panic!("concat: {e}"));
        Self::from_op("concat", value, parts.to_vec(), move |g, x, _| {
            let mut start = 0;
            x.iter()
                .map(|p| {
                    let len = p.shape()[axis];
                    let part = g.narrow(axis, start, len);
                    start += len;
                    Some(part)
                })
                .collect()
        })
    }

    // -- linear algebra and image ops ---------------------------------------

    /// Batched `op(self) @ op(other)`; see [`tensor::matmul`].
    pub fn matmul_t(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let value = tensor::matmul(self.value(), other.value(), ta, tb)
            .unwrap_or_else(|e| panic!("matmul: {e}"));
        Self::from_op(
            "matmul",
            value,
            vec![self.clone(), other.clone()],
            move |g, x, _| {
                let (a, b) = (&x[0], &x[1]);
                let ga = if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                };
                let gb = if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                };
                vec![Some(ga.sum_to(a.shape())), Some(gb.sum_to(b.shape()))]
            },
        )
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(other, false, false)
    }

    pub fn im2col(&self, win: Window) -> Self {
        let value = tensor::im2col(self.value(), win);
        Self::from_op("im2col", value, vec![self.clone()], move |g, x, _| {
            let dims = x[0].value().dims4().expect("4-d");
            vec![Some(g.col2im(dims, win))]
        })
    }

    fn col2im(&self, dims: [usize; 4], win: Window) -> Self {
        let value = tensor::col2im(self.value(), dims, win);
        Self::from_op("col2im", value, vec![self.clone()], move |g, _, _| {
            vec![Some(g.im2col(win))]
        })
    }

    /// Block-mean pooling; panics if `factor` does not divide the spatial size.
    pub fn avg_pool(&self, factor: usize) -> Self {
        let value = tensor::avg_pool(self.value(), factor).unwrap_or_else(|e| panic!("{e}"));
        Self::from_op("avg_pool", value, vec![self.clone()], move |g, _, _| {
            let inv = T::one() / T::from_usize(factor * factor).unwrap();
            vec![Some(g.upsample_nearest(factor).scale(inv))]
        })
    }

    pub fn upsample_nearest(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        let value = tensor::upsample_nearest(self.value(), factor);
        Self::from_op("upsample_nearest", value, vec![self.clone()], move |g, _, _| {
            let area = T::from_usize(factor * factor).unwrap();
            vec![Some(g.avg_pool(factor).scale(area))]
        })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get `None`. With `create_graph`
/// the returned gradients are themselves differentiable.
pub fn grad<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    assert_eq!(
        output.value().numel(),
        1,
        "gradients are taken of scalar outputs"
    );
    with_grad_mode(create_graph, || {
        let order = topological_order(output);
        let wanted: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
        let mut grads: HashMap<usize, Var<T>> = HashMap::new();
        let mut found: HashMap<usize, Var<T>> = HashMap::new();
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if wanted.contains(&node.id()) {
                found.insert(node.id(), g.clone());
            }
            let Some(grad_fn) = &node.0.grad_fn else {
                continue;
            };
            let input_grads = (grad_fn.backward)(&g, &grad_fn.inputs, node);
            for (input, ig) in grad_fn.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.shape(), input.shape(), "gradient shape of {}", grad_fn.name);
                let merged = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), merged);
            }
        }
        wrt.iter().map(|v| found.remove(&v.id())).collect()
    })
}

/// Gradients as plain tensors, zero where `output` does not depend on an input.
pub fn grad_values<T: Scalar>(output: &Var<T>, wrt: &[&Var<T>]) -> Vec<Tensor<T>> {
    grad(output, wrt, false)
        .into_iter()
        .zip(wrt)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(v.shape()),
        })
        .collect()
}

fn topological_order<T: Scalar>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !node.requires_grad() || !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(grad_fn) = &node.0.grad_fn {
            for input in &grad_fn.inputs {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Central-difference gradient checking, used by the test suites.
pub mod check {
    use super::*;

    /// Normwise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
    pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
        let scale = na.sqrt().max(nb.sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        }
    }

    /// Numerical gradient of `f` at `inputs[which]`.
    pub fn numerical_gradient(
        f: &dyn Fn(&[Var<f64>]) -> Var<f64>,
        inputs: &[Tensor<f64>],
        which: usize,
        step: f64,
    ) -> Tensor<f64> {
        let base = &inputs[which];
        let mut out = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let eval = |delta: f64| {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == which {
                            let mut data = t.to_vec();
                            data[i] += delta;
                            Var::constant(Tensor::from_vec(t.shape(), data).unwrap())
                        } else {
                            Var::constant(t.clone())
                        }
                    })
                    .collect();
                no_grad(|| f(&vars).item())
            };
            out.push((eval(step) - eval(-step)) / (2.0 * step));
        }
        Tensor::from_vec(base.shape(), out).unwrap()
    }

    /// Largest normwise relative error between analytic and central-difference
    /// gradients over all `inputs`.
    pub fn max_gradient_error(
        f: &dyn Fn(&[Var<f64>]) -> Var<f64>,
        inputs: &[Tensor<f64>],
        step: f64,
    ) -> Result<f64> {
        let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::param).collect();
        let out = f(&vars);
        let refs: Vec<&Var<f64>> = vars.iter().collect();
        let analytic = grad_values(&out, &refs);
        let mut worst: f64 = 0.0;
        for (k, a) in analytic.iter().enumerate() {
            let numeric = numerical_gradient(f, inputs, k, step);
            worst = worst.max(relative_error(a, &numeric));
        }
        Ok(worst)
    }
}
