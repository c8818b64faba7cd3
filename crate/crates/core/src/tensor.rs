//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! The models in this crate are small enough to train on a CPU, but they
//! need exact control over gradient flow (hard stop-gradients), bitwise
//! deterministic execution, and the ability to run the same code in f32
//! and f64 for property tests. A compact tape of [`Tensor`] nodes over
//! `ndarray::Array2` gives us all three; matrix products dispatch to the
//! fast gemm path for both element types.
//!
//! Shapes are always 2-D. Scalars are `1x1`, per-position vectors are
//! `n x 1`, and 3-vector channels are carried as three `n x c` coordinate
//! planes (see [`crate::gvp`]).

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Element type the engine is generic over. Implemented for f32 and f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// A named, trainable parameter. Gradients accumulate into the slot when
/// a graph containing its leaf tensors is backpropagated.
pub struct ParamSlot<F: Scalar> {
    name: String,
    value: RefCell<Array2<F>>,
    grad: RefCell<Array2<F>>,
}

/// Shared handle to a parameter.
pub type Param<F> = Rc<ParamSlot<F>>;

impl<F: Scalar> ParamSlot<F> {
    pub fn new(name: impl Into<String>, value: Array2<F>) -> Param<F> {
        let grad = Array2::zeros(value.raw_dim());
        Rc::new(ParamSlot {
            name: name.into(),
            value: RefCell::new(value),
            grad: RefCell::new(grad),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value.borrow();
        (v.nrows(), v.ncols())
    }

    pub fn value(&self) -> Array2<F> {
        self.value.borrow().clone()
    }

    pub fn set_value(&self, v: Array2<F>) {
        assert_eq!(
            v.raw_dim(),
            self.value.borrow().raw_dim(),
            "param {}: shape change rejected",
            self.name
        );
        *self.value.borrow_mut() = v;
    }

    pub fn grad(&self) -> Array2<F> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(F::zero());
    }

    pub fn add_grad(&self, g: ArrayView2<F>) {
        let mut grad = self.grad.borrow_mut();
        assert_eq!(
            grad.raw_dim(),
            g.raw_dim(),
            "param {}: grad shape",
            self.name
        );
        *grad += &g;
    }

    /// In-place update `value -= delta`, used by the optimizer.
    pub fn apply_delta(&self, delta: &Array2<F>) {
        let mut v = self.value.borrow_mut();
        *v -= delta;
    }

    /// Leaf tensor snapshotting the current value. Backward accumulates
    /// into this slot's gradient.
    pub fn leaf(self: &Param<F>) -> Tensor<F> {
        let slot = Rc::clone(self);
        Tensor::new_node(
            self.value(),
            true,
            vec![],
            Some(Box::new(move |g, _| slot.add_grad(g.view()))),
        )
    }
}

type BackwardFn<F> = Box<dyn Fn(&Array2<F>, &[Tensor<F>])>;

struct Node<F: Scalar> {
    data: Array2<F>,
    grad: RefCell<Option<Array2<F>>>,
    needs_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// One node of the autodiff tape.
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor[{}x{}, grad={}]",
            self.nrows(),
            self.ncols(),
            self.0.needs_grad
        )
    }
}

impl<F: Scalar> Tensor<F> {
    fn new_node(
        data: Array2<F>,
        needs_grad: bool,
        parents: Vec<Tensor<F>>,
        backward: Option<BackwardFn<F>>,
    ) -> Self {
        Tensor(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            needs_grad,
            parents,
            backward,
        }))
    }

    /// Constant input: participates in computation, receives no gradient.
    pub fn constant(data: Array2<F>) -> Self {
        Tensor::new_node(data, false, vec![], None)
    }

    /// Gradient-tracked leaf that is not a named parameter. Its gradient
    /// stays on the node and can be read back after `backward`.
    pub fn variable(data: Array2<F>) -> Self {
        Tensor::new_node(data, true, vec![], None)
    }

    pub fn scalar(x: F) -> Self {
        Tensor::constant(Array2::from_elem((1, 1), x))
    }

    pub fn data(&self) -> &Array2<F> {
        &self.0.data
    }

    pub fn nrows(&self) -> usize {
        self.0.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.data.ncols()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.0.data.len(), 1, "item() on non-scalar tensor");
        self.0.data[(0, 0)]
    }

    /// Gradient accumulated on this node (leaves keep theirs after
    /// backward; interior nodes also retain them for inspection).
    pub fn grad(&self) -> Option<Array2<F>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate(&self, g: &Array2<F>) {
        if !self.0.needs_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Cut the tape: same values, no parents, no gradient flow.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::constant(self.0.data.clone())
    }

    /// Backpropagate from a scalar (1x1) output.
    pub fn backward(&self) {
        assert_eq!(self.0.data.len(), 1, "backward() requires a scalar output");
        self.accumulate(&Array2::from_elem((1, 1), F::one()));
        // Force the seed in even if needs_grad is false-positive-free:
        if !self.0.needs_grad {
            return;
        }
        let order = self.topo_order();
        for t in order.iter().rev() {
            let g = t.0.grad.borrow().clone();
            if let (Some(g), Some(back)) = (g, t.0.backward.as_ref()) {
                back(&g, &t.0.parents);
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor<F>> {
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: HashSet<*const Node<F>> = HashSet::new();
        // Iterative post-order DFS; recursion would overflow on deep tapes.
        let mut stack: Vec<(Tensor<F>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.0.parents.len() {
                let child = node.0.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if child.0.needs_grad && visited.insert(Rc::as_ptr(&child.0)) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.0.data.raw_dim(), other.0.data.raw_dim(), "add: shape");
        let data = &self.0.data + &other.0.data;
        binary(self, other, data, |g, _, _| {
            (Some(g.clone()), Some(g.clone()))
        })
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.0.data.raw_dim(), other.0.data.raw_dim(), "sub: shape");
        let data = &self.0.data - &other.0.data;
        binary(self, other, data, |g, _, _| {
            (Some(g.clone()), Some(-g.clone()))
        })
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.0.data.raw_dim(), other.0.data.raw_dim(), "mul: shape");
        let data = &self.0.data * &other.0.data;
        binary(self, other, data, |g, a, b| (Some(g * b), Some(g * a)))
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.0.data.raw_dim(), other.0.data.raw_dim(), "div: shape");
        let data = &self.0.data / &other.0.data;
        binary(self, other, data, |g, a, b| {
            let ga = g / b;
            let gb = -(g * a) / (b * b);
            (Some(ga), Some(gb))
        })
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::one())
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        let data = &self.0.data * s;
        unary(self, data, move |g, _| g * s)
    }

    pub fn add_scalar(&self, s: F) -> Tensor<F> {
        let data = &self.0.data + s;
        unary(self, data, |g, _| g.clone())
    }

    pub fn relu(&self) -> Tensor<F> {
        let data = self
            .0
            .data
            .mapv(|x| if x > F::zero() { x } else { F::zero() });
        unary(self, data, |g, a| {
            let mask = a.mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
            g * &mask
        })
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let data = self.0.data.mapv(|x| F::one() / (F::one() + (-x).exp()));
        let y = data.clone();
        unary(self, data, move |g, _| {
            let one = F::one();
            let dy = y.mapv(|v| v * (one - v));
            g * &dy
        })
    }

    pub fn exp(&self) -> Tensor<F> {
        let data = self.0.data.mapv(F::exp);
        let y = data.clone();
        unary(self, data, move |g, _| g * &y)
    }

    pub fn ln(&self) -> Tensor<F> {
        let data = self.0.data.mapv(F::ln);
        unary(self, data, |g, a| g / a)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        let data = self.0.data.mapv(F::sqrt);
        let y = data.clone();
        unary(self, data, move |g, _| {
            let half = F::of_f64(0.5);
            g * &y.mapv(|v| half / v)
        })
    }

    pub fn recip(&self) -> Tensor<F> {
        let data = self.0.data.mapv(|x| F::one() / x);
        let y = data.clone();
        unary(self, data, move |g, _| {
            let dy = y.mapv(|v| -(v * v));
            g * &dy
        })
    }

    // ----- broadcast helpers -----

    /// `self (n x d) + bias (1 x d)` broadcast down rows.
    pub fn add_bias(&self, bias: &Tensor<F>) -> Tensor<F> {
        assert_eq!(bias.nrows(), 1, "add_bias: bias must be 1 x d");
        assert_eq!(self.ncols(), bias.ncols(), "add_bias: width");
        let data = &self.0.data + &bias.0.data;
        binary(self, bias, data, |g, _, _| {
            let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            (Some(g.clone()), Some(gb))
        })
    }

    /// `self (n x d) * s (n x 1)` broadcast across columns.
    pub fn rows_scale(&self, s: &Tensor<F>) -> Tensor<F> {
        assert_eq!(s.ncols(), 1, "rows_scale: scale must be n x 1");
        assert_eq!(self.nrows(), s.nrows(), "rows_scale: height");
        let data = &self.0.data * &s.0.data;
        binary(self, s, data, |g, a, b| {
            let ga = g * b;
            let gs = (g * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            (Some(ga), Some(gs))
        })
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.ncols(), other.nrows(), "matmul: inner dims");
        let data = self.0.data.dot(&other.0.data);
        binary(self, other, data, |g, a, b| {
            let ga = g.dot(&b.t());
            let gb = a.t().dot(g);
            (Some(ga), Some(gb))
        })
    }

    pub fn transpose(&self) -> Tensor<F> {
        let data = self.0.data.t().to_owned();
        unary(self, data, |g, _| g.t().to_owned())
    }

    // ----- shape ops -----

    /// Concatenate along the column axis.
    pub fn concat_cols(parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty());
        let n = parts[0].nrows();
        let widths: Vec<usize> = parts.iter().map(|p| p.ncols()).collect();
        for p in parts {
            assert_eq!(p.nrows(), n, "concat_cols: height");
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|p| p.0.data.view()).collect();
        let data = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let needs = parts.iter().any(|p| p.0.needs_grad);
        let parents: Vec<Tensor<F>> = parts.to_vec();
        let backward: Option<BackwardFn<F>> = if needs {
            Some(Box::new(move |g, parents| {
                let mut off = 0;
                for (p, w) in parents.iter().zip(widths.iter()) {
                    let slice = g.slice(ndarray::s![.., off..off + w]).to_owned();
                    p.accumulate(&slice);
                    off += w;
                }
            }))
        } else {
            None
        };
        Tensor::new_node(data, needs, parents, backward)
    }

    /// Columns `[from, to)`.
    pub fn slice_cols(&self, from: usize, to: usize) -> Tensor<F> {
        assert!(from <= to && to <= self.ncols(), "slice_cols: range");
        let data = self.0.data.slice(ndarray::s![.., from..to]).to_owned();
        let total = self.ncols();
        unary(self, data, move |g, _| {
            let mut full = Array2::zeros((g.nrows(), total));
            full.slice_mut(ndarray::s![.., from..to]).assign(g);
            full
        })
    }

    /// Select rows by index (duplicates allowed). Gradient scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<F> {
        let n = self.nrows();
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of {n}");
        }
        let mut data = Array2::zeros((idx.len(), self.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            data.row_mut(r).assign(&self.0.data.row(i));
        }
        let idx = idx.to_vec();
        unary(self, data, move |g, a| {
            let mut full = Array2::zeros((a.nrows(), a.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = full.row_mut(i);
                row += &g.row(r);
            }
            full
        })
    }

    /// Sum rows of `self (e x d)` into an `out_rows x d` result where row
    /// `dst[e]` receives row `e`. Used for message aggregation.
    pub fn scatter_sum_rows(&self, dst: &[usize], out_rows: usize) -> Tensor<F> {
        assert_eq!(dst.len(), self.nrows(), "scatter_sum_rows: index length");
        for &i in dst {
            assert!(
                i < out_rows,
                "scatter_sum_rows: index {i} out of {out_rows}"
            );
        }
        let mut data = Array2::zeros((out_rows, self.ncols()));
        for (e, &i) in dst.iter().enumerate() {
            let mut row = data.row_mut(i);
            row += &self.0.data.row(e);
        }
        let dst = dst.to_vec();
        unary(self, data, move |g, a| {
            let mut out = Array2::zeros((a.nrows(), a.ncols()));
            for (e, &i) in dst.iter().enumerate() {
                out.row_mut(e).assign(&g.row(i));
            }
            out
        })
    }

    /// Per-row column pick: `out[r, 0] = self[r, idx[r]]`.
    pub fn select_positions(&self, idx: &[usize]) -> Tensor<F> {
        assert_eq!(idx.len(), self.nrows(), "select_positions: index length");
        for &c in idx {
            assert!(c < self.ncols(), "select_positions: column {c}");
        }
        let mut data = Array2::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            data[(r, 0)] = self.0.data[(r, c)];
        }
        let idx = idx.to_vec();
        unary(self, data, move |g, a| {
            let mut full = Array2::zeros((a.nrows(), a.ncols()));
            for (r, &c) in idx.iter().enumerate() {
                full[(r, c)] = g[(r, 0)];
            }
            full
        })
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Tensor<F> {
        let s = self.0.data.sum();
        let (n, d) = (self.nrows(), self.ncols());
        unary(self, Array2::from_elem((1, 1), s), move |g, _| {
            Array2::from_elem((n, d), g[(0, 0)])
        })
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let count = F::of_f64(self.0.data.len() as f64);
        self.sum_all().scale(F::one() / count)
    }

    /// Row sums: `n x d -> n x 1`.
    pub fn sum_cols(&self) -> Tensor<F> {
        let data = self.0.data.sum_axis(Axis(1)).insert_axis(Axis(1));
        let d = self.ncols();
        unary(self, data, move |g, _| {
            let mut out = Array2::zeros((g.nrows(), d));
            for r in 0..out.nrows() {
                out.row_mut(r).fill(g[(r, 0)]);
            }
            out
        })
    }

    /// Column sums: `n x d -> 1 x d`.
    pub fn sum_rows(&self) -> Tensor<F> {
        let data = self.0.data.sum_axis(Axis(0)).insert_axis(Axis(0));
        let n = self.nrows();
        unary(self, data, move |g, _| {
            let mut out = Array2::zeros((n, g.ncols()));
            for r in 0..n {
                out.row_mut(r).assign(&g.row(0));
            }
            out
        })
    }

    // ----- softmax family (numerically stabilized, row-wise) -----

    pub fn softmax_rows(&self) -> Tensor<F> {
        let data = softmax_rows_array(&self.0.data);
        let y = data.clone();
        unary(self, data, move |g, _| {
            // dx = y * (g - rowsum(g * y))
            let gy = g * &y;
            let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut out = g.clone();
            out -= &dot; // broadcasts n x 1 over columns
            out * &y
        })
    }

    pub fn log_softmax_rows(&self) -> Tensor<F> {
        let p = softmax_rows_array(&self.0.data);
        let data = {
            let mut d = self.0.data.clone();
            let lse = logsumexp_rows(&self.0.data);
            for r in 0..d.nrows() {
                let l = lse[r];
                d.row_mut(r).mapv_inplace(|x| x - l);
            }
            d
        };
        unary(self, data, move |g, _| {
            // dx = g - softmax(x) * rowsum(g)
            let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut out = g.clone();
            out -= &(&p * &rs);
            out
        })
    }

    // ----- normalization -----

    /// Row-wise layer normalization with learned affine parameters
    /// (`gamma`, `beta` are `1 x d`).
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Tensor<F> {
        let d = self.ncols();
        assert_eq!(gamma.ncols(), d, "layer_norm: gamma width");
        assert_eq!(beta.ncols(), d, "layer_norm: beta width");
        let x = &self.0.data;
        let df = F::of_f64(d as f64);
        let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / df;
        let centered = x - &mean;
        let var = centered
            .mapv(|v| v * v)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            / df;
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let data = &xhat * &gamma.0.data + &beta.0.data;

        let xhat_c = xhat.clone();
        let inv_std_c = inv_std.clone();
        let gamma_v = gamma.0.data.clone();
        let needs = self.0.needs_grad || gamma.0.needs_grad || beta.0.needs_grad;
        let parents = vec![self.clone(), gamma.clone(), beta.clone()];
        let backward: Option<BackwardFn<F>> = if needs {
            Some(Box::new(move |g, parents| {
                let ggamma = (g * &xhat_c).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                // dL/dx via standard layer-norm backward
                let gxhat = g * &gamma_v;
                let m1 = gxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / df;
                let m2 = (&gxhat * &xhat_c).sum_axis(Axis(1)).insert_axis(Axis(1)) / df;
                let gx = (&gxhat - &m1 - &(&xhat_c * &m2)) * &inv_std_c;
                parents[0].accumulate(&gx);
                parents[1].accumulate(&ggamma);
                parents[2].accumulate(&gbeta);
            }))
        } else {
            None
        };
        Tensor::new_node(data, needs, parents, backward)
    }

    /// Euclidean norm of 3-vector channels stored as coordinate planes:
    /// `sqrt(x^2 + y^2 + z^2 + eps)` elementwise over `n x c` planes.
    pub fn norm3(x: &Tensor<F>, y: &Tensor<F>, z: &Tensor<F>, eps: F) -> Tensor<F> {
        assert_eq!(x.0.data.raw_dim(), y.0.data.raw_dim(), "norm3: shape");
        assert_eq!(x.0.data.raw_dim(), z.0.data.raw_dim(), "norm3: shape");
        let data = ndarray::Zip::from(&x.0.data)
            .and(&y.0.data)
            .and(&z.0.data)
            .map_collect(|&a, &b, &c| (a * a + b * b + c * c + eps).sqrt());
        let out = data.clone();
        let needs = x.0.needs_grad || y.0.needs_grad || z.0.needs_grad;
        let parents = vec![x.clone(), y.clone(), z.clone()];
        let backward: Option<BackwardFn<F>> = if needs {
            Some(Box::new(move |g, parents| {
                let scale = g / &out;
                parents[0].accumulate(&(&scale * parents[0].data()));
                parents[1].accumulate(&(&scale * parents[1].data()));
                parents[2].accumulate(&(&scale * parents[2].data()));
            }))
        } else {
            None
        };
        Tensor::new_node(data, needs, parents, backward)
    }
}

fn unary<F: Scalar>(
    a: &Tensor<F>,
    data: Array2<F>,
    grad_fn: impl Fn(&Array2<F>, &Array2<F>) -> Array2<F> + 'static,
) -> Tensor<F> {
    let needs = a.0.needs_grad;
    let parents = vec![a.clone()];
    let backward: Option<BackwardFn<F>> = if needs {
        Some(Box::new(move |g, parents| {
            let ga = grad_fn(g, parents[0].data());
            parents[0].accumulate(&ga);
        }))
    } else {
        None
    };
    Tensor::new_node(data, needs, parents, backward)
}

#[allow(clippy::type_complexity)]
fn binary<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    data: Array2<F>,
    grad_fn: impl Fn(&Array2<F>, &Array2<F>, &Array2<F>) -> (Option<Array2<F>>, Option<Array2<F>>)
        + 'static,
) -> Tensor<F> {
    let needs = a.0.needs_grad || b.0.needs_grad;
    let parents = vec![a.clone(), b.clone()];
    let backward: Option<BackwardFn<F>> = if needs {
        Some(Box::new(move |g, parents| {
            let (ga, gb) = grad_fn(g, parents[0].data(), parents[1].data());
            if let Some(ga) = ga {
                parents[0].accumulate(&ga);
            }
            if let Some(gb) = gb {
                parents[1].accumulate(&gb);
            }
        }))
    } else {
        None
    };
    Tensor::new_node(data, needs, parents, backward)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows_array<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.iter().cloned().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn logsumexp_rows<F: Scalar>(x: &Array2<F>) -> Array1<F> {
    let mut out = Array1::zeros(x.nrows());
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        out[r] = max + sum.ln();
    }
    out
}

/// Central finite-difference gradient of `loss` with respect to `param`,
/// used to verify analytic gradients.
pub fn finite_diff_grad<F: Scalar>(
    param: &Param<F>,
    step: f64,
    mut loss: impl FnMut() -> f64,
) -> Array2<f64> {
    let base = param.value();
    let (n, d) = (base.nrows(), base.ncols());
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        for c in 0..d {
            let mut plus = base.clone();
            plus[(r, c)] += F::of_f64(step);
            param.set_value(plus);
            let lp = loss();
            let mut minus = base.clone();
            minus[(r, c)] -= F::of_f64(step);
            param.set_value(minus);
            let lm = loss();
            out[(r, c)] = (lp - lm) / (2.0 * step);
        }
    }
    param.set_value(base);
    out
}

/// Max relative error between an analytic gradient and a finite-difference
/// reference, with an absolute floor to avoid dividing by ~0.
pub fn max_rel_err<F: Scalar>(analytic: &Array2<F>, reference: &Array2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference.iter()) {
        let a = a.into_f64();
        let denom = r.abs().max(1e-3);
        let err = (a - r).abs() / denom;
        worst = worst.max(err);
    }
    worst
}
