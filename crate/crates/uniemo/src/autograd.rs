//! Tape-based reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] records every operation eagerly (define-by-run). Nodes are
//! identified by [`Var`] handles; construction order is topological, so the
//! backward pass is a single reverse sweep. Everything is single-threaded
//! and deterministic: identical inputs and op sequences produce bitwise
//! identical values and gradients.

use ndarray::{ArrayD, Axis, IxDyn, Zip};
use std::sync::Arc;

/// Dynamic-rank tensor of f64. Scalars are rank-0 arrays.
pub type Array = ArrayD<f64>;

/// Arithmetic precision of graph values.
///
/// `Double` keeps full f64 everywhere. `Single` rounds every stored value
/// (leaves and op outputs) to the nearest f32, while intermediate
/// accumulation still happens in f64 — i.e. f32 storage with double
/// accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "double" => Some(Precision::Double),
            "single" => Some(Precision::Single),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::Double => "double",
            Precision::Single => "single",
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
        keepdims: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Select {
        x: Var,
        axis: usize,
        idx: Arc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, if `v` participates in the
    /// differentiable subgraph.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recorded computation tape.
pub struct Graph {
    values: Vec<Array>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    precision: Precision,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape`, undoing broadcasting.
fn unbroadcast(mut g: Array, shape: &[usize]) -> Array {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if g.shape()[i] != d {
            debug_assert_eq!(d, 1, "unbroadcast mismatch");
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn binary_elementwise(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = Array::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn bmm_values(a: &Array, b: &Array) -> Array {
    let (ra, rb) = (a.ndim(), b.ndim());
    assert!(ra >= 2 && rb == ra, "bmm rank mismatch");
    assert_eq!(&a.shape()[..ra - 2], &b.shape()[..rb - 2], "bmm leading dims");
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    assert_eq!(k, k2, "bmm inner dims");
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let a3 = a
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, m, k))
        .unwrap();
    let b3 = b
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, k, n))
        .unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    let mut shape: Vec<usize> = a.shape()[..ra - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn matmul2(a: &Array, b: &Array) -> Array {
    let a2 = a
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("matmul lhs must be 2-d");
    let b2 = b
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("matmul rhs must be 2-d");
    a2.dot(&b2).into_dyn()
}

fn softmax_values(x: &Array, axis: usize) -> Array {
    let mut out = x.to_owned();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn push(&mut self, mut value: Array, op: Op, requires: bool) -> Var {
        if self.precision == Precision::Single {
            value.mapv_inplace(|v| v as f32 as f64);
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Insert a leaf node. `requires_grad` marks it as a differentiation
    /// target (parameters and checked inputs); constants should pass false.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.values[v.0]
    }

    /// Value of a single-element node as a plain f64.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.values[v.0].len(), 1, "scalar_value on non-scalar");
        self.values[v.0].iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_elementwise(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_elementwise(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_elementwise(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary_elementwise(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Div(a, b), r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| -x);
        let r = self.req(a);
        self.push(v, Op::Neg(a), r)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + c);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul2(&self.values[a.0], &self.values[b.0]);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Matmul(a, b), r)
    }

    /// Batched matrix product over matching leading dimensions.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let v = bmm_values(&self.values[a.0], &self.values[b.0]);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Bmm(a, b), r)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let r = self.req(a);
        self.push(v, Op::Permute(a, axes.to_vec()), r)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let r = self.req(a);
        self.push(v, Op::Reshape(a), r)
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array::from_elem(IxDyn(&[]), self.values[a.0].sum());
        let r = self.req(a);
        self.push(v, Op::SumAll(a), r)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdims: bool) -> Var {
        let mut v = self.values[a.0].sum_axis(Axis(axis));
        if keepdims {
            v = v.insert_axis(Axis(axis));
        }
        let r = self.req(a);
        self.push(v, Op::SumAxis { x: a, axis, keepdims }, r)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdims: bool) -> Var {
        let n = self.values[a.0].shape()[axis] as f64;
        let s = self.sum_axis(a, axis, keepdims);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let v = softmax_values(&self.values[a.0], axis);
        let r = self.req(a);
        self.push(v, Op::Softmax { x: a, axis }, r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::exp);
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        let r = self.req(a);
        self.push(v, Op::Ln(a), r)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::sqrt);
        let r = self.req(a);
        self.push(v, Op::Sqrt(a), r)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * x);
        let r = self.req(a);
        self.push(v, Op::Square(a), r)
    }

    /// Gather sub-arrays along `axis` in the given index order. Indices may
    /// repeat; the backward pass scatter-adds.
    pub fn select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Var {
        let v = self.values[a.0].select(Axis(axis), idx);
        let r = self.req(a);
        self.push(
            v,
            Op::Select {
                x: a,
                axis,
                idx: Arc::new(idx.to_vec()),
            },
            r,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let r = parts.iter().any(|p| self.req(*p));
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            r,
        )
    }

    // --- compositions ---

    /// Swish activation: `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let x2 = self.square(a);
        let x3 = self.mul(x2, a);
        let inner = self.scale(x3, 0.044715);
        let sum = self.add(a, inner);
        let scaled = self.scale(sum, C);
        let t = self.tanh(scaled);
        let one_plus = self.add_scalar(t, 1.0);
        let half_x = self.scale(a, 0.5);
        self.mul(half_x, one_plus)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let axis = self.shape(x).len() - 1;
        let mean = self.mean_axis(x, axis, true);
        let centered = self.sub(x, mean);
        let sq = self.square(centered);
        let var = self.mean_axis(sq, axis, true);
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let normed = self.div(centered, std);
        let scaled = self.mul(normed, gamma);
        self.add(scaled, beta)
    }

    /// Affine map along the last axis: `x @ w + b`. Accepts rank-2 or
    /// rank-3 `x`; `w` is `[in, out]`, `b` is `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xsh = self.shape(x).to_vec();
        let (w_in, w_out) = {
            let ws = self.shape(w);
            assert_eq!(ws.len(), 2, "affine weight must be 2-d");
            (ws[0], ws[1])
        };
        let d_in = *xsh.last().expect("affine input rank");
        assert_eq!(d_in, w_in, "affine input width {} vs weight {}", d_in, w_in);
        let rows: usize = xsh[..xsh.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, d_in]);
        let prod = self.matmul(flat, w);
        let mut out_shape = xsh;
        *out_shape.last_mut().unwrap() = w_out;
        let shaped = self.reshape(prod, &out_shape);
        self.add(shaped, b)
    }

    /// Reverse sweep from a rank-0 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Array>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array::from_elem(self.values[root.0].raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.requires[i] {
                continue;
            }
            let g = grads[i].clone().unwrap();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, unbroadcast(g.clone(), self.shape(*a)));
                    self.acc(&mut grads, *b, unbroadcast(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, unbroadcast(g.clone(), self.shape(*a)));
                    self.acc(&mut grads, *b, unbroadcast(g.mapv(|v| -v), self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = binary_elementwise(&g, &self.values[b.0], |x, y| x * y);
                    let gb = binary_elementwise(&g, &self.values[a.0], |x, y| x * y);
                    self.acc(&mut grads, *a, unbroadcast(ga, self.shape(*a)));
                    self.acc(&mut grads, *b, unbroadcast(gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let ga = binary_elementwise(&g, &self.values[b.0], |x, y| x / y);
                    let gy = binary_elementwise(&g, &self.values[i], |x, y| x * y);
                    let gb = binary_elementwise(&gy, &self.values[b.0], |x, y| -x / y);
                    self.acc(&mut grads, *a, unbroadcast(ga, self.shape(*a)));
                    self.acc(&mut grads, *b, unbroadcast(gb, self.shape(*b)));
                }
                Op::Neg(a) => self.acc(&mut grads, *a, g.mapv(|v| -v)),
                Op::Scale(a, c) => self.acc(&mut grads, *a, g.mapv(|v| v * c)),
                Op::AddScalar(a) => self.acc(&mut grads, *a, g),
                Op::Matmul(a, b) => {
                    let ga = matmul2(&g, &self.values[b.0].t().as_standard_layout().into_owned());
                    let gb = matmul2(&self.values[a.0].t().as_standard_layout().into_owned(), &g);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Bmm(a, b) => {
                    let bt = transpose_last2(&self.values[b.0]);
                    let at = transpose_last2(&self.values[a.0]);
                    self.acc(&mut grads, *a, bmm_values(&g, &bt));
                    self.acc(&mut grads, *b, bmm_values(&at, &g));
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0usize; axes.len()];
                    for (to, &from) in axes.iter().enumerate() {
                        inv[from] = to;
                    }
                    let ga = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(self.shape(*a)))
                        .unwrap();
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g.iter().next().copied().unwrap();
                    self.acc(
                        &mut grads,
                        *a,
                        Array::from_elem(IxDyn(self.shape(*a)), gv),
                    );
                }
                Op::SumAxis { x, axis, keepdims } => {
                    let gk = if *keepdims { g } else { g.insert_axis(Axis(*axis)) };
                    let ga = gk
                        .broadcast(IxDyn(self.shape(*x)))
                        .expect("sum_axis backward broadcast")
                        .to_owned();
                    self.acc(&mut grads, *x, ga);
                }
                Op::Softmax { x, axis } => {
                    let y = &self.values[i];
                    let gy = binary_elementwise(&g, y, |a, b| a * b);
                    let dot = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    let shifted = binary_elementwise(&g, &dot, |a, b| a - b);
                    let gx = binary_elementwise(&shifted, y, |a, b| a * b);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Relu(a) => {
                    let gx = binary_elementwise(&g, &self.values[a.0], |gv, x| {
                        if x > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.acc(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let gx =
                        binary_elementwise(&g, &self.values[i], |gv, y| gv * y * (1.0 - y));
                    self.acc(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = binary_elementwise(&g, &self.values[i], |gv, y| gv * (1.0 - y * y));
                    self.acc(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    let gx = binary_elementwise(&g, &self.values[i], |gv, y| gv * y);
                    self.acc(&mut grads, *a, gx);
                }
                Op::Ln(a) => {
                    let gx = binary_elementwise(&g, &self.values[a.0], |gv, x| gv / x);
                    self.acc(&mut grads, *a, gx);
                }
                Op::Sqrt(a) => {
                    let gx = binary_elementwise(&g, &self.values[i], |gv, y| gv * 0.5 / y);
                    self.acc(&mut grads, *a, gx);
                }
                Op::Square(a) => {
                    let gx = binary_elementwise(&g, &self.values[a.0], |gv, x| gv * 2.0 * x);
                    self.acc(&mut grads, *a, gx);
                }
                Op::Select { x, axis, idx } => {
                    let mut gx = Array::zeros(IxDyn(self.shape(*x)));
                    for (j, &src) in idx.iter().enumerate() {
                        let mut dst = gx.index_axis_mut(Axis(*axis), src);
                        dst += &g.index_axis(Axis(*axis), j);
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        let slice = g
                            .slice_axis(
                                Axis(*axis),
                                ndarray::Slice::from(offset..offset + len),
                            )
                            .to_owned();
                        self.acc(&mut grads, *p, slice);
                        offset += len;
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.requires[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => *e += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

fn transpose_last2(a: &Array) -> Array {
    let n = a.ndim();
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    a.view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .into_owned()
}
