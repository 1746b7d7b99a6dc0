//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records eager tensor operations as a Wengert list. Every value
//! is an `ndarray::Array2` (scalars are 1×1, row vectors 1×D), every op pushes
//! one node holding the result plus a backward closure that scatters the
//! incoming gradient to its parents. [`Tape::backward`] walks the list in
//! reverse and returns a [`GradStore`] with gradients for the leaves.
//!
//! The engine is generic over [`Scalar`] so the same graph code runs in `f32`
//! for training and in `f64` for finite-difference verification.

use std::fmt::{Debug, Display};
use std::rc::Rc;

use ndarray::{s, Array2, LinalgScalar};
use num_traits::Float;

/// Element type a tape can differentiate through.
pub trait Scalar: LinalgScalar + Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<S> = Box<dyn Fn(&Array2<S>, &mut GradStore<S>)>;

struct Node<S: Scalar> {
    value: Rc<Array2<S>>,
    back: Option<BackwardFn<S>>,
}

/// Gradients indexed by node id, populated during [`Tape::backward`].
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> GradStore<S> {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array2<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<S>> {
        self.grads[v.0].take()
    }

    fn accumulate(&mut self, id: usize, g: Array2<S>) {
        match &mut self.grads[id] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `g` into the rectangle of the target gradient starting at
    /// (`row0`, `col0`); the target has shape `shape`.
    fn accumulate_region(
        &mut self,
        id: usize,
        shape: (usize, usize),
        row0: usize,
        col0: usize,
        g: &Array2<S>,
    ) {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Array2::zeros(shape));
        }
        let acc = slot.as_mut().unwrap();
        let mut view = acc.slice_mut(s![row0..row0 + g.nrows(), col0..col0 + g.ncols()]);
        view.zip_mut_with(g, |a, &b| *a = *a + b);
    }

    fn accumulate_fill(&mut self, id: usize, shape: (usize, usize), value: S) {
        match &mut self.grads[id] {
            Some(acc) => acc.mapv_inplace(|x| x + value),
            slot @ None => *slot = Some(Array2::from_elem(shape, value)),
        }
    }
}

/// Eagerly evaluated computation graph.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Array2<S>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Array2<S>, back: Option<BackwardFn<S>>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input node. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Array2<S>) -> Var {
        self.push(value, None)
    }

    /// 1×1 leaf holding a scalar.
    pub fn scalar(&mut self, value: S) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[(0, 0)]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        let out = &*av + &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.clone());
                store.accumulate(bi, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.dim(), bv.dim(), "sub: shape mismatch");
        let out = &*av - &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.clone());
                store.accumulate(bi, g.mapv(|x| -x));
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.dim(), bv.dim(), "mul: shape mismatch");
        let out = &*av * &*bv;
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g * &*bv);
                store.accumulate(bi, g * &*av);
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| -x);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.mapv(|x| -x));
            })),
        )
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x * c);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.mapv(|x| x * c));
            })),
        )
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x + c);
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.clone());
            })),
        )
    }

    /// Broadcast add of a 1×D row vector to every row of a T×D matrix.
    pub fn add_rowvec(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.rc(a), self.rc(r));
        assert_eq!(rv.nrows(), 1, "add_rowvec: r must be 1×D");
        assert_eq!(av.ncols(), rv.ncols(), "add_rowvec: width mismatch");
        let out = &*av + &rv.row(0);
        let (ai, ri) = (a.0, r.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.clone());
                let col_sum = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                store.accumulate(ri, col_sum);
            })),
        )
    }

    /// Broadcast elementwise product with a 1×D row vector.
    pub fn mul_rowvec(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.rc(a), self.rc(r));
        assert_eq!(rv.nrows(), 1, "mul_rowvec: r must be 1×D");
        assert_eq!(av.ncols(), rv.ncols(), "mul_rowvec: width mismatch");
        let out = &*av * &rv.row(0);
        let (ai, ri) = (a.0, r.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g * &rv.row(0));
                let gr = (g * &*av)
                    .sum_axis(ndarray::Axis(0))
                    .insert_axis(ndarray::Axis(0));
                store.accumulate(ri, gr);
            })),
        )
    }

    /// Matrix product A·B.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
        let out = av.dot(&*bv);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.dot(&bv.t()));
                store.accumulate(bi, av.t().dot(g));
            })),
        )
    }

    /// Matrix product A·Bᵀ (B given untransposed, n×k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt: inner dim mismatch");
        let out = av.dot(&bv.t());
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.dot(&*bv));
                store.accumulate(bi, g.t().dot(&*av));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(sigmoid_scalar);
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let one = S::one();
                store.accumulate(ai, g * &yv.mapv(|y| y * (one - y)));
            })),
        )
    }

    /// Sigmoid with the output clamped to `[lo, 1 − lo]`; the gradient is zero
    /// on the clamped region. Keeps squashed scores strictly inside an open
    /// interval even in f32.
    pub fn sigmoid_clamped(&mut self, a: Var, lo: S) -> Var {
        let av = self.rc(a);
        let hi = S::one() - lo;
        let out = av.mapv(|x| {
            let y = sigmoid_scalar(x);
            if y < lo {
                lo
            } else if y > hi {
                hi
            } else {
                y
            }
        });
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let one = S::one();
                let factor = yv.mapv(|y| {
                    if y <= lo || y >= hi {
                        S::zero()
                    } else {
                        y * (one - y)
                    }
                });
                store.accumulate(ai, g * &factor);
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.tanh());
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let one = S::one();
                store.accumulate(ai, g * &yv.mapv(|y| one - y * y));
            })),
        )
    }

    /// SiLU activation x·σ(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x * sigmoid_scalar(x));
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let one = S::one();
                let factor = av.mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (one + x * (one - s))
                });
                store.accumulate(ai, g * &factor);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.exp());
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g * &*yv);
            })),
        )
    }

    /// Elementwise square root. The caller must keep inputs away from zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.sqrt());
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let two = S::from_f64(2.0);
                store.accumulate(ai, g / &yv.mapv(|y| two * y));
            })),
        )
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x.abs());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let sign = av.mapv(|x| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                store.accumulate(ai, g * &sign);
            })),
        )
    }

    /// Elementwise max(0, x); subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| if x > S::zero() { x } else { S::zero() });
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mask = av.mapv(|x| if x > S::zero() { S::one() } else { S::zero() });
                store.accumulate(ai, g * &mask);
            })),
        )
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = Array2::from_elem((1, 1), av.sum());
        let ai = a.0;
        let shape = av.dim();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate_fill(ai, shape, g[(0, 0)]);
            })),
        )
    }

    /// Mean of all entries as a 1×1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let n = S::from_f64((av.nrows() * av.ncols()) as f64);
        let out = Array2::from_elem((1, 1), av.sum() / n);
        let ai = a.0;
        let shape = av.dim();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate_fill(ai, shape, g[(0, 0)] / n);
            })),
        )
    }

    /// Column means: T×D → 1×D.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let t = S::from_f64(av.nrows() as f64);
        let out = av
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0))
            .mapv(|x| x / t);
        let ai = a.0;
        let rows = av.nrows();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let grow = g.mapv(|x| x / t);
                let mut full = Array2::zeros((rows, g.ncols()));
                for mut row in full.rows_mut() {
                    row.assign(&grow.row(0));
                }
                store.accumulate(ai, full);
            })),
        )
    }

    /// Rows `[r0, r1)` of a matrix.
    pub fn row_slice(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = self.rc(a);
        assert!(r0 < r1 && r1 <= av.nrows(), "row_slice: bad range");
        let out = av.slice(s![r0..r1, ..]).to_owned();
        let ai = a.0;
        let shape = av.dim();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate_region(ai, shape, r0, 0, g);
            })),
        )
    }

    /// Columns `[c0, c1)` of a matrix.
    pub fn col_slice(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let av = self.rc(a);
        assert!(c0 < c1 && c1 <= av.ncols(), "col_slice: bad range");
        let out = av.slice(s![.., c0..c1]).to_owned();
        let ai = a.0;
        let shape = av.dim();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate_region(ai, shape, 0, c0, g);
            })),
        )
    }

    /// Stacks parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Array2<S>>> = parts.iter().map(|v| self.rc(*v)).collect();
        let cols = vals[0].ncols();
        let total: usize = vals.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut r = 0;
        for v in &vals {
            out.slice_mut(s![r..r + v.nrows(), ..]).assign(v);
            r += v.nrows();
        }
        let ids: Vec<(usize, usize)> = parts
            .iter()
            .zip(&vals)
            .map(|(p, v)| (p.0, v.nrows()))
            .collect();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut r = 0;
                for &(id, rows) in &ids {
                    store.accumulate(id, g.slice(s![r..r + rows, ..]).to_owned());
                    r += rows;
                }
            })),
        )
    }

    /// Stacks parts horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Array2<S>>> = parts.iter().map(|v| self.rc(*v)).collect();
        let rows = vals[0].nrows();
        let total: usize = vals.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut c = 0;
        for v in &vals {
            out.slice_mut(s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        let ids: Vec<(usize, usize)> = parts
            .iter()
            .zip(&vals)
            .map(|(p, v)| (p.0, v.ncols()))
            .collect();
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut c = 0;
                for &(id, cols) in &ids {
                    store.accumulate(id, g.slice(s![.., c..c + cols]).to_owned());
                    c += cols;
                }
            })),
        )
    }

    /// Groups `k` consecutive rows into one row: (T·k)×C → T×(k·C).
    pub fn fold_rows(&mut self, a: Var, k: usize) -> Var {
        let av = self.rc(a);
        let (rows, cols) = av.dim();
        assert!(k > 0 && rows % k == 0, "fold_rows: rows not divisible by k");
        let out = reshape_copy(&av, (rows / k, k * cols));
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, reshape_copy(g, (rows, cols)));
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let mut out = Array2::zeros(av.dim());
        for (i, row) in av.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[(i, j)] = e;
                denom = denom + e;
            }
            for j in 0..row.len() {
                out[(i, j)] = out[(i, j)] / denom;
            }
        }
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut gx = Array2::zeros(yv.dim());
                for i in 0..yv.nrows() {
                    let mut dot = S::zero();
                    for j in 0..yv.ncols() {
                        dot = dot + g[(i, j)] * yv[(i, j)];
                    }
                    for j in 0..yv.ncols() {
                        gx[(i, j)] = yv[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                store.accumulate(ai, gx);
            })),
        )
    }

    /// Row-wise layer normalization (population variance, no affine part).
    pub fn layernorm_rows(&mut self, a: Var, eps: S) -> Var {
        let av = self.rc(a);
        let (rows, cols) = av.dim();
        let n = S::from_f64(cols as f64);
        let mut out = Array2::zeros((rows, cols));
        let mut inv_sigma = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = av.row(i);
            let mean = row.sum() / n;
            let mut var = S::zero();
            for &x in row.iter() {
                let d = x - mean;
                var = var + d * d;
            }
            var = var / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_sigma.push(inv);
            for j in 0..cols {
                out[(i, j)] = (row[j] - mean) * inv;
            }
        }
        let yv = Rc::new(out.clone());
        let ai = a.0;
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut gx = Array2::zeros(yv.dim());
                let n = S::from_f64(yv.ncols() as f64);
                for i in 0..yv.nrows() {
                    let mut gmean = S::zero();
                    let mut gydot = S::zero();
                    for j in 0..yv.ncols() {
                        gmean = gmean + g[(i, j)];
                        gydot = gydot + g[(i, j)] * yv[(i, j)];
                    }
                    gmean = gmean / n;
                    gydot = gydot / n;
                    for j in 0..yv.ncols() {
                        gx[(i, j)] = inv_sigma[i] * (g[(i, j)] - gmean - yv[(i, j)] * gydot);
                    }
                }
                store.accumulate(ai, gx);
            })),
        )
    }

    /// Divide every entry of `a` by the 1×1 node `s`.
    pub fn div_by_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.rc(a), self.rc(s));
        assert_eq!(sv.dim(), (1, 1), "div_by_scalar_var: s must be 1×1");
        let sval = sv[(0, 0)];
        let out = av.mapv(|x| x / sval);
        let (ai, si) = (a.0, s.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.mapv(|x| x / sval));
                let mut ds = S::zero();
                for (gv, avv) in g.iter().zip(av.iter()) {
                    ds = ds + *gv * *avv;
                }
                ds = -ds / (sval * sval);
                store.accumulate(si, Array2::from_elem((1, 1), ds));
            })),
        )
    }

    /// Broadcast s − a[i,j] for a 1×1 node `s`.
    pub fn sub_from_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.rc(a), self.rc(s));
        assert_eq!(sv.dim(), (1, 1), "sub_from_scalar_var: s must be 1×1");
        let sval = sv[(0, 0)];
        let out = av.mapv(|x| sval - x);
        let (ai, si) = (a.0, s.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                store.accumulate(ai, g.mapv(|x| -x));
                store.accumulate(si, Array2::from_elem((1, 1), g.sum()));
            })),
        )
    }

    /// Depthwise convolution along the row (time) axis with zero padding;
    /// `w` is K×D with K odd, output has the input's shape.
    pub fn depthwise_conv_time(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.rc(a), self.rc(w));
        let (t, d) = av.dim();
        let k = wv.nrows();
        assert_eq!(wv.ncols(), d, "depthwise_conv_time: channel mismatch");
        assert!(k % 2 == 1, "depthwise_conv_time: kernel must be odd");
        let c = k / 2;
        let mut out = Array2::zeros((t, d));
        for ti in 0..t {
            for ki in 0..k {
                let src = ti as isize + ki as isize - c as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for di in 0..d {
                    out[(ti, di)] = out[(ti, di)] + av[(src, di)] * wv[(ki, di)];
                }
            }
        }
        let (ai, wi) = (a.0, w.0);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut ga = Array2::zeros((t, d));
                let mut gw = Array2::zeros((k, d));
                for ti in 0..t {
                    for ki in 0..k {
                        let src = ti as isize + ki as isize - c as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for di in 0..d {
                            ga[(src, di)] = ga[(src, di)] + g[(ti, di)] * wv[(ki, di)];
                            gw[(ki, di)] = gw[(ki, di)] + g[(ti, di)] * av[(src, di)];
                        }
                    }
                }
                store.accumulate(ai, ga);
                store.accumulate(wi, gw);
            })),
        )
    }

    /// Runs backpropagation from the given seed gradients. Gradients of
    /// interior nodes are dropped once consumed; leaf gradients are kept.
    pub fn backward(&self, seeds: &[(Var, Array2<S>)]) -> GradStore<S> {
        let mut store = GradStore::new(self.nodes.len());
        for (v, g) in seeds {
            assert_eq!(
                self.nodes[v.0].value.dim(),
                g.dim(),
                "backward: seed shape mismatch"
            );
            store.accumulate(v.0, g.clone());
        }
        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            match &node.back {
                Some(back) => {
                    if let Some(g) = store.grads[id].take() {
                        back(&g, &mut store);
                    }
                }
                None => {} // leaf: keep accumulated gradient
            }
        }
        store
    }

    /// Backward from a single scalar loss node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> GradStore<S> {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward_scalar: loss must be 1×1"
        );
        self.backward(&[(loss, Array2::from_elem((1, 1), S::one()))])
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn reshape_copy<S: Scalar>(a: &Array2<S>, shape: (usize, usize)) -> Array2<S> {
    let std = a.as_standard_layout();
    let flat: Vec<S> = std.iter().cloned().collect();
    Array2::from_shape_vec(shape, flat).expect("reshape_copy: element count mismatch")
}

pub mod fd;
