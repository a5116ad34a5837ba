//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! Graphs are built eagerly: every op computes its value at construction and
//! records enough state to run the matching backward step. Values are plain
//! `ndarray::Array2` so the same graph code runs at f32 or f64.
//!
//! Batches are packed along rows: a batch of B sequences of L rows and D
//! columns is one (B*L)xD array. Ops that must respect sequence boundaries
//! (attention, register insertion) take an explicit block count.
//!
//! Graph construction and backward are single threaded; parallelism lives
//! inside individual kernels and only ever writes disjoint output rows, so
//! results are bitwise reproducible for a fixed thread count.

use crate::real::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

/// Forward-pass context: carries the dropout switch and its RNG.
/// Dropout draws happen in graph-construction order, which is single
/// threaded, so a seeded context gives reproducible training steps.
#[derive(Clone)]
pub struct Ctx {
    train: bool,
    rng: Option<Rc<RefCell<ChaCha8Rng>>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { train: false, rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Ctx { train: true, rng: Some(Rc::new(RefCell::new(rng))) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Current state of the dropout stream, for checkpointing.
    pub fn rng_snapshot(&self) -> Option<ChaCha8Rng> {
        self.rng.as_ref().map(|r| r.borrow().clone())
    }
}

pub struct Tensor<R: Real> {
    node: Rc<Node<R>>,
}

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

struct Node<R: Real> {
    value: RefCell<Array2<R>>,
    grad: RefCell<Option<Array2<R>>>,
    needs_grad: bool,
    op: Op<R>,
}

enum Op<R: Real> {
    Leaf,
    MatMul { a: Tensor<R>, b: Tensor<R> },
    Add { a: Tensor<R>, b: Tensor<R> },
    /// Row vector added to every row.
    AddBias { a: Tensor<R>, bias: Tensor<R> },
    /// `tile` (r x n) added to each of `reps` consecutive row blocks.
    AddTiled { a: Tensor<R>, tile: Tensor<R>, reps: usize },
    Scale { a: Tensor<R>, c: R },
    Transpose { a: Tensor<R> },
    FlipRows { a: Tensor<R> },
    Gelu { a: Tensor<R> },
    LayerNorm { x: Tensor<R>, gamma: Tensor<R>, beta: Tensor<R>, xhat: Array2<R>, inv_std: Vec<R> },
    Dropout { a: Tensor<R>, mask: Array2<R> },
    Attention(Box<AttnState<R>>),
    GatherRows { table: Tensor<R>, ids: Vec<usize> },
    CrossEntropy(Box<CeState<R>>),
    MeanAll { a: Tensor<R> },
    MeanOf { xs: Vec<Tensor<R>> },
    /// Forward value is a detached constant; gradient flows to `soft`.
    StraightThrough { soft: Tensor<R> },
    SoftSort { scores: Tensor<R>, temperature: R, sorted_idx: Vec<usize> },
    /// Prepend a shared learnable row to each block.
    WithRegister { x: Tensor<R>, reg: Tensor<R>, blocks: usize },
    QueryStreamGate { prec: Tensor<R> },
    ContentStreamGate { prec: Tensor<R> },
}

struct AttnState<R: Real> {
    q: Tensor<R>,
    k: Tensor<R>,
    v: Tensor<R>,
    gate: Option<Tensor<R>>,
    heads: usize,
    blocks: usize,
    /// Attention weights per (block, head), post-gate.
    probs: Vec<Array2<R>>,
    /// exp(S - max)/Z per (block, head); kept only when the gate needs grad.
    ungated: Vec<Array2<R>>,
}

struct CeState<R: Real> {
    logits: Tensor<R>,
    targets: Vec<usize>,
    weights: Vec<R>,
    smoothing: R,
    probs: Array2<R>,
}

/// Matrix product with the output rows split across the rayon pool.
/// Every output element is produced by exactly one thread with a fixed
/// inner-loop order, so the result does not depend on scheduling.
pub fn par_matmul<R: Real>(a: &ArrayView2<R>, b: &ArrayView2<R>) -> Array2<R> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul inner dims {}x{} . {}x{}", m, ka, kb, n);
    let mut out = Array2::zeros((m, n));
    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 * threads && m * ka * n >= 1 << 16 {
        let chunk = m.div_ceil(threads);
        let a_chunks: Vec<ArrayView2<R>> = a.axis_chunks_iter(Axis(0), chunk).collect();
        let o_chunks: Vec<ArrayViewMut2<R>> = out.axis_chunks_iter_mut(Axis(0), chunk).collect();
        o_chunks
            .into_par_iter()
            .zip(a_chunks)
            .for_each(|(mut oc, ac)| general_mat_mul(R::one(), &ac, b, R::zero(), &mut oc));
    } else {
        general_mat_mul(R::one(), a, b, R::zero(), &mut out);
    }
    out
}

/// Gaussian parameter init, N(0, std^2) via Box-Muller. One draw per entry
/// in row-major order, so layouts are reproducible from the rng stream.
pub fn normal_init<R: Real>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<R> {
    let mut draw = || {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            out[[i, j]] = R::from_f64(std * draw());
        }
    }
    out
}

/// Identity matrix as an owned array.
pub fn eye<R: Real>(n: usize) -> Array2<R> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { R::one() } else { R::zero() })
}

impl<R: Real> Tensor<R> {
    fn new(value: Array2<R>, needs_grad: bool, op: Op<R>) -> Self {
        Tensor {
            node: Rc::new(Node { value: RefCell::new(value), grad: RefCell::new(None), needs_grad, op }),
        }
    }

    /// Trainable leaf.
    pub fn param(value: Array2<R>) -> Self {
        Tensor::new(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(value: Array2<R>) -> Self {
        Tensor::new(value, false, Op::Leaf)
    }

    pub fn value(&self) -> Ref<'_, Array2<R>> {
        self.node.value.borrow()
    }

    pub fn to_owned_value(&self) -> Array2<R> {
        self.node.value.borrow().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.node.value.borrow().dim()
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    /// Overwrite a leaf's value in place (optimizer step, checkpoint load).
    pub fn set_value(&self, value: Array2<R>) {
        assert!(matches!(self.node.op, Op::Leaf), "set_value on non-leaf");
        assert_eq!(self.shape(), value.dim(), "set_value shape mismatch");
        *self.node.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Option<Array2<R>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn accum(&self, delta: &Array2<R>) {
        if !self.node.needs_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => *g += delta,
            None => *slot = Some(delta.clone()),
        }
    }

    fn unary(&self) -> bool {
        self.node.needs_grad
    }

    pub fn matmul(&self, rhs: &Tensor<R>) -> Tensor<R> {
        let value = par_matmul(&self.value().view(), &rhs.value().view());
        Tensor::new(
            value,
            self.unary() || rhs.unary(),
            Op::MatMul { a: self.clone(), b: rhs.clone() },
        )
    }

    pub fn add(&self, rhs: &Tensor<R>) -> Tensor<R> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        let value = &*self.value() + &*rhs.value();
        Tensor::new(value, self.unary() || rhs.unary(), Op::Add { a: self.clone(), b: rhs.clone() })
    }

    pub fn add_bias(&self, bias: &Tensor<R>) -> Tensor<R> {
        let (_, n) = self.shape();
        assert_eq!(bias.shape(), (1, n), "bias must be 1x{n}");
        let value = &*self.value() + &bias.value().row(0);
        Tensor::new(
            value,
            self.unary() || bias.unary(),
            Op::AddBias { a: self.clone(), bias: bias.clone() },
        )
    }

    /// Add `tile` to each of `reps` consecutive row blocks of `self`.
    pub fn add_tiled(&self, tile: &Tensor<R>, reps: usize) -> Tensor<R> {
        let (m, n) = self.shape();
        let (r, tn) = tile.shape();
        assert_eq!(n, tn, "tiled add column mismatch");
        assert_eq!(m, r * reps, "tiled add row mismatch");
        let mut value = self.to_owned_value();
        {
            let t = tile.value();
            for b in 0..reps {
                let mut block = value.slice_mut(s![b * r..(b + 1) * r, ..]);
                block += &*t;
            }
        }
        Tensor::new(
            value,
            self.unary() || tile.unary(),
            Op::AddTiled { a: self.clone(), tile: tile.clone(), reps },
        )
    }

    pub fn scale(&self, c: R) -> Tensor<R> {
        let value = self.value().mapv(|x| x * c);
        Tensor::new(value, self.unary(), Op::Scale { a: self.clone(), c })
    }

    pub fn transpose(&self) -> Tensor<R> {
        let value = self.value().t().to_owned();
        Tensor::new(value, self.unary(), Op::Transpose { a: self.clone() })
    }

    pub fn flip_rows(&self) -> Tensor<R> {
        let value = self.value().slice(s![..;-1, ..]).to_owned();
        Tensor::new(value, self.unary(), Op::FlipRows { a: self.clone() })
    }

    pub fn gelu(&self) -> Tensor<R> {
        let value = self.value().mapv(gelu_exact);
        Tensor::new(value, self.unary(), Op::Gelu { a: self.clone() })
    }

    pub fn layer_norm(&self, gamma: &Tensor<R>, beta: &Tensor<R>, eps: R) -> Tensor<R> {
        let x = self.value();
        let (m, n) = x.dim();
        assert_eq!(gamma.shape(), (1, n), "layer_norm gamma shape");
        assert_eq!(beta.shape(), (1, n), "layer_norm beta shape");
        let inv_n = R::from_f64(1.0 / n as f64);
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = vec![R::zero(); m];
        for i in 0..m {
            let row = x.row(i);
            let mu = row.iter().copied().sum::<R>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<R>() * inv_n;
            let is = R::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let mut out = xhat.row_mut(i);
            for j in 0..n {
                out[j] = (row[j] - mu) * is;
            }
        }
        let g = gamma.value();
        let b = beta.value();
        let mut value = xhat.clone();
        for i in 0..m {
            let mut row = value.row_mut(i);
            for j in 0..n {
                row[j] = row[j] * g[[0, j]] + b[[0, j]];
            }
        }
        drop(x);
        Tensor::new(
            value,
            self.unary() || gamma.unary() || beta.unary(),
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), xhat, inv_std },
        )
    }

    /// Inverted dropout; identity when `ctx` is eval or `p` is zero.
    pub fn dropout(&self, p: f64, ctx: &Ctx) -> Tensor<R> {
        if !ctx.train || p <= 0.0 {
            return self.clone();
        }
        assert!(p < 1.0, "dropout rate must be < 1");
        let keep = R::from_f64(1.0 / (1.0 - p));
        let rng = ctx.rng.as_ref().expect("train ctx carries an rng");
        let mut rng = rng.borrow_mut();
        let (m, n) = self.shape();
        let mask = Array2::from_shape_fn((m, n), |_| {
            if rng.gen::<f64>() < p {
                R::zero()
            } else {
                keep
            }
        });
        let value = &*self.value() * &mask;
        Tensor::new(value, self.unary(), Op::Dropout { a: self.clone(), mask })
    }

    pub fn mean_all(&self) -> Tensor<R> {
        let v = self.value();
        let (m, n) = v.dim();
        let mean = v.iter().copied().sum::<R>() * R::from_f64(1.0 / (m * n) as f64);
        drop(v);
        Tensor::new(
            Array2::from_elem((1, 1), mean),
            self.unary(),
            Op::MeanAll { a: self.clone() },
        )
    }

    pub fn scalar(&self) -> R {
        assert_eq!(self.shape(), (1, 1), "scalar() on non-1x1 tensor");
        self.value()[[0, 0]]
    }

    /// Reverse pass from a 1x1 tensor; accumulates into leaf grads.
    pub fn backward(&self) {
        assert_eq!(self.shape(), (1, 1), "backward from non-scalar");
        let order = topo_order(self);
        self.node.grad.replace(Some(Array2::from_elem((1, 1), R::one())));
        for node in order.iter().rev() {
            let grad = node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            backward_step(&node.op, &grad);
            if !matches!(node.op, Op::Leaf) {
                // Interior grads are never read again; free them eagerly.
                node.grad.replace(None);
            }
        }
    }
}

fn topo_order<R: Real>(root: &Tensor<R>) -> Vec<Rc<Node<R>>> {
    let mut order: Vec<Rc<Node<R>>> = Vec::new();
    let mut seen: HashSet<*const Node<R>> = HashSet::new();
    // Iterative DFS; state 0 = expand children, 1 = emit.
    let mut stack: Vec<(Rc<Node<R>>, u8)> = vec![(Rc::clone(&root.node), 0)];
    while let Some((node, state)) = stack.pop() {
        let ptr = Rc::as_ptr(&node);
        if state == 1 {
            order.push(node);
            continue;
        }
        if !seen.insert(ptr) || !node.needs_grad {
            continue;
        }
        stack.push((Rc::clone(&node), 1));
        for parent in parents(&node.op) {
            if seen.contains(&Rc::as_ptr(&parent.node)) {
                continue;
            }
            stack.push((Rc::clone(&parent.node), 0));
        }
    }
    order
}

fn parents<R: Real>(op: &Op<R>) -> Vec<&Tensor<R>> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } | Op::Add { a, b } => vec![a, b],
        Op::AddBias { a, bias } => vec![a, bias],
        Op::AddTiled { a, tile, .. } => vec![a, tile],
        Op::Scale { a, .. }
        | Op::Transpose { a }
        | Op::FlipRows { a }
        | Op::Gelu { a }
        | Op::Dropout { a, .. }
        | Op::MeanAll { a } => vec![a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Attention(st) => {
            let mut ps = vec![&st.q, &st.k, &st.v];
            if let Some(g) = &st.gate {
                ps.push(g);
            }
            ps
        }
        Op::GatherRows { table, .. } => vec![table],
        Op::CrossEntropy(st) => vec![&st.logits],
        Op::MeanOf { xs } => xs.iter().collect(),
        Op::StraightThrough { soft } => vec![soft],
        Op::SoftSort { scores, .. } => vec![scores],
        Op::WithRegister { x, reg, .. } => vec![x, reg],
        Op::QueryStreamGate { prec } | Op::ContentStreamGate { prec } => vec![prec],
    }
}

fn backward_step<R: Real>(op: &Op<R>, g: &Array2<R>) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            if a.needs_grad() {
                let bt = b.value().t().to_owned();
                a.accum(&par_matmul(&g.view(), &bt.view()));
            }
            if b.needs_grad() {
                let at = a.value().t().to_owned();
                b.accum(&par_matmul(&at.view(), &g.view()));
            }
        }
        Op::Add { a, b } => {
            a.accum(g);
            b.accum(g);
        }
        Op::AddBias { a, bias } => {
            a.accum(g);
            if bias.needs_grad() {
                let col = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                bias.accum(&col);
            }
        }
        Op::AddTiled { a, tile, reps } => {
            a.accum(g);
            if tile.needs_grad() {
                let (r, n) = tile.shape();
                let mut acc = Array2::zeros((r, n));
                for b in 0..*reps {
                    acc += &g.slice(s![b * r..(b + 1) * r, ..]);
                }
                tile.accum(&acc);
            }
        }
        Op::Scale { a, c } => a.accum(&g.mapv(|x| x * *c)),
        Op::Transpose { a } => a.accum(&g.t().to_owned()),
        Op::FlipRows { a } => a.accum(&g.slice(s![..;-1, ..]).to_owned()),
        Op::Gelu { a } => {
            let da = a.value().mapv(gelu_exact_grad);
            a.accum(&(&da * g));
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (m, n) = xhat.dim();
            let inv_n = R::from_f64(1.0 / n as f64);
            if beta.needs_grad() {
                beta.accum(&g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            if gamma.needs_grad() {
                gamma.accum(&(g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            if x.needs_grad() {
                let gm = gamma.value();
                let mut dx = Array2::zeros((m, n));
                for i in 0..m {
                    let gi = g.row(i);
                    let xh = xhat.row(i);
                    let mut dxh = Array1::zeros(n);
                    for j in 0..n {
                        dxh[j] = gi[j] * gm[[0, j]];
                    }
                    let mean_dxh = dxh.iter().copied().sum::<R>() * inv_n;
                    let mean_dxh_xh =
                        dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<R>() * inv_n;
                    let is = inv_std[i];
                    let mut out = dx.row_mut(i);
                    for j in 0..n {
                        out[j] = is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                x.accum(&dx);
            }
        }
        Op::Dropout { a, mask } => a.accum(&(g * mask)),
        Op::Attention(st) => attention_backward(st, g),
        Op::GatherRows { table, ids } => {
            if table.needs_grad() {
                let (v, d) = table.shape();
                let mut acc = Array2::zeros((v, d));
                for (row, &id) in ids.iter().enumerate() {
                    let mut dst = acc.row_mut(id);
                    dst += &g.row(row);
                }
                table.accum(&acc);
            }
        }
        Op::CrossEntropy(st) => {
            if st.logits.needs_grad() {
                let (m, c) = st.probs.dim();
                let total: R = st.weights.iter().copied().sum();
                let scale = g[[0, 0]] / total;
                let eps = st.smoothing;
                let uniform = eps * R::from_f64(1.0 / c as f64);
                let mut dl = st.probs.clone();
                for i in 0..m {
                    let w = st.weights[i] * scale;
                    let mut row = dl.row_mut(i);
                    for j in 0..c {
                        let mut q = uniform;
                        if j == st.targets[i] {
                            q = q + (R::one() - eps);
                        }
                        row[j] = (row[j] - q) * w;
                    }
                }
                st.logits.accum(&dl);
            }
        }
        Op::MeanAll { a } => {
            let (m, n) = a.shape();
            let c = g[[0, 0]] * R::from_f64(1.0 / (m * n) as f64);
            a.accum(&Array2::from_elem((m, n), c));
        }
        Op::MeanOf { xs } => {
            let c = g[[0, 0]] * R::from_f64(1.0 / xs.len() as f64);
            let delta = Array2::from_elem((1, 1), c);
            for x in xs {
                x.accum(&delta);
            }
        }
        Op::StraightThrough { soft } => soft.accum(g),
        Op::SoftSort { scores, temperature, sorted_idx } => {
            if scores.needs_grad() {
                let t = sorted_idx.len();
                let sv = scores.to_owned_value();
                let probs = softsort_probs(&sv, sorted_idx, *temperature);
                let inv_tau = R::one() / *temperature;
                let mut ds = Array2::zeros((1, t));
                for k in 0..t {
                    let pk = probs.row(k);
                    let gk = g.row(k);
                    let srt = sv[[0, sorted_idx[k]]];
                    let dot: R = pk.iter().zip(gk.iter()).map(|(&p, &d)| p * d).sum();
                    for j in 0..t {
                        let da = pk[j] * (gk[j] - dot);
                        let sign = sign_of(srt - sv[[0, j]]);
                        ds[[0, j]] = ds[[0, j]] + da * sign * inv_tau;
                        ds[[0, sorted_idx[k]]] = ds[[0, sorted_idx[k]]] - da * sign * inv_tau;
                    }
                }
                scores.accum(&ds);
            }
        }
        Op::WithRegister { x, reg, blocks } => {
            let (bm, d) = x.shape();
            let n = bm / blocks;
            if x.needs_grad() {
                let mut dx = Array2::zeros((bm, d));
                for b in 0..*blocks {
                    let src = g.slice(s![b * (n + 1) + 1..(b + 1) * (n + 1), ..]);
                    dx.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&src);
                }
                x.accum(&dx);
            }
            if reg.needs_grad() {
                let mut dr = Array2::zeros((1, d));
                for b in 0..*blocks {
                    let mut row = dr.row_mut(0);
                    row += &g.row(b * (n + 1));
                }
                reg.accum(&dr);
            }
        }
        Op::QueryStreamGate { prec } => {
            if prec.needs_grad() {
                let (t, _) = prec.shape();
                let mut dp = Array2::zeros((t, t));
                for r in 0..t {
                    for c in 1..=t {
                        if c - 1 != r {
                            dp[[r, c - 1]] = g[[r, c]];
                        }
                    }
                }
                prec.accum(&dp);
            }
        }
        Op::ContentStreamGate { prec } => {
            if prec.needs_grad() {
                let (t, _) = prec.shape();
                let mut dp = Array2::zeros((t, t));
                for r in 1..=t {
                    for c in 1..=t {
                        if c != r {
                            dp[[r - 1, c - 1]] = g[[r, c]];
                        }
                    }
                }
                prec.accum(&dp);
            }
        }
    }
}

fn sign_of<R: Real>(v: R) -> R {
    if v > R::zero() {
        R::one()
    } else if v < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

fn gelu_exact<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (R::one() + (x * inv_sqrt2).erf())
}

fn gelu_exact_grad<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = R::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi = (-(x * x) * half).exp() * inv_sqrt_2pi;
    half * (R::one() + (x * inv_sqrt2).erf()) + x * phi
}

/// Scaled dot-product attention over packed row blocks.
///
/// `q` is (blocks*lq)xD, `k` and `v` are (blocks*lk)xD. The optional `gate`
/// is one lq x lk matrix of {0,1} shared by every block and head; a zero
/// entry removes the key from both the numerator and the row max, so blocked
/// keys contribute exactly nothing to the output. Each row must keep at
/// least one open key.
pub fn attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    heads: usize,
    blocks: usize,
    gate: Option<&Tensor<R>>,
) -> Tensor<R> {
    let (qm, d) = q.shape();
    let (km, dk) = k.shape();
    assert_eq!(d, dk, "attention q/k width mismatch");
    assert_eq!(k.shape(), v.shape(), "attention k/v shape mismatch");
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    assert_eq!(qm % blocks, 0, "q rows not divisible by blocks");
    assert_eq!(km % blocks, 0, "k rows not divisible by blocks");
    let lq = qm / blocks;
    let lk = km / blocks;
    if let Some(gt) = gate {
        assert_eq!(gt.shape(), (lq, lk), "gate shape mismatch");
    }
    let dh = d / heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let gate_grad = gate.map(|gt| gt.needs_grad()).unwrap_or(false);

    let qv_guard = q.value();
    let kv_guard = k.value();
    let vv_guard = v.value();
    let qv: &Array2<R> = &qv_guard;
    let kv: &Array2<R> = &kv_guard;
    let vv: &Array2<R> = &vv_guard;
    let gv = gate.map(|gt| gt.to_owned_value());
    let gv_ref = gv.as_ref();

    let mut value = Array2::zeros((qm, d));
    let mut probs: Vec<Array2<R>> = vec![Array2::zeros((0, 0)); blocks * heads];
    let mut ungated: Vec<Array2<R>> = if gate_grad {
        vec![Array2::zeros((0, 0)); blocks * heads]
    } else {
        Vec::new()
    };

    // Per-(block, head) jobs write disjoint output slices; computed into
    // owned arrays in parallel, then copied back in a fixed order.
    let mut jobs: Vec<(usize, usize)> = Vec::with_capacity(blocks * heads);
    for b in 0..blocks {
        for h in 0..heads {
            jobs.push((b, h));
        }
    }

    let results: Vec<(Array2<R>, Array2<R>, Option<Array2<R>>)> = jobs
        .par_iter()
        .map(|&(b, h)| {
            let qs = qv.slice(s![b * lq..(b + 1) * lq, h * dh..(h + 1) * dh]);
            let ks = kv.slice(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh]);
            let vs = vv.slice(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh]);
            let kt = ks.t();
            let mut scores = qs.dot(&kt);
            scores.mapv_inplace(|x| x * scale);
            let mut a = Array2::zeros((lq, lk));
            let mut p_un = if gate_grad { Some(Array2::zeros((lq, lk))) } else { None };
            for i in 0..lq {
                let row = scores.row(i);
                let mut mx = R::neg_infinity();
                for j in 0..lk {
                    let open = gv_ref.map(|gm| gm[[i, j]] > R::zero()).unwrap_or(true);
                    if open && row[j] > mx {
                        mx = row[j];
                    }
                }
                let mut z = R::zero();
                let mut exps = vec![R::zero(); lk];
                for j in 0..lk {
                    let e = (row[j] - mx).exp();
                    exps[j] = e;
                    let gated = match gv_ref {
                        Some(gm) => e * gm[[i, j]],
                        None => e,
                    };
                    z = z + gated;
                }
                let inv_z = R::one() / z;
                for j in 0..lk {
                    let gated = match gv_ref {
                        Some(gm) => exps[j] * gm[[i, j]],
                        None => exps[j],
                    };
                    a[[i, j]] = gated * inv_z;
                    if let Some(pu) = p_un.as_mut() {
                        pu[[i, j]] = exps[j] * inv_z;
                    }
                }
            }
            let out = a.dot(&vs);
            (out, a, p_un)
        })
        .collect();

    for (&(b, h), (out, a, p_un)) in jobs.iter().zip(results) {
        value
            .slice_mut(s![b * lq..(b + 1) * lq, h * dh..(h + 1) * dh])
            .assign(&out);
        probs[b * heads + h] = a;
        if let Some(pu) = p_un {
            ungated[b * heads + h] = pu;
        }
    }
    drop(qv_guard);
    drop(kv_guard);
    drop(vv_guard);

    let needs = q.unary() || k.unary() || v.unary() || gate_grad;
    Tensor::new(
        value,
        needs,
        Op::Attention(Box::new(AttnState {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            gate: gate.cloned(),
            heads,
            blocks,
            probs,
            ungated,
        })),
    )
}

fn attention_backward<R: Real>(st: &AttnState<R>, g: &Array2<R>) {
    let (qm, d) = st.q.shape();
    let (km, _) = st.k.shape();
    let heads = st.heads;
    let blocks = st.blocks;
    let lq = qm / blocks;
    let lk = km / blocks;
    let dh = d / heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let gate_grad = st.gate.as_ref().map(|gt| gt.needs_grad()).unwrap_or(false);

    let qv_guard = st.q.value();
    let kv_guard = st.k.value();
    let vv_guard = st.v.value();
    let qv: &Array2<R> = &qv_guard;
    let kv: &Array2<R> = &kv_guard;
    let vv: &Array2<R> = &vv_guard;
    let probs: &[Array2<R>] = &st.probs;
    let ungated: &[Array2<R>] = &st.ungated;

    let mut jobs: Vec<(usize, usize)> = Vec::with_capacity(blocks * heads);
    for b in 0..blocks {
        for h in 0..heads {
            jobs.push((b, h));
        }
    }
    let parts: Vec<(Array2<R>, Array2<R>, Array2<R>, Option<Array2<R>>)> = jobs
        .par_iter()
        .map(|&(b, h)| {
            let a = &probs[b * heads + h];
            let qs = qv.slice(s![b * lq..(b + 1) * lq, h * dh..(h + 1) * dh]);
            let ks = kv.slice(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh]);
            let vs = vv.slice(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh]);
            let go = g.slice(s![b * lq..(b + 1) * lq, h * dh..(h + 1) * dh]);
            let at = a.t();
            let dv = at.dot(&go);
            let vt = vs.t();
            let da = go.dot(&vt);
            // dS = A * (dA - rowdot(dA, A)); gate grad uses ungated probs.
            let mut ds = Array2::zeros((lq, lk));
            let mut dgate = if gate_grad { Some(Array2::zeros((lq, lk))) } else { None };
            for i in 0..lq {
                let mut dot = R::zero();
                for j in 0..lk {
                    dot = dot + da[[i, j]] * a[[i, j]];
                }
                for j in 0..lk {
                    let centered = da[[i, j]] - dot;
                    ds[[i, j]] = a[[i, j]] * centered;
                    if let Some(dg) = dgate.as_mut() {
                        dg[[i, j]] = ungated[b * heads + h][[i, j]] * centered;
                    }
                }
            }
            ds.mapv_inplace(|x| x * scale);
            let dq = ds.dot(&ks);
            let dst = ds.t();
            let dk = dst.dot(&qs);
            (dq, dk, dv, dgate)
        })
        .collect();

    let mut dq_all = Array2::zeros((qm, d));
    let mut dk_all = Array2::zeros((km, d));
    let mut dv_all = Array2::zeros((km, d));
    let mut dgate_all: Option<Array2<R>> = if gate_grad { Some(Array2::zeros((lq, lk))) } else { None };
    for (&(b, h), (dq, dk, dv, dgate)) in jobs.iter().zip(parts) {
        dq_all
            .slice_mut(s![b * lq..(b + 1) * lq, h * dh..(h + 1) * dh])
            .assign(&dq);
        dk_all
            .slice_mut(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh])
            .assign(&dk);
        dv_all
            .slice_mut(s![b * lk..(b + 1) * lk, h * dh..(h + 1) * dh])
            .assign(&dv);
        if let (Some(acc), Some(dg)) = (dgate_all.as_mut(), dgate) {
            *acc += &dg;
        }
    }
    st.q.accum(&dq_all);
    st.k.accum(&dk_all);
    st.v.accum(&dv_all);
    if let (Some(gt), Some(dg)) = (&st.gate, dgate_all) {
        gt.accum(&dg);
    }
}

/// Rows of `table` selected by id; backward scatter-adds.
pub fn gather_rows<R: Real>(table: &Tensor<R>, ids: &[usize]) -> Tensor<R> {
    let (v, d) = table.shape();
    let tv = table.value();
    let mut value = Array2::zeros((ids.len(), d));
    for (row, &id) in ids.iter().enumerate() {
        assert!(id < v, "gather id {id} out of range {v}");
        value.row_mut(row).assign(&tv.row(id));
    }
    drop(tv);
    Tensor::new(
        value,
        table.unary(),
        Op::GatherRows { table: table.clone(), ids: ids.to_vec() },
    )
}

/// Weighted mean cross-entropy over rows, with optional label smoothing.
/// Rows with weight zero contribute nothing (and their targets are ignored
/// in value and gradient alike).
pub fn cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    weights: &[R],
    smoothing: R,
) -> Tensor<R> {
    let (m, c) = logits.shape();
    assert_eq!(targets.len(), m, "one target per row");
    assert_eq!(weights.len(), m, "one weight per row");
    let total: R = weights.iter().copied().sum();
    assert!(total > R::zero(), "cross_entropy needs positive total weight");
    let lv = logits.value();
    let mut probs = Array2::zeros((m, c));
    let mut loss = R::zero();
    let uniform = smoothing * R::from_f64(1.0 / c as f64);
    for i in 0..m {
        let row = lv.row(i);
        let mx = row.iter().copied().fold(R::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut z = R::zero();
        for j in 0..c {
            z = z + (row[j] - mx).exp();
        }
        let log_z = z.ln() + mx;
        let mut row_loss = R::zero();
        for j in 0..c {
            let logp = row[j] - log_z;
            probs[[i, j]] = logp.exp();
            if j == targets[i] {
                row_loss = row_loss - (R::one() - smoothing) * logp;
            }
            row_loss = row_loss - uniform * logp;
        }
        loss = loss + weights[i] * row_loss;
    }
    drop(lv);
    loss = loss / total;
    Tensor::new(
        Array2::from_elem((1, 1), loss),
        logits.unary(),
        Op::CrossEntropy(Box::new(CeState {
            logits: logits.clone(),
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            smoothing,
            probs,
        })),
    )
}

/// Arithmetic mean of 1x1 tensors.
pub fn mean_of<R: Real>(xs: &[Tensor<R>]) -> Tensor<R> {
    assert!(!xs.is_empty(), "mean_of on empty list");
    let mut acc = R::zero();
    for x in xs {
        acc = acc + x.scalar();
    }
    acc = acc * R::from_f64(1.0 / xs.len() as f64);
    Tensor::new(
        Array2::from_elem((1, 1), acc),
        xs.iter().any(|x| x.unary()),
        Op::MeanOf { xs: xs.to_vec() },
    )
}

/// Forward takes the detached `hard` value, backward routes to `soft`.
pub fn straight_through<R: Real>(hard: Array2<R>, soft: &Tensor<R>) -> Tensor<R> {
    assert_eq!(hard.dim(), soft.shape(), "straight_through shape mismatch");
    Tensor::new(hard, soft.unary(), Op::StraightThrough { soft: soft.clone() })
}

pub(crate) fn softsort_probs<R: Real>(
    scores: &Array2<R>,
    sorted_idx: &[usize],
    temperature: R,
) -> Array2<R> {
    let t = sorted_idx.len();
    let inv_tau = R::one() / temperature;
    let mut p = Array2::zeros((t, t));
    for k in 0..t {
        let anchor = scores[[0, sorted_idx[k]]];
        let mut mx = R::neg_infinity();
        let mut logits = vec![R::zero(); t];
        for j in 0..t {
            let a = -(anchor - scores[[0, j]]).abs() * inv_tau;
            logits[j] = a;
            if a > mx {
                mx = a;
            }
        }
        let mut z = R::zero();
        for j in 0..t {
            logits[j] = (logits[j] - mx).exp();
            z = z + logits[j];
        }
        for j in 0..t {
            p[[k, j]] = logits[j] / z;
        }
    }
    p
}

/// Differentiable relaxation of descending-sort ranking: row k is a
/// softmax over positions peaked at the position holding the k-th largest
/// score. Converges to the hard permutation matrix as temperature -> 0.
pub fn soft_sort<R: Real>(scores: &Tensor<R>, temperature: R) -> Tensor<R> {
    let (r, t) = scores.shape();
    assert_eq!(r, 1, "soft_sort takes a 1xT score row");
    assert!(temperature > R::zero(), "temperature must be positive");
    let sv = scores.to_owned_value();
    let mut idx: Vec<usize> = (0..t).collect();
    // Descending by score, ties by ascending position index.
    idx.sort_by(|&a, &b| {
        sv[[0, b]]
            .partial_cmp(&sv[[0, a]])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    let value = softsort_probs(&sv, &idx, temperature);
    Tensor::new(
        value,
        scores.unary(),
        Op::SoftSort { scores: scores.clone(), temperature, sorted_idx: idx },
    )
}

/// Prepend one shared learnable row to each of `blocks` row blocks.
pub fn with_register<R: Real>(x: &Tensor<R>, reg: &Tensor<R>, blocks: usize) -> Tensor<R> {
    let (bm, d) = x.shape();
    assert_eq!(reg.shape(), (1, d), "register must be 1x{d}");
    assert_eq!(bm % blocks, 0, "rows not divisible by blocks");
    let n = bm / blocks;
    let xv = x.value();
    let rv = reg.value();
    let mut value = Array2::zeros((blocks * (n + 1), d));
    for b in 0..blocks {
        value.row_mut(b * (n + 1)).assign(&rv.row(0));
        value
            .slice_mut(s![b * (n + 1) + 1..(b + 1) * (n + 1), ..])
            .assign(&xv.slice(s![b * n..(b + 1) * n, ..]));
    }
    drop(xv);
    drop(rv);
    Tensor::new(
        value,
        x.unary() || reg.unary(),
        Op::WithRegister { x: x.clone(), reg: reg.clone(), blocks },
    )
}

/// Frame a TxT soft precedence matrix as the (T+1)x(T+1) gate for the
/// query stream: row r asks for output position r+1 (last row is the
/// end-of-sequence slot), column 0 is the always-visible start token,
/// and the self column is forced shut.
pub fn query_stream_gate<R: Real>(prec: &Tensor<R>) -> Tensor<R> {
    let (t, t2) = prec.shape();
    assert_eq!(t, t2, "precedence matrix must be square");
    let pv = prec.value();
    let mut value = Array2::zeros((t + 1, t + 1));
    for r in 0..=t {
        value[[r, 0]] = R::one();
    }
    for c in 0..=t {
        value[[t, c]] = R::one();
    }
    for r in 0..t {
        for c in 1..=t {
            value[[r, c]] = if c - 1 == r { R::zero() } else { pv[[r, c - 1]] };
        }
    }
    drop(pv);
    Tensor::new(value, prec.unary(), Op::QueryStreamGate { prec: prec.clone() })
}

/// Frame a TxT soft precedence matrix as the (T+1)x(T+1) gate for content
/// self-attention: row 0 is the start token (sees only itself), row r >= 1
/// is context token r, which always sees itself and the start token.
pub fn content_stream_gate<R: Real>(prec: &Tensor<R>) -> Tensor<R> {
    let (t, t2) = prec.shape();
    assert_eq!(t, t2, "precedence matrix must be square");
    let pv = prec.value();
    let mut value = Array2::zeros((t + 1, t + 1));
    value[[0, 0]] = R::one();
    for r in 1..=t {
        value[[r, 0]] = R::one();
        for c in 1..=t {
            value[[r, c]] = if c == r { R::one() } else { pv[[r - 1, c - 1]] };
        }
    }
    drop(pv);
    Tensor::new(value, prec.unary(), Op::ContentStreamGate { prec: prec.clone() })
}
