//! Tensor-level reverse-mode differentiation.
//!
//! Network code is written once against [`Ops`]. Running it on a [`Tape`]
//! records every operation for [`Tape::backward`]; running it on [`Eager`]
//! computes values only and frees intermediates as soon as they go out of
//! scope, which is what inference on large images needs.

pub mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub use kernels::BnStats;

/// Operations available to network definitions.
pub trait Ops<S: Scalar> {
    type V: Clone;

    fn constant(&mut self, t: Tensor<S>) -> Self::V;
    /// Constant that may be marked as requiring a gradient (tape only).
    fn input(&mut self, t: Tensor<S>, requires_grad: bool) -> Self::V;
    fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<S>;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, stride: usize, pad: usize) -> Result<Self::V>;
    fn pointwise(&mut self, xs: &[Self::V], w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn depthwise3x3(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V>;
    /// Normalise with batch statistics; the statistics are returned for
    /// running-average bookkeeping.
    fn batch_norm_train(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: S) -> Result<(Self::V, BnStats<S>)>;
    fn batch_norm_eval(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, mean: &[S], var: &[S], eps: S) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, xs: &[Self::V]) -> Result<Self::V>;
    fn global_avg_pool(&mut self, x: &Self::V) -> Self::V;
    fn project(&mut self, x: &Self::V, matrix: &Rc<Tensor<S>>) -> Result<Self::V>;
    fn l2_normalize(&mut self, x: &Self::V, floor: S) -> Result<Self::V>;
    fn sq_dist(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn cross_entropy(&mut self, logits: &Self::V, labels: &[usize]) -> Result<Self::V>;
    /// Mean of all elements, as a `[1,1,1,1]` scalar.
    fn mean(&mut self, x: &Self::V) -> Self::V;
    fn scale(&mut self, x: &Self::V, k: S) -> Self::V;
    fn charbonnier(&mut self, pred: &Self::V, target: &Self::V, eps: S) -> Result<Self::V>;
    fn recovery_literal(&mut self, pred: &Self::V, target: &Self::V, eps: S) -> Result<Self::V>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Pointwise { xs: Vec<Var>, w: Var, b: Option<Var> },
    Depthwise { x: Var, w: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S>, batch_stats: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { xs: Vec<Var> },
    GlobalAvgPool { x: Var },
    Project { x: Var, matrix: Rc<Tensor<S>> },
    L2Normalize { x: Var, norms: Vec<S>, floor: S },
    SqDist { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<S> },
    Mean { x: Var },
    Scale { x: Var, k: S },
    Charbonnier { pred: Var, target: Var, eps: S },
    RecoveryLiteral { pred: Var, target: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording executor.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, ParamId, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    params: HashMap<(String, ParamId), Tensor<S>>,
    kept: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, store: &str, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&(store.to_string(), id))
    }

    /// Gradients for every trainable entry of `store`, in store order.
    pub fn for_store(&self, store: &ParamStore<S>) -> Vec<Option<&Tensor<S>>> {
        store.ids().map(|id| self.param(store.name(), id)).collect()
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<S>> {
        self.kept.get(&v)
    }

    pub fn has_store(&self, store: &str) -> bool {
        self.params.keys().any(|(s, _)| s == store)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a scalar. Gradients of `keep` variables are retained.
    pub fn backward(&self, loss: Var, keep: &[Var]) -> Gradients<S> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), S::one()));
        let mut kept = HashMap::new();

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match if keep.contains(&Var(i)) { grads[i].clone() } else { grads[i].take() } {
                Some(g) => g,
                None => continue,
            };
            if keep.contains(&Var(i)) {
                kept.insert(Var(i), g.clone());
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let r = kernels::conv2d_backward(
                        self.val(*x),
                        self.val(*w),
                        &g,
                        *stride,
                        *pad,
                        (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))),
                    );
                    if let Some(dx) = r.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = r.dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, r.db) {
                        acc(&mut grads, *b, db.reshape(self.val(*b).shape()).expect("bias shape"));
                    }
                }
                Op::Pointwise { xs, w, b } => {
                    let xv: Vec<&Tensor<S>> = xs.iter().map(|v| self.val(*v)).collect();
                    let need_x: Vec<bool> = xs.iter().map(|v| self.needs(*v)).collect();
                    let (dxs, dw, db) = kernels::pointwise_backward(
                        &xv,
                        self.val(*w),
                        &g,
                        &need_x,
                        self.needs(*w),
                        b.is_some_and(|b| self.needs(b)),
                    );
                    for (v, dx) in xs.iter().zip(dxs) {
                        if let Some(dx) = dx {
                            acc(&mut grads, *v, dx);
                        }
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(&mut grads, *b, db.reshape(self.val(*b).shape()).expect("bias shape"));
                    }
                }
                Op::Depthwise { x, w } => {
                    let (dx, dw) = kernels::depthwise3x3_backward(self.val(*x), self.val(*w), &g, self.needs(*x), self.needs(*w));
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(&mut grads, *w, dw);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let (dx, dg, db) = if *batch_stats {
                        kernels::bn_train_backward(self.val(*x), self.val(*gamma), mean, inv_std, &g)
                    } else {
                        kernels::bn_fixed_backward(self.val(*x), self.val(*gamma), mean, inv_std, &g)
                    };
                    if self.needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        acc(&mut grads, *beta, db);
                    }
                }
                Op::Relu { x } => {
                    acc(&mut grads, *x, kernels::relu_backward(&node.value, &g));
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for v in xs {
                        let s = self.val(*v).shape();
                        let len = s.numel();
                        if self.needs(*v) {
                            let part = Tensor::from_vec(s, g.data()[off..off + len].to_vec()).expect("shape");
                            acc(&mut grads, *v, part);
                        }
                        off += len;
                    }
                }
                Op::GlobalAvgPool { x } => {
                    acc(&mut grads, *x, kernels::global_avg_pool_backward(self.val(*x).shape(), &g));
                }
                Op::Project { x, matrix } => {
                    acc(&mut grads, *x, kernels::project_backward(self.val(*x).shape(), matrix, &g));
                }
                Op::L2Normalize { x, norms, floor } => {
                    acc(&mut grads, *x, kernels::l2_normalize_backward(&node.value, norms, *floor, &g));
                }
                Op::SqDist { a, b } => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let n = av.shape().n();
                    let mut da = av.clone();
                    for (i, d) in da.data_mut().iter_mut().enumerate() {
                        *d = S::lit(2.0) * (av.data()[i] - bv.data()[i]) * g.data()[i % n];
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, da.map(|v| -v));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, da);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    acc(&mut grads, *logits, kernels::cross_entropy_backward(probs, labels, &g));
                }
                Op::Mean { x } => {
                    let s = self.val(*x).shape();
                    let k = g.item() / S::lit(s.numel() as f64);
                    acc(&mut grads, *x, Tensor::full(s, k));
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    acc(&mut grads, *x, g.map(|v| v * k));
                }
                Op::Charbonnier { pred, target, eps } => {
                    let (p, t) = (self.val(*pred), self.val(*target));
                    if self.needs(*pred) {
                        acc(&mut grads, *pred, kernels::charbonnier_backward(p, t, *eps, g.item()));
                    }
                    if self.needs(*target) {
                        acc(&mut grads, *target, kernels::charbonnier_backward(p, t, *eps, -g.item()));
                    }
                }
                Op::RecoveryLiteral { pred, target } => {
                    let (p, t) = (self.val(*pred), self.val(*target));
                    if self.needs(*pred) {
                        acc(&mut grads, *pred, kernels::recovery_literal_backward(p, t, g.item()));
                    }
                    if self.needs(*target) {
                        acc(&mut grads, *target, kernels::recovery_literal_backward(p, t, -g.item()));
                    }
                }
            }
        }

        let mut params = HashMap::new();
        for (store, id, var) in &self.params {
            if var.0 <= loss.0 {
                if let Some(g) = grads[var.0].take() {
                    params.insert((store.clone(), *id), g);
                }
            }
        }
        Gradients { params, kept }
    }
}

impl<S: Scalar> Ops<S> for Tape<S> {
    type V = Var;

    fn constant(&mut self, t: Tensor<S>) -> Var {
        self.input(t, false)
    }

    fn input(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some((_, _, v)) = self.params.iter().find(|(s, p, _)| s == store.name() && *p == id) {
            return *v;
        }
        let trainable = store.kind(id) == ParamKind::Trainable;
        let v = self.input(store.get(id).clone(), trainable);
        if trainable {
            self.params.push((store.name().to_string(), id, v));
        }
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<S> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), stride, pad)?;
        let mut ins = vec![*x, *w];
        ins.extend(b.copied());
        Ok(self.push(y, Op::Conv { x: *x, w: *w, b: b.copied(), stride, pad }, &ins))
    }

    fn pointwise(&mut self, xs: &[Var], w: &Var, b: Option<&Var>) -> Result<Var> {
        let xv: Vec<&Tensor<S>> = xs.iter().map(|v| self.val(*v)).collect();
        let y = kernels::pointwise(&xv, self.val(*w), b.map(|b| self.val(*b)))?;
        let mut ins = xs.to_vec();
        ins.push(*w);
        ins.extend(b.copied());
        Ok(self.push(y, Op::Pointwise { xs: xs.to_vec(), w: *w, b: b.copied() }, &ins))
    }

    fn depthwise3x3(&mut self, x: &Var, w: &Var) -> Result<Var> {
        let y = kernels::depthwise3x3(self.val(*x), self.val(*w))?;
        Ok(self.push(y, Op::Depthwise { x: *x, w: *w }, &[*x, *w]))
    }

    fn batch_norm_train(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: S) -> Result<(Var, BnStats<S>)> {
        let stats = kernels::batch_stats(self.val(*x));
        let inv = kernels::inv_std(&stats.var, eps);
        let y = kernels::affine_normalize(self.val(*x), self.val(*gamma), self.val(*beta), &stats.mean, &inv)?;
        let op = Op::BatchNorm { x: *x, gamma: *gamma, beta: *beta, mean: stats.mean.clone(), inv_std: inv, batch_stats: true };
        Ok((self.push(y, op, &[*x, *gamma, *beta]), stats))
    }

    fn batch_norm_eval(&mut self, x: &Var, gamma: &Var, beta: &Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let inv = kernels::inv_std(var, eps);
        let y = kernels::affine_normalize(self.val(*x), self.val(*gamma), self.val(*beta), mean, &inv)?;
        let op = Op::BatchNorm { x: *x, gamma: *gamma, beta: *beta, mean: mean.to_vec(), inv_std: inv, batch_stats: false };
        Ok(self.push(y, op, &[*x, *gamma, *beta]))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = kernels::relu(self.val(*x));
        self.push(y, Op::Relu { x: *x }, &[*x])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::add(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }, &[*a, *b]))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<S>> = xs.iter().map(|v| self.val(*v)).collect();
        let y = Tensor::concat(&parts)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let y = kernels::global_avg_pool(self.val(*x));
        self.push(y, Op::GlobalAvgPool { x: *x }, &[*x])
    }

    fn project(&mut self, x: &Var, matrix: &Rc<Tensor<S>>) -> Result<Var> {
        let y = kernels::project(self.val(*x), matrix)?;
        Ok(self.push(y, Op::Project { x: *x, matrix: matrix.clone() }, &[*x]))
    }

    fn l2_normalize(&mut self, x: &Var, floor: S) -> Result<Var> {
        let (y, norms) = kernels::l2_normalize(self.val(*x), floor)?;
        Ok(self.push(y, Op::L2Normalize { x: *x, norms, floor }, &[*x]))
    }

    fn sq_dist(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::sq_dist(self.val(*a), self.val(*b))?;
        Ok(self.push(y, Op::SqDist { a: *a, b: *b }, &[*a, *b]))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (y, probs) = kernels::cross_entropy(self.val(*logits), labels)?;
        Ok(self.push(y, Op::CrossEntropy { logits: *logits, labels: labels.to_vec(), probs }, &[*logits]))
    }

    fn mean(&mut self, x: &Var) -> Var {
        let t = self.val(*x);
        let m: f64 = t.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(S::lit(m)), Op::Mean { x: *x }, &[*x])
    }

    fn scale(&mut self, x: &Var, k: S) -> Var {
        let y = self.val(*x).map(|v| v * k);
        self.push(y, Op::Scale { x: *x, k }, &[*x])
    }

    fn charbonnier(&mut self, pred: &Var, target: &Var, eps: S) -> Result<Var> {
        let v = kernels::charbonnier(self.val(*pred), self.val(*target), eps)?;
        Ok(self.push(Tensor::scalar(v), Op::Charbonnier { pred: *pred, target: *target, eps }, &[*pred, *target]))
    }

    fn recovery_literal(&mut self, pred: &Var, target: &Var, eps: S) -> Result<Var> {
        let v = kernels::recovery_literal(self.val(*pred), self.val(*target), eps)?;
        Ok(self.push(Tensor::scalar(v), Op::RecoveryLiteral { pred: *pred, target: *target }, &[*pred, *target]))
    }
}

/// Value-only executor; intermediates are reference counted and freed
/// when the network code drops them.
#[derive(Default)]
pub struct Eager;

impl<S: Scalar> Ops<S> for Eager {
    type V = Rc<Tensor<S>>;

    fn constant(&mut self, t: Tensor<S>) -> Self::V {
        Rc::new(t)
    }

    fn input(&mut self, t: Tensor<S>, _requires_grad: bool) -> Self::V {
        Rc::new(t)
    }

    fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Self::V {
        Rc::new(store.get(id).clone())
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<S> {
        v
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, stride: usize, pad: usize) -> Result<Self::V> {
        Ok(Rc::new(kernels::conv2d(x, w, b.map(|b| &**b), stride, pad)?))
    }

    fn pointwise(&mut self, xs: &[Self::V], w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        let xv: Vec<&Tensor<S>> = xs.iter().map(|v| &**v).collect();
        Ok(Rc::new(kernels::pointwise(&xv, w, b.map(|b| &**b))?))
    }

    fn depthwise3x3(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::depthwise3x3(x, w)?))
    }

    fn batch_norm_train(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: S) -> Result<(Self::V, BnStats<S>)> {
        let stats = kernels::batch_stats(x);
        let inv = kernels::inv_std(&stats.var, eps);
        let y = kernels::affine_normalize(x, gamma, beta, &stats.mean, &inv)?;
        Ok((Rc::new(y), stats))
    }

    fn batch_norm_eval(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, mean: &[S], var: &[S], eps: S) -> Result<Self::V> {
        let inv = kernels::inv_std(var, eps);
        Ok(Rc::new(kernels::affine_normalize(x, gamma, beta, mean, &inv)?))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        Rc::new(kernels::relu(x))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::add(a, b)?))
    }

    fn concat(&mut self, xs: &[Self::V]) -> Result<Self::V> {
        let parts: Vec<&Tensor<S>> = xs.iter().map(|v| &**v).collect();
        Ok(Rc::new(Tensor::concat(&parts)?))
    }

    fn global_avg_pool(&mut self, x: &Self::V) -> Self::V {
        Rc::new(kernels::global_avg_pool(x))
    }

    fn project(&mut self, x: &Self::V, matrix: &Rc<Tensor<S>>) -> Result<Self::V> {
        Ok(Rc::new(kernels::project(x, matrix)?))
    }

    fn l2_normalize(&mut self, x: &Self::V, floor: S) -> Result<Self::V> {
        Ok(Rc::new(kernels::l2_normalize(x, floor)?.0))
    }

    fn sq_dist(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(kernels::sq_dist(a, b)?))
    }

    fn cross_entropy(&mut self, logits: &Self::V, labels: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(kernels::cross_entropy(logits, labels)?.0))
    }

    fn mean(&mut self, x: &Self::V) -> Self::V {
        let m: f64 = x.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / x.len() as f64;
        Rc::new(Tensor::scalar(S::lit(m)))
    }

    fn scale(&mut self, x: &Self::V, k: S) -> Self::V {
        Rc::new(x.map(|v| v * k))
    }

    fn charbonnier(&mut self, pred: &Self::V, target: &Self::V, eps: S) -> Result<Self::V> {
        Ok(Rc::new(Tensor::scalar(kernels::charbonnier(pred, target, eps)?)))
    }

    fn recovery_literal(&mut self, pred: &Self::V, target: &Self::V, eps: S) -> Result<Self::V> {
        Ok(Rc::new(Tensor::scalar(kernels::recovery_literal(pred, target, eps)?)))
    }
}

/// Sum of scalars built from `add`.
pub fn sum_all<S: Scalar, C: Ops<S>>(ctx: &mut C, xs: &[C::V]) -> Result<C::V> {
    let mut it = xs.iter();
    let mut acc = it.next().cloned().unwrap_or_else(|| ctx.constant(Tensor::scalar(S::zero())));
    for x in it {
        acc = ctx.add(&acc, x)?;
    }
    Ok(acc)
}

/// Shape helper for code that needs extents without borrowing the context.
pub fn shape_of<S: Scalar, C: Ops<S>>(ctx: &C, v: &C::V) -> Shape {
    ctx.value(v).shape()
}
