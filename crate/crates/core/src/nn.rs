//! Layer helpers shared by the enhancement network, the identity extractor
//! and the task heads.

use crate::autograd::{BnStats, Ops};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Shape;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are collected for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BnIds {
    pub fn add<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{prefix}.bn.gamma"), ParamKind::Trainable, channels, 1.0),
            beta: store.add_const(format!("{prefix}.bn.beta"), ParamKind::Trainable, channels, 0.0),
            mean: store.add_const(format!("{prefix}.bn.mean"), ParamKind::Buffer, channels, 0.0),
            var: store.add_const(format!("{prefix}.bn.var"), ParamKind::Buffer, channels, 1.0),
        }
    }
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<S> {
    pub ids: BnIds,
    pub stats: BnStats<S>,
}

/// Weight and optional bias / normalisation of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BnIds>,
}

impl ConvIds {
    /// Register a convolution weight of `shape` with fan-in scaled normal
    /// initialisation drawn from a stream named after `prefix`.
    pub fn add<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, shape: Shape, bias: bool, bn: bool, root_seed: u64) -> Self {
        let fan_in = shape.n() * shape.h() * shape.w();
        let mut rng = seed::rng_for(root_seed, &format!("{}/{prefix}", store.name()));
        let weight = store.add_he_normal(format!("{prefix}.w"), shape, fan_in, &mut rng);
        let bias = bias.then(|| store.add_const(format!("{prefix}.b"), ParamKind::Trainable, shape.c(), 0.0));
        let bn = bn.then(|| BnIds::add(store, prefix, shape.c()));
        Self { weight, bias, bn }
    }
}

pub fn batch_norm<S: Scalar, C: Ops<S>>(
    ctx: &mut C,
    store: &ParamStore<S>,
    ids: BnIds,
    x: &C::V,
    mode: Mode,
    updates: &mut Vec<BnUpdate<S>>,
) -> Result<C::V> {
    let gamma = ctx.param(store, ids.gamma);
    let beta = ctx.param(store, ids.beta);
    let eps = S::lit(BN_EPS);
    match mode {
        Mode::Train => {
            let (y, stats) = ctx.batch_norm_train(x, &gamma, &beta, eps)?;
            updates.push(BnUpdate { ids, stats });
            Ok(y)
        }
        Mode::Eval => ctx.batch_norm_eval(x, &gamma, &beta, store.get(ids.mean).data(), store.get(ids.var).data(), eps),
    }
}

/// Normalisation (when present) followed by ReLU.
pub fn finish<S: Scalar, C: Ops<S>>(
    ctx: &mut C,
    store: &ParamStore<S>,
    ids: ConvIds,
    y: C::V,
    mode: Mode,
    updates: &mut Vec<BnUpdate<S>>,
) -> Result<C::V> {
    let y = match ids.bn {
        Some(bn) => batch_norm(ctx, store, bn, &y, mode, updates)?,
        None => y,
    };
    Ok(ctx.relu(&y))
}

pub fn conv<S: Scalar, C: Ops<S>>(ctx: &mut C, store: &ParamStore<S>, ids: ConvIds, x: &C::V, stride: usize, pad: usize) -> Result<C::V> {
    let w = ctx.param(store, ids.weight);
    let b = ids.bias.map(|b| ctx.param(store, b));
    ctx.conv2d(x, &w, b.as_ref(), stride, pad)
}

/// Fold running-statistics updates into the buffers of `store`.
pub fn apply_bn_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &[BnUpdate<S>]) {
    let m = S::lit(BN_MOMENTUM);
    for u in updates {
        let unbiased = u.stats.unbiased_var();
        for (r, &v) in store.get_mut(u.ids.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (S::one() - m) * *r + m * v;
        }
        for (r, &v) in store.get_mut(u.ids.var).data_mut().iter_mut().zip(&unbiased) {
            *r = (S::one() - m) * *r + m * v;
        }
    }
}
