//! Parameterised enhancement network and its recursive forward pass.

use std::collections::HashMap;

use super::arch::{HBlockGraph, LayerKind, NetworkSpec};
use super::cost::{ConvDesc, ConvShape};
use crate::autograd::Ops;
use crate::error::{Error, Result};
use crate::nn::{self, BnUpdate, ConvIds, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Shape;

pub const STORE_NAME: &str = "en";

/// Outputs of a recursive pass.
pub struct EnhanceOutput<V> {
    /// `x^1 .. x^T`, unclamped.
    pub stages: Vec<V>,
    /// Trunk activation feeding the output convolution in the last stage.
    pub last_features: V,
}

#[derive(Clone, Debug)]
pub struct EnhanceNet<S> {
    spec: NetworkSpec,
    store: ParamStore<S>,
    convs: HashMap<String, ConvIds>,
    graphs: Vec<HBlockGraph>,
}

impl<S: Scalar> EnhanceNet<S> {
    /// Fresh network with seeded fan-in scaled initialisation.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(STORE_NAME);
        let mut convs = HashMap::new();
        for d in spec.convs() {
            let shape = match d.shape {
                ConvShape::Dense { kernel, .. } => Shape::new(d.c_out, d.c_in, kernel, kernel),
                ConvShape::Depthwise => Shape::new(d.c_out, 1, 3, 3),
            };
            let ids = ConvIds::add(&mut store, &d.name, shape, d.bias, d.batch_norm, seed);
            convs.insert(d.name.clone(), ids);
        }
        let graphs = spec.block_graphs();
        Ok(Self { spec, store, convs, graphs })
    }

    /// Network whose tensors are taken from `store` (names and shapes must match).
    pub fn from_store(spec: NetworkSpec, store: ParamStore<S>) -> Result<Self> {
        let mut net = Self::new(spec, 0)?;
        net.store.load_from(&store)?;
        for (dst, src) in net.store.entries().iter().zip(store.entries()) {
            if dst.kind != src.kind {
                return Err(Error::Checkpoint(format!("entry `{}` has kind {:?}, expected {:?}", src.name, src.kind, dst.kind)));
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn conv_descs(&self) -> Vec<ConvDesc> {
        self.spec.convs()
    }

    fn ids(&self, name: &str) -> ConvIds {
        self.convs[name]
    }

    /// Run all stages on a `[3, N, H, W]` batch.
    pub fn forward<C: Ops<S>>(&self, ctx: &mut C, bad: &C::V, mode: Mode, updates: &mut Vec<BnUpdate<S>>) -> Result<EnhanceOutput<C::V>> {
        self.forward_stages(ctx, bad, self.spec.stages, mode, updates)
    }

    pub fn forward_stages<C: Ops<S>>(
        &self,
        ctx: &mut C,
        bad: &C::V,
        stages: usize,
        mode: Mode,
        updates: &mut Vec<BnUpdate<S>>,
    ) -> Result<EnhanceOutput<C::V>> {
        let c = ctx.value(bad).shape().c();
        if c != self.spec.image_channels {
            return Err(Error::Shape(format!("enhancer expects {} channels, got {c}", self.spec.image_channels)));
        }
        if stages < 1 {
            return Err(Error::InvalidParameter("at least one stage is required".into()));
        }
        let mut prev = bad.clone();
        let mut outs = Vec::with_capacity(stages);
        let mut feat = None;
        for _ in 0..stages {
            let (x, f) = self.stage(ctx, bad, &prev, mode, updates)?;
            outs.push(x.clone());
            feat = Some(f);
            prev = x;
        }
        Ok(EnhanceOutput { stages: outs, last_features: feat.expect("at least one stage") })
    }

    fn stage<C: Ops<S>>(&self, ctx: &mut C, bad: &C::V, prev: &C::V, mode: Mode, up: &mut Vec<BnUpdate<S>>) -> Result<(C::V, C::V)> {
        let st = &self.store;
        let x = ctx.concat(&[bad.clone(), prev.clone()])?;
        let stem = self.ids("stem");
        let y = nn::conv(ctx, st, stem, &x, 1, 1)?;
        let mut trunk = nn::finish(ctx, st, stem, y, mode, up)?;
        let last = self.graphs.len() - 1;
        for (b, graph) in self.graphs.iter().enumerate() {
            let hb = self.hblock(ctx, b, graph, &trunk, mode, up)?;
            let fuse = self.ids(&format!("b{b}.fuse"));
            let w = ctx.param(st, fuse.weight);
            let y = ctx.pointwise(&[trunk.clone(), hb], &w, None)?;
            let y = nn::finish(ctx, st, fuse, y, mode, up)?;
            let sum = ctx.add(&trunk, &y)?;
            if b == last {
                let out = nn::conv(ctx, st, self.ids("out"), &sum, 1, 1)?;
                return Ok((out, sum));
            }
            let tail = self.ids(&format!("b{b}.tail"));
            let y = nn::conv(ctx, st, tail, &sum, 1, 1)?;
            trunk = nn::finish(ctx, st, tail, y, mode, up)?;
        }
        unreachable!("network has at least one block")
    }

    fn hblock<C: Ops<S>>(
        &self,
        ctx: &mut C,
        b: usize,
        graph: &HBlockGraph,
        input: &C::V,
        mode: Mode,
        up: &mut Vec<BnUpdate<S>>,
    ) -> Result<C::V> {
        let st = &self.store;
        let depth = graph.layers.len();
        // last reader of each activation; the transition counts as layer depth + 1
        let mut last_read = vec![0usize; depth + 1];
        for layer in &graph.layers {
            for &i in &layer.inputs {
                last_read[i] = last_read[i].max(layer.index);
            }
        }
        for &i in &graph.outputs {
            last_read[i] = depth + 1;
        }
        let mut acts: Vec<Option<C::V>> = vec![None; depth + 1];
        acts[0] = Some(input.clone());
        for layer in &graph.layers {
            let l = layer.index;
            let srcs: Vec<C::V> = layer.inputs.iter().map(|&i| acts[i].clone().expect("live activation")).collect();
            let p = format!("b{b}.l{l}");
            let y = match self.spec.layer_kind {
                LayerKind::Separable => {
                    let pw = self.ids(&format!("{p}.pw"));
                    let w = ctx.param(st, pw.weight);
                    let y = ctx.pointwise(&srcs, &w, None)?;
                    let dw = self.ids(&format!("{p}.dw"));
                    let w = ctx.param(st, dw.weight);
                    let y = ctx.depthwise3x3(&y, &w)?;
                    nn::finish(ctx, st, dw, y, mode, up)?
                }
                LayerKind::Full => {
                    let src = if layer.bottleneck.is_some() {
                        let neck = self.ids(&format!("{p}.neck"));
                        let w = ctx.param(st, neck.weight);
                        let y = ctx.pointwise(&srcs, &w, None)?;
                        nn::finish(ctx, st, neck, y, mode, up)?
                    } else if srcs.len() > 1 {
                        ctx.concat(&srcs)?
                    } else {
                        srcs[0].clone()
                    };
                    let conv = self.ids(&format!("{p}.conv"));
                    let y = nn::conv(ctx, st, conv, &src, 1, 1)?;
                    nn::finish(ctx, st, conv, y, mode, up)?
                }
            };
            acts[l] = Some(y);
            for &i in &layer.inputs {
                if i > 0 && last_read[i] == l {
                    acts[i] = None;
                }
            }
        }
        let srcs: Vec<C::V> = graph.outputs.iter().map(|&i| acts[i].clone().expect("emitted activation")).collect();
        let trans = self.ids(&format!("b{b}.trans"));
        let w = ctx.param(st, trans.weight);
        let bias = ctx.param(st, trans.bias.expect("transition has bias"));
        ctx.pointwise(&srcs, &w, Some(&bias))
    }
}
