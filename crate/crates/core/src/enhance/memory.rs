//! Activation liveness accounting for one inference pass of a stage.
//!
//! The pass is modelled as a straight-line sequence of ops, each reading
//! earlier tensors and writing one new tensor. A tensor is resident from the
//! op that writes it through the last op that reads it; normalisation and
//! activation are treated as in-place. The peak is the largest resident
//! total over all ops.

use serde::{Deserialize, Serialize};

use super::arch::{build_hblock, LayerKind, NetworkSpec, TRUNK_WIDTH};
use super::rules::harmonic_inputs;

pub const ELEMENT_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Layer `l` reads `{ l - 2^j : 2^j | l }`; the block emits odd layers and the last.
    Harmonic,
    /// Layer `l` reads every earlier layer; the block emits all layers.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
struct OpRecord {
    name: String,
    inputs: Vec<TensorId>,
}

/// Straight-line op sequence with tensor sizes.
#[derive(Clone, Debug, Default)]
pub struct LivenessGraph {
    bytes: Vec<u64>,
    producer: Vec<usize>,
    ops: Vec<OpRecord>,
    outputs: Vec<TensorId>,
}

impl LivenessGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op(&mut self, name: impl Into<String>, inputs: &[TensorId], out_bytes: u64) -> TensorId {
        self.ops.push(OpRecord { name: name.into(), inputs: inputs.to_vec() });
        self.bytes.push(out_bytes);
        self.producer.push(self.ops.len() - 1);
        TensorId(self.bytes.len() - 1)
    }

    /// Keep `t` resident until the end of the sequence.
    pub fn mark_output(&mut self, t: TensorId) {
        self.outputs.push(t);
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn op_name(&self, i: usize) -> &str {
        &self.ops[i].name
    }

    pub fn bytes(&self, t: TensorId) -> u64 {
        self.bytes[t.0]
    }

    pub fn produced_at(&self, t: TensorId) -> usize {
        self.producer[t.0]
    }

    /// Index of the last op that reads `t`, or the op that wrote it.
    pub fn last_use(&self, t: TensorId) -> usize {
        if self.outputs.contains(&t) {
            return self.ops.len() - 1;
        }
        self.ops
            .iter()
            .enumerate()
            .rev()
            .find(|(_, op)| op.inputs.contains(&t))
            .map_or(self.producer[t.0], |(i, _)| i)
    }

    /// Resident bytes during each op.
    pub fn profile(&self) -> Vec<u64> {
        let mut delta = vec![0i64; self.ops.len() + 1];
        for t in 0..self.bytes.len() {
            let id = TensorId(t);
            delta[self.producer[t]] += self.bytes[t] as i64;
            delta[self.last_use(id) + 1] -= self.bytes[t] as i64;
        }
        let mut acc = 0i64;
        delta[..self.ops.len()]
            .iter()
            .map(|d| {
                acc += d;
                acc as u64
            })
            .collect()
    }

    pub fn peak(&self) -> u64 {
        self.profile().into_iter().max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residency {
    /// Freed before the block transition runs.
    Released,
    /// Held until the block transition consumes it.
    Emitted,
    /// The block input, held for the skip connection after the block.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub layer: usize,
    pub bytes: u64,
    pub residency: Residency,
    /// Op index after which the activation is freed.
    pub freed_after: usize,
}

/// Per-layer residency of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLedger {
    pub block: usize,
    pub entries: Vec<LedgerEntry>,
    /// Largest resident total while the block runs.
    pub peak_bytes: u64,
}

impl ActivationLedger {
    pub fn released(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.residency == Residency::Released).map(|e| e.layer).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub peak_bytes: u64,
    pub blocks: Vec<ActivationLedger>,
}

/// Build the liveness graph of one stage at `h×w`.
pub fn stage_graph(spec: &NetworkSpec, h: usize, w: usize, wiring: Wiring) -> (LivenessGraph, Vec<(usize, Vec<TensorId>, usize, usize)>) {
    let px = (h * w) as u64 * ELEMENT_BYTES;
    let mut g = LivenessGraph::new();
    let c = spec.image_channels as u64;
    let bad = g.op("input_bad", &[], c * px);
    let prev = g.op("input_prev", &[], c * px);
    let cat = g.op("concat", &[bad, prev], 2 * c * px);
    let mut trunk = g.op("stem", &[cat], TRUNK_WIDTH as u64 * px);
    let mut blocks = Vec::new();
    let last = spec.blocks.len() - 1;
    for (b, bs) in spec.blocks.iter().enumerate() {
        let graph = build_hblock(*bs, TRUNK_WIDTH, spec.layer_kind).expect("spec validated");
        let begin = g.op_count();
        let mut acts = vec![trunk];
        let mut widths = vec![TRUNK_WIDTH];
        for layer in &graph.layers {
            let l = layer.index;
            let inputs: Vec<usize> = match wiring {
                Wiring::Harmonic => harmonic_inputs(l),
                Wiring::Dense => (0..l).rev().collect(),
            };
            let srcs: Vec<TensorId> = inputs.iter().map(|&i| acts[i]).collect();
            let in_ch: usize = inputs.iter().map(|&i| widths[i]).sum();
            let out_bytes = layer.out_channels as u64 * px;
            let t = match spec.layer_kind {
                LayerKind::Separable => {
                    let tmp = g.op(format!("b{b}.l{l}.pw"), &srcs, out_bytes);
                    g.op(format!("b{b}.l{l}.dw"), &[tmp], out_bytes)
                }
                LayerKind::Full => {
                    let neck = match wiring {
                        Wiring::Harmonic => layer.bottleneck,
                        Wiring::Dense => layer.bottleneck.map(|_| super::rules::bottleneck_channels(in_ch, layer.out_channels)),
                    };
                    let src = match neck {
                        Some(n) => g.op(format!("b{b}.l{l}.neck"), &srcs, n as u64 * px),
                        None if srcs.len() > 1 => g.op(format!("b{b}.l{l}.concat"), &srcs, in_ch as u64 * px),
                        None => srcs[0],
                    };
                    g.op(format!("b{b}.l{l}.conv"), &[src], out_bytes)
                }
            };
            acts.push(t);
            widths.push(layer.out_channels);
        }
        let emitted: Vec<usize> = match wiring {
            Wiring::Harmonic => graph.outputs.clone(),
            Wiring::Dense => (1..=bs.depth).collect(),
        };
        let srcs: Vec<TensorId> = emitted.iter().map(|&i| acts[i]).collect();
        let trans = g.op(format!("b{b}.trans"), &srcs, TRUNK_WIDTH as u64 * px);
        let end = g.op_count() - 1;
        let fuse = g.op(format!("b{b}.fuse"), &[trunk, trans], TRUNK_WIDTH as u64 * px);
        let add = g.op(format!("b{b}.add"), &[trunk, fuse], TRUNK_WIDTH as u64 * px);
        trunk = if b == last {
            g.op("out", &[add], c * px)
        } else {
            g.op(format!("b{b}.tail"), &[add], TRUNK_WIDTH as u64 * px)
        };
        blocks.push((b, acts, begin, end));
    }
    g.mark_output(trunk);
    (g, blocks)
}

/// Peak resident activation bytes of one stage, with a per-block ledger.
pub fn peak_activation_memory(spec: &NetworkSpec, h: usize, w: usize) -> MemoryReport {
    peak_activation_memory_wired(spec, h, w, Wiring::Harmonic)
}

pub fn peak_activation_memory_wired(spec: &NetworkSpec, h: usize, w: usize, wiring: Wiring) -> MemoryReport {
    let (g, blocks) = stage_graph(spec, h, w, wiring);
    let profile = g.profile();
    let ledgers = blocks
        .into_iter()
        .map(|(b, acts, begin, end)| {
            let entries = acts
                .iter()
                .enumerate()
                .map(|(layer, &t)| {
                    let freed_after = g.last_use(t);
                    let residency = if layer == 0 {
                        Residency::Skip
                    } else if freed_after < end {
                        Residency::Released
                    } else {
                        Residency::Emitted
                    };
                    LedgerEntry { layer, bytes: g.bytes(t), residency, freed_after }
                })
                .collect();
            let peak_bytes = profile[begin..=end].iter().copied().max().unwrap_or(0);
            ActivationLedger { block: b, entries, peak_bytes }
        })
        .collect();
    MemoryReport { peak_bytes: profile.into_iter().max().unwrap_or(0), blocks: ledgers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::arch::{HBlockSpec, Variant};

    fn single(depth: usize, k: usize) -> NetworkSpec {
        NetworkSpec::custom(vec![HBlockSpec { depth, growth: k }], 1).unwrap()
    }

    #[test]
    fn even_layers_released_inside_block() {
        for depth in [4, 8, 16] {
            let r = peak_activation_memory(&single(depth, 14), 16, 16);
            let released = r.blocks[0].released();
            let expected: Vec<usize> = (2..=depth.saturating_sub(2)).step_by(2).collect();
            assert_eq!(released, expected, "depth {depth}");
        }
    }

    #[test]
    fn harmonic_beats_dense() {
        for kind in [LayerKind::Separable, LayerKind::Full] {
            let s = NetworkSpec::build(Variant::Layers33).unwrap().with_layer_kind(kind);
            let h = peak_activation_memory(&s, 64, 64).peak_bytes;
            let d = peak_activation_memory_wired(&s, 64, 64, Wiring::Dense).peak_bytes;
            assert!(h < d, "{kind:?}: {h} vs {d}");
        }
    }

    #[test]
    fn linear_chain_profile() {
        let mut g = LivenessGraph::new();
        let a = g.op("a", &[], 10);
        let b = g.op("b", &[a], 20);
        let c = g.op("c", &[b], 5);
        let d = g.op("d", &[a, c], 1);
        g.mark_output(d);
        assert_eq!(g.profile(), [10, 30, 35, 16]);
        assert_eq!(g.peak(), 35);
    }
}
