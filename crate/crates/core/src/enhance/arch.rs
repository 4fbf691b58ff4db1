//! Declarative description of the recursive enhancement network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rules::{bottleneck_channels, channel_width, harmonic_inputs, is_bottlenecked};
use crate::error::{Error, Result};

/// Width of every inter-block activation.
pub const TRUNK_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Layers33,
    Layers71,
    Custom,
}

impl Variant {
    pub const NAMED: [Variant; 2] = [Variant::Layers33, Variant::Layers71];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Layers33 => "layers33",
            Variant::Layers71 => "layers71",
            Variant::Custom => "custom",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers33" => Ok(Variant::Layers33),
            "layers71" => Ok(Variant::Layers71),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

/// How a block layer turns its concatenated inputs into `out_channels` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// 1×1 over the inputs followed by a per-channel 3×3.
    Separable,
    /// Dense 3×3 over the inputs; every fourth layer gets a 1×1 bottleneck first.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HBlockSpec {
    pub depth: usize,
    pub growth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub index: usize,
    pub inputs: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Width of the 1×1 bottleneck, when the layer has one.
    pub bottleneck: Option<usize>,
}

/// Resolved wiring of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HBlockGraph {
    pub spec: HBlockSpec,
    pub in_channels: usize,
    pub layers: Vec<LayerNode>,
    /// Layers concatenated into the block transition: odd layers plus the last.
    pub outputs: Vec<usize>,
    pub out_channels: usize,
}

impl HBlockGraph {
    pub fn width_of(&self, idx: usize) -> usize {
        if idx == 0 {
            self.in_channels
        } else {
            self.layers[idx - 1].out_channels
        }
    }

    pub fn transition_in(&self) -> usize {
        self.outputs.iter().map(|&i| self.width_of(i)).sum()
    }
}

/// Build the layer graph of a block fed with `in_channels` maps.
pub fn build_hblock(spec: HBlockSpec, in_channels: usize, kind: LayerKind) -> Result<HBlockGraph> {
    if spec.depth < 1 || spec.growth < 1 {
        return Err(Error::InvalidParameter(format!("block depth {} / growth {} must be positive", spec.depth, spec.growth)));
    }
    let mut widths = vec![in_channels];
    let mut layers = Vec::with_capacity(spec.depth);
    for l in 1..=spec.depth {
        let inputs = harmonic_inputs(l);
        let in_ch: usize = inputs.iter().map(|&i| widths[i]).sum();
        let out = if l == spec.depth { TRUNK_WIDTH } else { channel_width(spec.growth, l)? };
        let bottleneck = (kind == LayerKind::Full && is_bottlenecked(l)).then(|| bottleneck_channels(in_ch, out));
        widths.push(out);
        layers.push(LayerNode { index: l, inputs, in_channels: in_ch, out_channels: out, bottleneck });
    }
    let mut outputs: Vec<usize> = (1..spec.depth).filter(|l| l % 2 == 1).collect();
    outputs.push(spec.depth);
    Ok(HBlockGraph { spec, in_channels, layers, outputs, out_channels: TRUNK_WIDTH })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub blocks: Vec<HBlockSpec>,
    pub stages: usize,
    pub layer_kind: LayerKind,
    pub image_channels: usize,
}

impl NetworkSpec {
    pub fn build(variant: Variant) -> Result<Self> {
        let (depths, growth): (&[usize], &[usize]) = match variant {
            Variant::Layers71 => (&[8, 16, 16, 16, 4], &[14, 16, 20, 20, 40]),
            Variant::Layers33 => (&[8, 16, 4], &[14, 16, 40]),
            Variant::Custom => return Err(Error::UnknownVariant("custom".into())),
        };
        let blocks = depths.iter().zip(growth).map(|(&depth, &growth)| HBlockSpec { depth, growth }).collect();
        Self::custom(blocks, 3).map(|s| Self { variant, ..s })
    }

    pub fn custom(blocks: Vec<HBlockSpec>, stages: usize) -> Result<Self> {
        let spec = Self { variant: Variant::Custom, blocks, stages, layer_kind: LayerKind::Separable, image_channels: 3 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layer_kind(mut self, kind: LayerKind) -> Self {
        self.layer_kind = kind;
        self
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one block".into()));
        }
        if self.stages < 1 {
            return Err(Error::InvalidParameter("recursion needs at least one stage".into()));
        }
        if self.image_channels != 3 {
            return Err(Error::InvalidParameter("images must have 3 channels".into()));
        }
        for b in &self.blocks {
            build_hblock(*b, TRUNK_WIDTH, self.layer_kind)?;
        }
        Ok(())
    }

    pub fn block_graphs(&self) -> Vec<HBlockGraph> {
        self.blocks
            .iter()
            .map(|b| build_hblock(*b, TRUNK_WIDTH, self.layer_kind).expect("spec validated"))
            .collect()
    }

    /// Convolution layers of one stage: block layers plus stem, fuse, tail.
    pub fn depth(&self) -> usize {
        self.blocks.iter().map(|b| b.depth).sum::<usize>() + 1 + 2 * self.blocks.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Stage listing in the layout of the architecture table.
    pub fn table(&self) -> Vec<TableRow> {
        let w = TRUNK_WIDTH;
        let mut rows = vec![TableRow::new("Input", RowKind::Input, None, None)];
        rows.push(TableRow::new("Concat1", RowKind::Concat, None, Some(2 * self.image_channels)));
        rows.push(TableRow::new("Conv1", RowKind::Conv { kernel: 3, stride: 1 }, None, Some(w)));
        let mut conv = 1;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            rows.push(TableRow::new(format!("HBlock{}", i + 1), RowKind::HBlock { kernel: 3, stride: 1 }, Some(b.depth), Some(w)));
            rows.push(TableRow::new(format!("Concat{}", i + 2), RowKind::Concat, None, Some(2 * w)));
            conv += 1;
            rows.push(TableRow::new(format!("Conv{conv}"), RowKind::Conv { kernel: 1, stride: 1 }, None, Some(w)));
            rows.push(TableRow::new(format!("Add{}", i + 1), RowKind::Add, None, Some(w)));
            conv += 1;
            let out = if i == last { self.image_channels } else { w };
            rows.push(TableRow::new(format!("Conv{conv}"), RowKind::Conv { kernel: 3, stride: 1 }, None, Some(out)));
        }
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RowKind {
    Input,
    Concat,
    Conv { kernel: usize, stride: usize },
    HBlock { kernel: usize, stride: usize },
    Add,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    pub kind: RowKind,
    pub depth: Option<usize>,
    pub out_channels: Option<usize>,
}

impl TableRow {
    fn new(id: impl Into<String>, kind: RowKind, depth: Option<usize>, out_channels: Option<usize>) -> Self {
        Self { id: id.into(), kind, depth, out_channels }
    }
}
