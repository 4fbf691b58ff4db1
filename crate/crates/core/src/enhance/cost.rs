//! Parameter and operation counts derived from a [`NetworkSpec`].

use serde::{Deserialize, Serialize};

use super::arch::{LayerKind, NetworkSpec, TRUNK_WIDTH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvShape {
    /// Dense `k×k` kernel.
    Dense { kernel: usize, stride: usize },
    /// Per-channel 3×3, stride 1.
    Depthwise,
}

/// One convolution of the network, with the normalisation that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub shape: ConvShape,
    pub c_in: usize,
    pub c_out: usize,
    pub bias: bool,
    pub batch_norm: bool,
}

impl ConvDesc {
    pub fn dense(name: impl Into<String>, kernel: usize, c_in: usize, c_out: usize, bias: bool, batch_norm: bool) -> Self {
        Self { name: name.into(), shape: ConvShape::Dense { kernel, stride: 1 }, c_in, c_out, bias, batch_norm }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), shape: ConvShape::Depthwise, c_in: channels, c_out: channels, bias: false, batch_norm: true }
    }

    pub fn weight_count(&self) -> usize {
        match self.shape {
            ConvShape::Dense { kernel, .. } => kernel * kernel * self.c_in * self.c_out,
            ConvShape::Depthwise => 9 * self.c_out,
        }
    }

    pub fn params(&self) -> usize {
        self.weight_count() + if self.bias { self.c_out } else { 0 } + if self.batch_norm { 2 * self.c_out } else { 0 }
    }

    /// Multiply-accumulates for an `h×w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let stride = match self.shape {
            ConvShape::Dense { stride, .. } => stride,
            ConvShape::Depthwise => 1,
        };
        (self.weight_count() * h.div_ceil(stride) * w.div_ceil(stride)) as u64
    }

}

impl NetworkSpec {
    /// Every convolution of one stage in execution order. Parameter names
    /// of the model follow the descriptor names.
    pub fn convs(&self) -> Vec<ConvDesc> {
        let w = TRUNK_WIDTH;
        let mut out = vec![ConvDesc::dense("stem", 3, 2 * self.image_channels, w, false, true)];
        let graphs = self.block_graphs();
        let last = graphs.len() - 1;
        for (b, g) in graphs.iter().enumerate() {
            for layer in &g.layers {
                let p = format!("b{b}.l{}", layer.index);
                match self.layer_kind {
                    LayerKind::Separable => {
                        out.push(ConvDesc::dense(format!("{p}.pw"), 1, layer.in_channels, layer.out_channels, false, false));
                        out.push(ConvDesc::depthwise(format!("{p}.dw"), layer.out_channels));
                    }
                    LayerKind::Full => {
                        let c_in = match layer.bottleneck {
                            Some(neck) => {
                                out.push(ConvDesc::dense(format!("{p}.neck"), 1, layer.in_channels, neck, false, true));
                                neck
                            }
                            None => layer.in_channels,
                        };
                        out.push(ConvDesc::dense(format!("{p}.conv"), 3, c_in, layer.out_channels, false, true));
                    }
                }
            }
            out.push(ConvDesc::dense(format!("b{b}.trans"), 1, g.transition_in(), w, true, false));
            out.push(ConvDesc::dense(format!("b{b}.fuse"), 1, 2 * w, w, false, true));
            if b == last {
                out.push(ConvDesc::dense("out", 3, w, self.image_channels, true, false));
            } else {
                out.push(ConvDesc::dense(format!("b{b}.tail"), 3, w, w, false, true));
            }
        }
        out
    }
}

/// Trainable parameter count of the network (shared across stages).
pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.convs().iter().map(ConvDesc::params).sum()
}

/// FLOPs of `stages` recursion passes at `h×w` in the convention of the
/// reference cost table, where one multiply-accumulate counts as one
/// operation. Twice this number is the strict add-plus-multiply count.
pub fn count_flops(spec: &NetworkSpec, h: usize, w: usize, stages: usize) -> u64 {
    count_macs(spec, h, w, stages)
}

/// Multiply-accumulates of `stages` recursion passes at `h×w`.
pub fn count_macs(spec: &NetworkSpec, h: usize, w: usize, stages: usize) -> u64 {
    stages as u64 * spec.convs().iter().map(|c| c.macs(h, w)).sum::<u64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub variant: String,
    pub height: usize,
    pub width: usize,
    pub stages: usize,
    pub params: usize,
    pub flops: u64,
    pub macs: u64,
}

impl CostSummary {
    pub fn of(spec: &NetworkSpec, h: usize, w: usize, stages: usize) -> Self {
        Self {
            variant: spec.variant.to_string(),
            height: h,
            width: w,
            stages,
            params: count_params(spec),
            flops: count_flops(spec, h, w, stages),
            macs: count_macs(spec, h, w, stages),
        }
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn macs_g(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::arch::{HBlockSpec, Variant};

    #[test]
    fn single_conv() {
        let c = ConvDesc::dense("c", 3, 3, 3, true, false);
        assert_eq!(c.params(), 84);
        assert_eq!(c.macs(10, 7), 81 * 70);
    }

    #[test]
    fn stages_and_pixels_scale_linearly() {
        for v in Variant::NAMED {
            let s = NetworkSpec::build(v).unwrap();
            assert_eq!(count_flops(&s, 64, 32, 3), 3 * count_flops(&s, 64, 32, 1));
            assert_eq!(count_flops(&s, 128, 64, 1), 4 * count_flops(&s, 64, 32, 1));
        }
    }

    #[test]
    fn hand_counted_tiny_net() {
        // one depth-2 block, k=4: widths [4, 32]; layer 2 reads {1, 0}
        let s = NetworkSpec::custom(vec![HBlockSpec { depth: 2, growth: 4 }], 1).unwrap();
        let stem = 9 * 6 * 32 + 64;
        let l1 = 32 * 4 + 9 * 4 + 8;
        let l2 = 36 * 32 + 9 * 32 + 64;
        let trans = (4 + 32) * 32 + 32;
        let fuse = 64 * 32 + 64;
        let out = 9 * 32 * 3 + 3;
        assert_eq!(count_params(&s), stem + l1 + l2 + trans + fuse + out);
    }
}
