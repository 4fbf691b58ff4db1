//! Frozen perception networks that supply the task loss and the last
//! feature map used by the identity term.
//!
//! Any network can take part in joint training by implementing [`TaskHead`]:
//! a forward pass returning its outputs and last feature map, a loss against
//! its own label type, and a per-sample correctness test for reporting.

pub mod scenes;
pub mod toy;

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use scenes::{load_toy_dataset, render_toy_scene, write_toy_dataset, ToyDataset, ToyLabel, ToySample};
pub use toy::{head_loss, pretrain_toy_head, PretrainConfig, PretrainReport, ToyHead, ToyHeadConfig, ToyPrediction};

/// What a head predicts and what its last feature map looks like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDescriptor {
    pub name: String,
    pub prediction: String,
    pub loss: String,
    pub input_channels: usize,
    pub feature_channels: usize,
    /// Number of stride-2, padding-1, 3×3 reductions before the last feature map.
    pub downsamplings: usize,
    /// Architecture parameters needed to rebuild the head.
    pub config: serde_json::Value,
}

impl HeadDescriptor {
    /// `(channels, height, width)` of the last feature map for an input of `h×w`.
    pub fn feature_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let half = |v: usize| v.div_ceil(2);
        let (mut h, mut w) = (h, w);
        for _ in 0..self.downsamplings {
            (h, w) = (half(h), half(w));
        }
        (self.feature_channels, h, w)
    }
}

/// Outputs of one head pass.
pub struct HeadOutput<V> {
    /// Task-specific prediction tensors.
    pub outputs: Vec<V>,
    /// The last convolutional feature map.
    pub features: V,
}

pub trait TaskHead<S: Scalar> {
    type Label: Clone + fmt::Debug + Serialize + DeserializeOwned;

    fn descriptor(&self) -> HeadDescriptor;

    fn store(&self) -> &ParamStore<S>;

    /// Deterministic pass over a `[3, N, H, W]` batch with frozen parameters.
    fn forward<C: Ops<S>>(&self, ctx: &mut C, images: &C::V) -> Result<HeadOutput<C::V>>;

    /// Batch-mean task loss.
    fn loss<C: Ops<S>>(&self, ctx: &mut C, out: &HeadOutput<C::V>, labels: &[Self::Label]) -> Result<C::V>;

    /// Whether each sample's prediction counts as correct.
    fn hits(&self, outputs: &[&Tensor<S>], labels: &[Self::Label]) -> Result<Vec<bool>>;
}

/// Error unless every entry of a head store is frozen or a buffer.
pub fn ensure_frozen<S: Scalar>(store: &ParamStore<S>) -> Result<()> {
    if store.is_empty() {
        return Err(Error::Contract(format!("task head `{}` has no parameters loaded", store.name())));
    }
    match store.entries().iter().find(|e| e.kind == ParamKind::Trainable) {
        Some(e) => Err(Error::Contract(format!("task head parameter `{}` is not frozen; pretrain or load the head first", e.name))),
        None => Ok(()),
    }
}

/// Stack single images into one `[C, N, H, W]` batch.
pub fn batch_images<S: Scalar>(images: &[&ImageTensor<S>]) -> Result<Tensor<S>> {
    if images.is_empty() {
        return Err(Error::Empty("no images to batch".into()));
    }
    Tensor::stack_batch(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>())
}

/// Per-sample correctness of `head` on `images`, evaluated in chunks of `batch`.
pub fn head_hits<S: Scalar, H: TaskHead<S>>(head: &H, images: &[&ImageTensor<S>], labels: &[H::Label], batch: usize) -> Result<Vec<bool>> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let mut hits = Vec::with_capacity(images.len());
    for (imgs, labs) in images.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let mut ctx = Eager;
        let x = ctx.input(batch_images(imgs)?, false);
        let out = head.forward(&mut ctx, &x)?;
        let refs: Vec<&Tensor<S>> = out.outputs.iter().map(|o| &**o).collect();
        hits.extend(head.hits(&refs, labs)?);
    }
    Ok(hits)
}

pub fn head_accuracy<S: Scalar, H: TaskHead<S>>(head: &H, images: &[&ImageTensor<S>], labels: &[H::Label], batch: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("accuracy over zero images".into()));
    }
    let hits = head_hits(head, images, labels, batch)?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Parse manifest label values into a head's label type.
pub fn parse_labels<L: DeserializeOwned>(values: &[Option<&serde_json::Value>]) -> Result<Vec<L>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let v = v.ok_or_else(|| Error::Config(format!("sample {i} has no task label")))?;
            serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("sample {i} label {v}: {e}")))
        })
        .collect()
}
