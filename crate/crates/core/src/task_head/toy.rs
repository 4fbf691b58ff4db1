//! A small stripe-counting head: four stride-2 convolutions, global pooling
//! and two linear outputs (class logits and lean).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scenes::{ToySample, ToyLabel, CLASSES};
use super::{batch_images, ensure_frozen, head_accuracy, HeadDescriptor, HeadOutput, TaskHead};
use crate::autograd::{Ops, Tape};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, ConvIds};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::{Shape, Tensor};

pub const STORE_NAME: &str = "ht";
pub const HEAD_NAME: &str = "toy-stripes";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyHeadConfig {
    pub channels: [usize; 4],
}

impl Default for ToyHeadConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 32, 32] }
    }
}

#[derive(Clone, Debug)]
pub struct ToyHead<S> {
    config: ToyHeadConfig,
    store: ParamStore<S>,
    convs: [ConvIds; 4],
    class_fc: ConvIds,
    offset_fc: ConvIds,
}

impl<S: Scalar> ToyHead<S> {
    /// Freshly initialised, trainable head.
    pub fn new(config: ToyHeadConfig, seed_: u64) -> Result<Self> {
        if config.channels.contains(&0) {
            return Err(Error::InvalidParameter(format!("head channels {:?} must be positive", config.channels)));
        }
        let mut store = ParamStore::new(STORE_NAME);
        let mut c_in = 3;
        let convs = [0, 1, 2, 3].map(|i| {
            let c = config.channels[i];
            let ids = ConvIds::add(&mut store, &format!("conv{i}"), Shape::new(c, c_in, 3, 3), true, false, seed_);
            c_in = c;
            ids
        });
        let class_fc = ConvIds::add(&mut store, "class", Shape::new(CLASSES, c_in, 1, 1), true, false, seed_);
        let offset_fc = ConvIds::add(&mut store, "offset", Shape::new(1, c_in, 1, 1), true, false, seed_);
        Ok(Self { config, store, convs, class_fc, offset_fc })
    }

    /// Head with parameters taken from `store`, frozen.
    pub fn from_store(config: ToyHeadConfig, store: &ParamStore<S>) -> Result<Self> {
        let mut head = Self::new(config, 0)?;
        head.store.load_from(store)?;
        head.store.freeze();
        Ok(head)
    }

    pub fn config(&self) -> &ToyHeadConfig {
        &self.config
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    fn pass<C: Ops<S>>(&self, ctx: &mut C, images: &C::V) -> Result<HeadOutput<C::V>> {
        let c = ctx.value(images).shape().c();
        if c != 3 {
            return Err(Error::Shape(format!("task head expects 3 channels, got {c}")));
        }
        let mut x = images.clone();
        for ids in self.convs {
            let y = nn::conv(ctx, &self.store, ids, &x, 2, 1)?;
            x = ctx.relu(&y);
        }
        let pooled = ctx.global_avg_pool(&x);
        let logits = nn::conv(ctx, &self.store, self.class_fc, &pooled, 1, 0)?;
        let offset = nn::conv(ctx, &self.store, self.offset_fc, &pooled, 1, 0)?;
        Ok(HeadOutput { outputs: vec![logits, offset], features: x })
    }

    /// Class probabilities and lean per sample from raw outputs.
    pub fn predictions(outputs: &[&Tensor<S>]) -> Result<Vec<ToyPrediction>> {
        let [logits, offset] = outputs else {
            return Err(Error::Shape(format!("toy head produces 2 outputs, got {}", outputs.len())));
        };
        let n = logits.shape().n();
        Ok((0..n)
            .map(|i| {
                let l: Vec<f64> = (0..CLASSES).map(|k| logits.at(k, i, 0, 0).to_f64_lossy()).collect();
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                ToyPrediction { probs: [e[0] / z, e[1] / z, e[2] / z], offset: offset.at(0, i, 0, 0).to_f64_lossy() }
            })
            .collect())
    }

    fn graph_loss<C: Ops<S>>(ctx: &mut C, out: &HeadOutput<C::V>, labels: &[ToyLabel]) -> Result<C::V> {
        let [logits, offset] = &out.outputs[..] else {
            return Err(Error::Shape("toy head produces 2 outputs".into()));
        };
        let n = ctx.value(logits).shape().n();
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} predictions but {} labels", labels.len())));
        }
        let classes = labels.iter().map(class_index).collect::<Result<Vec<_>>>()?;
        let ce = ctx.cross_entropy(logits, &classes)?;
        let target = Tensor::from_vec(Shape::new(1, n, 1, 1), labels.iter().map(|l| S::lit(l.offset)).collect())?;
        let target = ctx.constant(target);
        let sq = ctx.sq_dist(offset, &target)?;
        let per_sample = ctx.add(&ce, &sq)?;
        Ok(ctx.mean(&per_sample))
    }
}

fn class_index(label: &ToyLabel) -> Result<usize> {
    if (1..=CLASSES).contains(&label.class) {
        Ok(label.class - 1)
    } else {
        Err(Error::InvalidParameter(format!("stripe count {} outside 1..={CLASSES}", label.class)))
    }
}

impl<S: Scalar> TaskHead<S> for ToyHead<S> {
    type Label = ToyLabel;

    fn descriptor(&self) -> HeadDescriptor {
        HeadDescriptor {
            name: HEAD_NAME.into(),
            prediction: "stripe count (3 classes) and lean".into(),
            loss: "cross-entropy plus squared lean error".into(),
            input_channels: 3,
            feature_channels: self.config.channels[3],
            downsamplings: 4,
            config: serde_json::to_value(&self.config).expect("plain config"),
        }
    }

    fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    fn forward<C: Ops<S>>(&self, ctx: &mut C, images: &C::V) -> Result<HeadOutput<C::V>> {
        ensure_frozen(&self.store)?;
        self.pass(ctx, images)
    }

    fn loss<C: Ops<S>>(&self, ctx: &mut C, out: &HeadOutput<C::V>, labels: &[ToyLabel]) -> Result<C::V> {
        Self::graph_loss(ctx, out, labels)
    }

    fn hits(&self, outputs: &[&Tensor<S>], labels: &[ToyLabel]) -> Result<Vec<bool>> {
        let preds = Self::predictions(outputs)?;
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!("{} predictions but {} labels", preds.len(), labels.len())));
        }
        Ok(preds.iter().zip(labels).map(|(p, l)| p.class() == l.class).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyPrediction {
    pub probs: [f64; CLASSES],
    pub offset: f64,
}

impl ToyPrediction {
    /// Predicted stripe count.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for k in 1..CLASSES {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        best + 1
    }
}

/// `−ln p[class] + (offset − target)²`.
pub fn head_loss(pred: &ToyPrediction, label: &ToyLabel) -> Result<f64> {
    let k = class_index(label)?;
    let sum: f64 = pred.probs.iter().sum();
    if pred.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!("prediction {:?} is not a distribution", pred.probs)));
    }
    Ok(-pred.probs[k].ln() + (pred.offset - label.offset).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Required held-out accuracy on clean scenes.
    pub threshold: f64,
    /// Random horizontal flips (count kept, lean negated).
    pub flip: bool,
    pub seed: u64,
    pub head: ToyHeadConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, learning_rate: 2e-3, threshold: 0.95, flip: true, seed: 0, head: ToyHeadConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub clean_accuracy: f64,
}

/// Train a fresh head on clean scenes, require `threshold` accuracy on
/// `test`, and return it frozen.
pub fn pretrain_toy_head<S: Scalar>(train: &[ToySample<S>], test: &[ToySample<S>], cfg: &PretrainConfig) -> Result<(ToyHead<S>, PretrainReport)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("pretraining needs clean train and test scenes".into()));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("pretraining needs positive steps and batch size".into()));
    }
    let mut head = ToyHead::<S>::new(cfg.head.clone(), seed::derive(cfg.seed, "head/init"))?;
    let mut opt = Adam::new(AdamConfig::default(), &head.store);
    let mut rng = seed::rng_for(cfg.seed, "head/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            if cfg.flip && rand::Rng::gen_bool(&mut rng, 0.5) {
                images.push(s.image.flip_horizontal());
                labels.push(ToyLabel { offset: -s.label.offset, ..s.label });
            } else {
                images.push(s.image.clone());
                labels.push(s.label);
            }
        }
        let refs: Vec<&ImageTensor<S>> = images.iter().collect();
        let mut tape = Tape::new();
        let x = tape.input(batch_images(&refs)?, false);
        let out = head.pass(&mut tape, &x)?;
        let loss = ToyHead::graph_loss(&mut tape, &out, &labels)?;
        let value = tape.value(&loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Diverged { step, reason: format!("head loss {value}") });
        }
        if step == 0 {
            first = value;
        }
        last = value;
        let grads = tape.backward(loss, &[]);
        let g = grads.for_store(&head.store);
        opt.step(&mut head.store, &g, cfg.learning_rate, 1.0)?;
    }
    head.freeze();
    let images: Vec<&ImageTensor<S>> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<ToyLabel> = test.iter().map(|s| s.label).collect();
    let clean_accuracy = head_accuracy(&head, &images, &labels, 64)?;
    let report = PretrainReport { steps: cfg.steps, first_loss: first, last_loss: last, clean_accuracy };
    if clean_accuracy < cfg.threshold {
        return Err(Error::HeadGate(format!(
            "held-out clean accuracy {clean_accuracy:.4} below {:.2} after {} steps (loss {first:.4} -> {last:.4})",
            cfg.threshold, cfg.steps
        )));
    }
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Eager;
    use crate::task_head::ToyDataset;

    #[test]
    fn loss_cases() {
        let label = ToyLabel { class: 2, offset: 0.25 };
        let perfect = ToyPrediction { probs: [0.0, 1.0, 0.0], offset: 0.75 };
        assert_eq!(head_loss(&perfect, &label).unwrap(), 0.25);
        let uniform = ToyPrediction { probs: [1.0 / 3.0; 3], offset: 0.25 };
        assert!((head_loss(&uniform, &label).unwrap() - 3f64.ln()).abs() < 1e-12);
        let p = ToyPrediction { probs: [0.2, 0.5, 0.3], offset: -0.1 };
        let want = -(0.3f64).ln() + (-0.1f64 - 0.6).powi(2);
        assert!((head_loss(&p, &ToyLabel { class: 3, offset: 0.6 }).unwrap() - want).abs() < 1e-12);
        assert!(head_loss(&p, &ToyLabel { class: 4, offset: 0.0 }).is_err());
        assert!(head_loss(&ToyPrediction { probs: [0.5, 0.6, 0.0], offset: 0.0 }, &label).is_err());
    }

    #[test]
    fn graph_loss_matches_scalar_definition() {
        let head = ToyHead::<f64>::from_store(ToyHeadConfig::default(), ToyHead::new(ToyHeadConfig::default(), 3).unwrap().store()).unwrap();
        let data = ToyDataset::<f64>::generate(3, 0, 32, 1);
        let imgs: Vec<_> = data.train.iter().map(|s| &s.image).collect();
        let labels: Vec<_> = data.train.iter().map(|s| s.label).collect();
        let mut ctx = Eager;
        let x = ctx.input(batch_images(&imgs).unwrap(), false);
        let out = head.forward(&mut ctx, &x).unwrap();
        let l = head.loss(&mut ctx, &out, &labels).unwrap().item();
        let preds = ToyHead::predictions(&[&out.outputs[0], &out.outputs[1]]).unwrap();
        let want = preds.iter().zip(&labels).map(|(p, l)| head_loss(p, l).unwrap()).sum::<f64>() / 3.0;
        assert!((l - want).abs() < 1e-12);
        assert_eq!(out.features.shape(), Shape::new(32, 3, 2, 2));
        let d = head.descriptor();
        assert_eq!(d.feature_shape(32, 32), (32, 2, 2));
        assert_eq!(d.feature_shape(64, 64), (32, 4, 4));
    }

    #[test]
    fn unfrozen_head_refuses_task_forward() {
        let head = ToyHead::<f32>::new(ToyHeadConfig::default(), 0).unwrap();
        let mut ctx = Eager;
        let x = ctx.input(Tensor::zeros(Shape::new(3, 1, 16, 16)), false);
        assert!(matches!(head.forward(&mut ctx, &x), Err(Error::Contract(_))));
        let mut frozen = head.clone();
        frozen.freeze();
        let a = frozen.forward(&mut ctx, &x).unwrap();
        let b = frozen.forward(&mut ctx, &x).unwrap();
        assert_eq!(*a.outputs[0], *b.outputs[0]);
        assert_eq!(*a.features, *b.features);
    }

    #[test]
    fn unreachable_gate_reports_diagnostics() {
        let data = ToyDataset::<f32>::generate(8, 8, 32, 2);
        let cfg = PretrainConfig { steps: 2, batch_size: 4, threshold: 1.01, ..Default::default() };
        match pretrain_toy_head(&data.train, &data.test, &cfg) {
            Err(Error::HeadGate(msg)) => assert!(msg.contains("after 2 steps"), "{msg}"),
            other => panic!("expected gate error, got {other:?}"),
        }
    }
}
