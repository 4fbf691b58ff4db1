//! A head written outside the crate trains an enhancer through the unchanged
//! trainer, exercising only the public `TaskHead` hooks.

use std::path::PathBuf;

use clearpath::autograd::Ops;
use clearpath::enhance::{HBlockSpec, NetworkSpec};
use clearpath::nn::{self, ConvIds};
use clearpath::objective::ObjectiveConfig;
use clearpath::params::{ParamKind, ParamStore};
use clearpath::task_head::{HeadDescriptor, HeadOutput, TaskHead};
use clearpath::trainer::{evaluate, init_models, train_on_pairs, TrainingConfig};
use clearpath::weather::{Pair, VariantTag};
use clearpath::{Error, ImageTensor, Result, Scalar, Shape, Tensor};

const FEATURES: usize = 6;

/// Regresses the mean brightness of an image.
struct BrightnessHead {
    store: ParamStore<f32>,
    conv: ConvIds,
    out: ConvIds,
}

impl BrightnessHead {
    fn new(seed: u64, frozen: bool) -> Self {
        let mut store = ParamStore::new("brightness");
        let conv = ConvIds::add(&mut store, "conv", Shape::new(FEATURES, 3, 3, 3), true, false, seed);
        let out = ConvIds::add(&mut store, "out", Shape::new(1, FEATURES, 1, 1), true, false, seed);
        if frozen {
            store.freeze();
        }
        Self { store, conv, out }
    }
}

impl TaskHead<f32> for BrightnessHead {
    type Label = f64;

    fn descriptor(&self) -> HeadDescriptor {
        HeadDescriptor {
            name: "brightness".into(),
            prediction: "mean intensity".into(),
            loss: "squared error".into(),
            input_channels: 3,
            feature_channels: FEATURES,
            downsamplings: 1,
            config: serde_json::Value::Null,
        }
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn forward<C: Ops<f32>>(&self, ctx: &mut C, images: &C::V) -> Result<HeadOutput<C::V>> {
        let y = nn::conv(ctx, &self.store, self.conv, images, 2, 1)?;
        let features = ctx.relu(&y);
        let pooled = ctx.global_avg_pool(&features);
        let value = nn::conv(ctx, &self.store, self.out, &pooled, 1, 0)?;
        Ok(HeadOutput { outputs: vec![value], features })
    }

    fn loss<C: Ops<f32>>(&self, ctx: &mut C, out: &HeadOutput<C::V>, labels: &[f64]) -> Result<C::V> {
        let target = Tensor::from_vec(Shape::new(1, labels.len(), 1, 1), labels.iter().map(|&l| l as f32).collect())?;
        let target = ctx.constant(target);
        let sq = ctx.sq_dist(&out.outputs[0], &target)?;
        Ok(ctx.mean(&sq))
    }

    fn hits(&self, outputs: &[&Tensor<f32>], labels: &[f64]) -> Result<Vec<bool>> {
        let [value] = outputs else {
            return Err(Error::Shape(format!("expected one output, got {}", outputs.len())));
        };
        Ok(labels.iter().enumerate().map(|(i, &l)| (value.at(0, i, 0, 0).to_f64_lossy() - l).abs() < 0.05).collect())
    }
}

fn pairs() -> Vec<Pair<f32>> {
    (0..4)
        .flat_map(|i| {
            let clean = ImageTensor::from_fn(12, 12, 3, |y, x, c| ((y * 7 + x * 3 + c * 5 + i * 11) % 17) as f32 / 17.0);
            let mean = clean.data().iter().map(|&v| v as f64).sum::<f64>() / clean.data().len() as f64;
            VariantTag::ALL.into_iter().enumerate().map(move |(k, tag)| {
                let shade = 0.05 * k as f32 + 0.1;
                Pair {
                    clean_path: PathBuf::from(format!("/clean/{i}.png")),
                    degraded_path: PathBuf::from(format!("train/{i}_{tag}.png")),
                    degraded: ImageTensor::new(12, 12, 3, clean.data().iter().map(|v| 0.7 * v + shade).collect()).unwrap(),
                    clean: clean.clone(),
                    tag,
                    label: Some(serde_json::json!(mean)),
                }
            })
        })
        .collect()
}

#[test]
fn foreign_head_drives_training_without_changing() {
    let head = BrightnessHead::new(5, true);
    let before = head.store().clone();
    let spec = NetworkSpec::custom(vec![HBlockSpec { depth: 4, growth: 4 }], 2).unwrap();
    let (net, fie) = init_models::<f32>(spec, head.descriptor().feature_channels, 3).unwrap();
    let objective = ObjectiveConfig { alpha: 1.0, beta_fi: 0.1, ..Default::default() };
    let cfg = TrainingConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, milestones: vec![1], validation_fraction: 0.25, ..Default::default() };
    let tmp = tempfile::tempdir().unwrap();
    let data = pairs();
    let out = train_on_pairs(&data, net, fie, &head, &objective, &cfg, tmp.path()).unwrap();

    assert!(out.steps > 0);
    assert!(out.final_checkpoint.is_file() && out.run_log.is_file());
    assert!(head.store().bitwise_eq(&before, &[ParamKind::Frozen, ParamKind::Trainable, ParamKind::Buffer]));

    let scores = evaluate(&out.net, Some(&head), &data, 8).unwrap();
    assert_eq!(scores.len(), data.len());
    assert!(scores.iter().all(|s| s.hit_in.is_some() && s.hit_out.is_some() && s.psnr_out.is_finite()));
}

#[test]
fn unfrozen_foreign_head_is_refused() {
    let head = BrightnessHead::new(5, false);
    let spec = NetworkSpec::custom(vec![HBlockSpec { depth: 4, growth: 4 }], 1).unwrap();
    let (net, fie) = init_models::<f32>(spec, FEATURES, 0).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig { epochs: 1, milestones: vec![], ..Default::default() };
    let err = train_on_pairs(&pairs(), net, fie, &head, &ObjectiveConfig::default(), &cfg, tmp.path()).err().unwrap();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}
