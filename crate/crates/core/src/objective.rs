//! Recovery, task and identity losses and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autograd::{kernels, Ops};
use crate::enhance::EnhanceNet;
use crate::error::{Error, Result};
use crate::fie::IdentityProjector;
use crate::image::ImageTensor;
use crate::nn::{BnUpdate, Mode};
use crate::scalar::Scalar;
use crate::task_head::TaskHead;

/// Which form of the recovery penalty to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryForm {
    /// Mean of `sqrt(d² + ε²)`.
    #[default]
    Charbonnier,
    /// Mean of `d²` plus `ε²`.
    Literal,
}

/// Which stages contribute to the recovery term. Task and identity terms
/// always use the final stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePolicy {
    #[default]
    AllStages,
    FinalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub epsilon: f64,
    /// Task loss weight.
    pub alpha: f64,
    /// Identity loss weight.
    pub beta_fi: f64,
    pub recovery: RecoveryForm,
    pub stage_policy: StagePolicy,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { epsilon: 5e-3, alpha: 0.01, beta_fi: 0.1, recovery: RecoveryForm::Charbonnier, stage_policy: StagePolicy::AllStages }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta_fi >= 0.0 && self.beta_fi.is_finite()) {
            return Err(Error::Config(format!("loss weights alpha {} / beta {} must be >= 0", self.alpha, self.beta_fi)));
        }
        Ok(())
    }

    /// Whether the head has to run at all.
    pub fn uses_head(&self) -> bool {
        self.alpha > 0.0 || self.beta_fi > 0.0
    }
}

/// Mean Charbonnier penalty between two images.
pub fn charbonnier_loss<S: Scalar>(pred: &ImageTensor<S>, target: &ImageTensor<S>, epsilon: f64) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    Ok(kernels::charbonnier(&pred.to_tensor(), &target.to_tensor(), S::lit(epsilon))?.to_f64_lossy())
}

/// Scalar values of each term for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    /// Recovery loss summed over contributing stages.
    pub recovery: f64,
    pub task: f64,
    pub identity: f64,
    pub total: f64,
}

pub struct Objective<V> {
    pub total: V,
    pub terms: TermValues,
    /// Final-stage output.
    pub output: V,
}

/// Networks taking part in one objective evaluation.
pub struct Nets<'a, S, H> {
    pub enhancer: &'a EnhanceNet<S>,
    pub head: &'a H,
    pub identity: &'a IdentityProjector<S>,
}

/// Build the weighted objective on a batch of `[3, N, H, W]` images.
///
/// `labels` may be `None` only when `alpha` is zero.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<S, C, H>(
    ctx: &mut C,
    nets: &Nets<'_, S, H>,
    cfg: &ObjectiveConfig,
    degraded: &C::V,
    clean: &C::V,
    labels: Option<&[H::Label]>,
    mode: Mode,
    updates: &mut Vec<BnUpdate<S>>,
) -> Result<Objective<C::V>>
where
    S: Scalar,
    C: Ops<S>,
    H: TaskHead<S>,
{
    cfg.validate()?;
    if cfg.alpha > 0.0 && labels.is_none() {
        return Err(Error::Config("task loss weight is positive but the batch has no task labels".into()));
    }
    let value = |ctx: &C, v: &C::V| ctx.value(v).item().to_f64_lossy();
    let out = nets.enhancer.forward(ctx, degraded, mode, updates)?;
    let eps = S::lit(cfg.epsilon);
    let stages: &[C::V] = match cfg.stage_policy {
        StagePolicy::AllStages => &out.stages,
        StagePolicy::FinalOnly => &out.stages[out.stages.len() - 1..],
    };
    let mut recovery = Vec::with_capacity(stages.len());
    for x in stages {
        recovery.push(match cfg.recovery {
            RecoveryForm::Charbonnier => ctx.charbonnier(x, clean, eps)?,
            RecoveryForm::Literal => ctx.recovery_literal(x, clean, eps)?,
        });
    }
    let mut total = crate::autograd::sum_all(ctx, &recovery)?;
    let mut terms = TermValues { recovery: value(ctx, &total), ..Default::default() };
    let last = out.stages.last().expect("at least one stage").clone();
    if cfg.uses_head() {
        let head_out = nets.head.forward(ctx, &last)?;
        if let Some(labels) = labels {
            let task = nets.head.loss(ctx, &head_out, labels)?;
            terms.task = value(ctx, &task);
            if cfg.alpha > 0.0 {
                let weighted = ctx.scale(&task, S::lit(cfg.alpha));
                total = ctx.add(&total, &weighted)?;
            }
        }
        if cfg.beta_fi > 0.0 {
            let z_en = nets.identity.forward(ctx, &out.last_features)?;
            let z_ht = nets.identity.forward(ctx, &head_out.features)?;
            let d = ctx.sq_dist(&z_en, &z_ht)?;
            let identity = ctx.mean(&d);
            terms.identity = value(ctx, &identity);
            let weighted = ctx.scale(&identity, S::lit(cfg.beta_fi));
            total = ctx.add(&total, &weighted)?;
        }
    }
    terms.total = value(ctx, &total);
    Ok(Objective { total, terms, output: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eager, Tape};
    use crate::enhance::{HBlockSpec, NetworkSpec};
    use crate::params::ParamKind;
    use crate::task_head::{batch_images, ToyDataset, ToyHead, ToyHeadConfig, ToyLabel};
    use crate::tensor::Tensor;

    struct Fixture {
        en: EnhanceNet<f64>,
        head: ToyHead<f64>,
        fie: IdentityProjector<f64>,
        bad: Tensor<f64>,
        clean: Tensor<f64>,
        labels: Vec<ToyLabel>,
    }

    fn fixture(n: usize) -> Fixture {
        let spec = NetworkSpec::custom(vec![HBlockSpec { depth: 4, growth: 4 }], 2).unwrap();
        let en = EnhanceNet::new(spec, 1).unwrap();
        let mut head = ToyHead::new(ToyHeadConfig::default(), 2).unwrap();
        head.freeze();
        let fie = IdentityProjector::new(&[32, 32], 3).unwrap();
        let data = ToyDataset::<f64>::generate(n, 0, 16, 4);
        let clean_imgs: Vec<_> = data.train.iter().map(|s| &s.image).collect();
        let clean = batch_images(&clean_imgs).unwrap();
        let bad = clean.map(|v| 0.6 * v + 0.3);
        let labels = data.train.iter().map(|s| s.label).collect();
        Fixture { en, head, fie, bad, clean, labels }
    }

    fn eval(f: &Fixture, cfg: &ObjectiveConfig, bad: &Tensor<f64>, clean: &Tensor<f64>, labels: &[ToyLabel]) -> TermValues {
        let mut ctx = Eager;
        let nets = Nets { enhancer: &f.en, head: &f.head, identity: &f.fie };
        let b = ctx.input(bad.clone(), false);
        let c = ctx.input(clean.clone(), false);
        total_objective(&mut ctx, &nets, cfg, &b, &c, Some(labels), Mode::Train, &mut Vec::new()).unwrap().terms
    }

    #[test]
    fn charbonnier_values() {
        let a = ImageTensor::<f64>::filled(4, 5, 3, 0.3);
        assert_eq!(charbonnier_loss(&a, &a, 5e-3).unwrap(), 5e-3);
        let b = ImageTensor::<f64>::filled(4, 5, 3, 0.42);
        let want = (0.12f64 * 0.12 + 2.5e-5).sqrt();
        assert!((charbonnier_loss(&b, &a, 5e-3).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.1201).abs() < 1e-4);
        let c = ImageTensor::<f64>::from_fn(4, 5, 3, |y, x, ch| ((y + 2 * x + ch) % 7) as f64 / 7.0);
        let mae = c.data().iter().zip(a.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / c.data().len() as f64;
        assert!((charbonnier_loss(&c, &a, 1e-9).unwrap() - mae).abs() < 1e-8);
        assert!(charbonnier_loss(&c, &ImageTensor::filled(4, 4, 3, 0.0), 5e-3).is_err());
    }

    #[test]
    fn zero_weights_reduce_to_stage_summed_recovery() {
        let f = fixture(2);
        let cfg = ObjectiveConfig { alpha: 0.0, beta_fi: 0.0, ..Default::default() };
        let t = eval(&f, &cfg, &f.bad, &f.clean, &f.labels);
        let mut ctx = Eager;
        let b = ctx.input(f.bad.clone(), false);
        let out = f.en.forward(&mut ctx, &b, Mode::Train, &mut Vec::new()).unwrap();
        let want: f64 = out.stages.iter().map(|x| kernels::charbonnier(x, &f.clean, 5e-3).unwrap()).sum();
        assert!((t.total - want).abs() < 1e-12);
        assert_eq!((t.task, t.identity), (0.0, 0.0));
    }

    #[test]
    fn weights_combine_terms_linearly() {
        let f = fixture(2);
        let base = ObjectiveConfig::default();
        let t = eval(&f, &base, &f.bad, &f.clean, &f.labels);
        assert!((t.total - (t.recovery + 0.01 * t.task + 0.1 * t.identity)).abs() < 1e-12);
        assert!(t.recovery > 0.0 && t.task > 0.0 && (0.0..=4.0).contains(&t.identity));
        let t2 = eval(&f, &ObjectiveConfig { alpha: 0.5, ..base.clone() }, &f.bad, &f.clean, &f.labels);
        assert!(((t2.total - t.total) - (0.5 - 0.01) * t.task).abs() < 1e-12);
    }

    #[test]
    fn batch_of_two_is_mean_of_singletons() {
        let f = fixture(2);
        // evaluation mode so that batch statistics do not couple the samples
        let run = |bad: &Tensor<f64>, clean: &Tensor<f64>, labels: &[ToyLabel]| {
            let mut ctx = Eager;
            let nets = Nets { enhancer: &f.en, head: &f.head, identity: &f.fie };
            let b = ctx.input(bad.clone(), false);
            let c = ctx.input(clean.clone(), false);
            total_objective(&mut ctx, &nets, &ObjectiveConfig::default(), &b, &c, Some(labels), Mode::Eval, &mut Vec::new()).unwrap().terms
        };
        let both = run(&f.bad, &f.clean, &f.labels);
        let singles: Vec<TermValues> =
            (0..2).map(|i| run(&f.bad.gather_batch(&[i]), &f.clean.gather_batch(&[i]), &f.labels[i..=i])).collect();
        let mean = (singles[0].total + singles[1].total) / 2.0;
        assert!((both.total - mean).abs() < 1e-12, "{} vs {mean}", both.total);
    }

    #[test]
    fn missing_labels_with_task_weight_is_a_config_error() {
        let f = fixture(1);
        let mut ctx = Eager;
        let nets = Nets { enhancer: &f.en, head: &f.head, identity: &f.fie };
        let b = ctx.input(f.bad.clone(), false);
        let c = ctx.input(f.clean.clone(), false);
        let r = total_objective(&mut ctx, &nets, &ObjectiveConfig::default(), &b, &c, None, Mode::Train, &mut Vec::new());
        assert!(matches!(r, Err(Error::Config(_))));
        let cfg = ObjectiveConfig { alpha: 0.0, ..Default::default() };
        assert!(total_objective(&mut ctx, &nets, &cfg, &b, &c, None, Mode::Train, &mut Vec::new()).is_ok());
        assert!(ObjectiveConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { beta_fi: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn literal_form_and_final_stage_policy() {
        let f = fixture(1);
        let cfg = ObjectiveConfig { alpha: 0.0, beta_fi: 0.0, recovery: RecoveryForm::Literal, stage_policy: StagePolicy::FinalOnly, ..Default::default() };
        let t = eval(&f, &cfg, &f.bad, &f.clean, &f.labels);
        let mut ctx = Eager;
        let b = ctx.input(f.bad.clone(), false);
        let out = f.en.forward(&mut ctx, &b, Mode::Train, &mut Vec::new()).unwrap();
        let d = out.stages[1].data().iter().zip(f.clean.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / f.clean.len() as f64;
        assert!((t.total - (d + 2.5e-5)).abs() < 1e-12);
    }

    #[test]
    fn head_parameters_get_no_gradient_but_pass_it_through() {
        let f = fixture(2);
        let mut tape = Tape::new();
        let nets = Nets { enhancer: &f.en, head: &f.head, identity: &f.fie };
        let b = tape.input(f.bad.clone(), true);
        let c = tape.input(f.clean.clone(), false);
        let cfg = ObjectiveConfig { alpha: 1.0, beta_fi: 0.0, ..Default::default() };
        let obj = total_objective(&mut tape, &nets, &cfg, &b, &c, Some(&f.labels), Mode::Train, &mut Vec::new()).unwrap();
        let g = tape.backward(obj.total, &[b]);
        assert!(!g.has_store(f.head.store().name()));
        assert!(f.head.store().entries().iter().all(|e| e.kind == ParamKind::Frozen));
        assert!(g.has_store(f.en.store().name()));
        assert!(g.var(b).unwrap().sum_squares() > 0.0);
    }
}
