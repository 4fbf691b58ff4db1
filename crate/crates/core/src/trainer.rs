//! Joint optimisation of the enhancer and the identity projector against a
//! frozen task head, evaluation, and the four-arm ablation.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eager, Ops, Tape};
use crate::checkpoint::Checkpoint;
use crate::enhance::{EnhanceNet, NetworkSpec, TRUNK_WIDTH};
use crate::error::{Error, Result};
use crate::fie::IdentityProjector;
use crate::image::ImageTensor;
use crate::metrics::{psnr, ssim};
use crate::nn::{apply_bn_updates, Mode};
use crate::objective::{total_objective, Nets, ObjectiveConfig, TermValues};
use crate::optim::{clip_scale, global_norm, Adam, AdamConfig, LrSchedule};
use crate::params::ParamStore;
use crate::report::ImageScore;
use crate::scalar::Scalar;
use crate::seed;
use crate::task_head::{batch_images, ensure_frozen, parse_labels, TaskHead};
use crate::tensor::Tensor;
use crate::weather::{load_pairs, DatasetManifest, Pair, Split};

pub const RUN_LOG_FILE: &str = "runlog.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 1-based epochs after which the rate is divided.
    pub milestones: Vec<usize>,
    pub lr_divisor: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    /// Share of clean training images held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Random square crops of this side; labels are assumed crop-invariant.
    pub crop: Option<usize>,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            milestones: vec![30, 50, 80],
            lr_divisor: 5.0,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            validation_fraction: 0.1,
            crop: None,
            max_steps: None,
            eval_batch: 8,
        }
    }
}

impl TrainingConfig {
    /// Short CPU schedule for 64×64 toy scenes.
    pub fn desk() -> Self {
        Self { epochs: 8, batch_size: 4, learning_rate: 1e-3, milestones: vec![5, 7], crop: Some(64), ..Self::default() }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base: self.learning_rate, milestones: self.milestones.clone(), divisor: self.lr_divisor }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs, batch_size and eval_batch must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        if self.crop == Some(0) || self.max_steps == Some(0) {
            return Err(Error::Config("crop and max_steps must be positive when set".into()));
        }
        self.schedule().validate(self.epochs)
    }
}

/// Per-step record of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub terms: TermValues,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub terms: TermValues,
    pub val_psnr: Option<f64>,
    pub best: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Diverged { step: usize, reason: String },
}

/// Append-only line-delimited JSON log.
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Epoch-mean recovery loss, in epoch order.
    pub fn recovery_curve(records: &[LogRecord]) -> Vec<f64> {
        records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch(e) => Some(e.terms.recovery),
                _ => None,
            })
            .collect()
    }

    /// Total loss of every step, in step order.
    pub fn step_losses(records: &[LogRecord]) -> Vec<f64> {
        records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step(s) => Some(s.terms.total),
                _ => None,
            })
            .collect()
    }
}

/// Freshly initialised enhancer and projector for a head whose last feature
/// map has `head_channels` channels.
pub fn init_models<S: Scalar>(spec: NetworkSpec, head_channels: usize, seed_: u64) -> Result<(EnhanceNet<S>, IdentityProjector<S>)> {
    let net = EnhanceNet::new(spec, seed::derive(seed_, "enhancer"))?;
    let fie = IdentityProjector::new(&[TRUNK_WIDTH, head_channels], seed::derive(seed_, "identity"))?;
    Ok((net, fie))
}

/// Split training pairs into fitting and validation sets by clean source,
/// so that all variants of one image land on the same side.
pub fn validation_split<S: Clone>(pairs: &[Pair<S>], fraction: f64, seed_: u64) -> (Vec<usize>, Vec<usize>) {
    let sources: BTreeSet<&Path> = pairs.iter().map(|p| p.clean_path.as_path()).collect();
    let mut sources: Vec<&Path> = sources.into_iter().collect();
    sources.shuffle(&mut seed::rng_for(seed_, "validation"));
    let n = sources.len();
    let k = if fraction > 0.0 && n >= 2 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
    let held: BTreeSet<&Path> = sources[..k].iter().copied().collect();
    (0..pairs.len()).partition(|&i| !held.contains(pairs[i].clean_path.as_path()))
}

pub struct TrainOutcome<S> {
    /// Enhancer at the best validation score (the last epoch without validation).
    pub net: EnhanceNet<S>,
    pub identity: IdentityProjector<S>,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub run_log: PathBuf,
    pub best_epoch: usize,
    pub best_val_psnr: Option<f64>,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
}

/// Load the training split of `manifest` and run [`train_on_pairs`].
pub fn train<S: Scalar, H: TaskHead<S>>(
    manifest: &DatasetManifest,
    net: EnhanceNet<S>,
    identity: IdentityProjector<S>,
    head: &H,
    objective: &ObjectiveConfig,
    cfg: &TrainingConfig,
    run_dir: &Path,
) -> Result<TrainOutcome<S>> {
    let pairs = load_pairs::<S>(manifest, Split::Train)?;
    train_on_pairs(&pairs, net, identity, head, objective, cfg, run_dir)
}

fn crop_pair<S: Scalar, R: Rng>(p: &Pair<S>, size: Option<usize>, rng: &mut R) -> Result<(ImageTensor<S>, ImageTensor<S>)> {
    let (h, w) = (p.clean.height(), p.clean.width());
    let Some(size) = size.filter(|&s| s < h || s < w) else {
        return Ok((p.clean.clone(), p.degraded.clone()));
    };
    if size > h || size > w {
        return Err(Error::Config(format!("crop {size} larger than image {h}x{w}")));
    }
    let (y0, x0) = (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size));
    let cut = |img: &ImageTensor<S>| ImageTensor::from_fn(size, size, img.channels(), |y, x, c| img.get(y0 + y, x0 + x, c));
    Ok((cut(&p.clean), cut(&p.degraded)))
}

fn checkpoint_meta(cfg: &TrainingConfig, step: usize, epoch: usize, val: Option<f64>) -> serde_json::Value {
    serde_json::json!({ "seed": cfg.seed, "step": step, "epoch": epoch, "val_psnr": val })
}

/// Mean PSNR of the final stage (clamped) against clean over `idx`.
fn validation_psnr<S: Scalar>(net: &EnhanceNet<S>, pairs: &[Pair<S>], idx: &[usize], batch: usize) -> Result<f64> {
    let chosen: Vec<&Pair<S>> = idx.iter().map(|&i| &pairs[i]).collect();
    let mut sum = 0.0;
    for group in same_shape_chunks(&chosen, batch) {
        let bad: Vec<&ImageTensor<S>> = group.iter().map(|p| &p.degraded).collect();
        let out = net.enhance(&batch_images(&bad)?)?;
        for (i, p) in group.iter().enumerate() {
            sum += psnr(&ImageTensor::from_tensor(&out, i)?, &p.clean)?;
        }
    }
    Ok(sum / chosen.len() as f64)
}

/// Optimise `net` and `identity` on `pairs` with `head` frozen.
///
/// Writes `runlog.jsonl`, `best.ckpt` and `final.ckpt` into `run_dir`. A
/// non-finite loss or gradient aborts with [`Error::Diverged`] after saving
/// the last parameters that produced a finite loss to `last_good.ckpt`.
pub fn train_on_pairs<S: Scalar, H: TaskHead<S>>(
    pairs: &[Pair<S>],
    mut net: EnhanceNet<S>,
    mut identity: IdentityProjector<S>,
    head: &H,
    objective: &ObjectiveConfig,
    cfg: &TrainingConfig,
    run_dir: &Path,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    objective.validate()?;
    if objective.uses_head() {
        ensure_frozen(head.store())?;
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    let labels: Option<Vec<H::Label>> = if objective.alpha > 0.0 {
        Some(parse_labels(&pairs.iter().map(|p| p.label.as_ref()).collect::<Vec<_>>())?)
    } else {
        None
    };
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut log = RunLog::create(&run_dir.join(RUN_LOG_FILE))?;
    let (fit, val) = validation_split(pairs, cfg.validation_fraction, cfg.seed);
    log::info!("training on {} pairs, validating on {}", fit.len(), val.len());
    let schedule = cfg.schedule();
    let mut opt_en = Adam::new(cfg.adam, net.store());
    let mut opt_fie = Adam::new(cfg.adam, identity.store());
    let mut order_rng = seed::rng_for(cfg.seed, "order");
    let mut crop_rng = seed::rng_for(cfg.seed, "crop");
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let start = Instant::now();
    let mut step = 0;
    let mut best: Option<(f64, usize, ParamStore<S>, ParamStore<S>)> = None;
    let mut epochs = Vec::new();
    let mut last_good: (ParamStore<S>, ParamStore<S>) = (net.store().clone(), identity.store().clone());
    'epochs: for epoch in 1..=cfg.epochs {
        let lr = schedule.rate(epoch);
        let mut order = fit.clone();
        order.shuffle(&mut order_rng);
        let mut sums = TermValues::default();
        let mut taken = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let mut cleans = Vec::with_capacity(chunk.len());
            let mut bads = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (c, b) = crop_pair(&pairs[i], cfg.crop, &mut crop_rng)?;
                cleans.push(c);
                bads.push(b);
            }
            let batch_labels: Option<Vec<H::Label>> = labels.as_ref().map(|l| chunk.iter().map(|&i| l[i].clone()).collect());
            let mut tape = Tape::new();
            let bad = tape.input(batch_images(&bads.iter().collect::<Vec<_>>())?, false);
            let clean = tape.input(batch_images(&cleans.iter().collect::<Vec<_>>())?, false);
            let mut updates = Vec::new();
            let obj = {
                let nets = Nets { enhancer: &net, head, identity: &identity };
                total_objective(&mut tape, &nets, objective, &bad, &clean, batch_labels.as_deref(), Mode::Train, &mut updates)?
            };
            let t = obj.terms;
            let finite = [t.recovery, t.task, t.identity, t.total].iter().all(|v| v.is_finite());
            let failure = if !finite {
                Some((format!("non-finite loss {t:?}"), last_good.clone()))
            } else {
                None
            };
            let grads = tape.backward(obj.total, &[]);
            let g_en = grads.for_store(net.store());
            let g_fie = grads.for_store(identity.store());
            let norm = global_norm(&[&g_en, &g_fie]);
            let failure = failure.or_else(|| {
                (!norm.is_finite()).then(|| (format!("non-finite gradient norm {norm}"), (net.store().clone(), identity.store().clone())))
            });
            if let Some((reason, (en, fi))) = failure {
                let path = run_dir.join(LAST_GOOD_CHECKPOINT);
                let mut good_net = net.clone();
                *good_net.store_mut() = en;
                let mut good_fie = identity.clone();
                *good_fie.store_mut() = fi;
                Checkpoint::for_enhancer(&good_net, Some(&good_fie), checkpoint_meta(cfg, step, epoch, None)).save(&path)?;
                log.append(&LogRecord::Diverged { step, reason: reason.clone() })?;
                return Err(Error::Diverged { step, reason: format!("{reason}; last good parameters in {}", path.display()) });
            }
            last_good = (net.store().clone(), identity.store().clone());
            let scale = clip_scale(norm, cfg.clip_norm);
            opt_en.step(net.store_mut(), &g_en, lr, scale)?;
            opt_fie.step(identity.store_mut(), &g_fie, lr, scale)?;
            drop(grads);
            apply_bn_updates(net.store_mut(), &updates);
            log.append(&LogRecord::Step(StepRecord {
                step,
                epoch,
                lr,
                terms: t,
                grad_norm: norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            }))?;
            sums.recovery += t.recovery;
            sums.task += t.task;
            sums.identity += t.identity;
            sums.total += t.total;
            taken += 1;
            step += 1;
        }
        if taken == 0 {
            break 'epochs;
        }
        let k = taken as f64;
        let means = TermValues { recovery: sums.recovery / k, task: sums.task / k, identity: sums.identity / k, total: sums.total / k };
        let val_psnr = if val.is_empty() { None } else { Some(validation_psnr(&net, pairs, &val, cfg.eval_batch)?) };
        let score = val_psnr.unwrap_or(f64::NEG_INFINITY);
        let is_best = best.as_ref().is_none_or(|b| score > b.0 || val_psnr.is_none());
        if is_best {
            Checkpoint::for_enhancer(&net, Some(&identity), checkpoint_meta(cfg, step, epoch, val_psnr)).save(&best_path)?;
            best = Some((score, epoch, net.store().clone(), identity.store().clone()));
        }
        let rec = EpochRecord { epoch, steps: taken, terms: means, val_psnr, best: is_best, wall_ms: start.elapsed().as_secs_f64() * 1e3 };
        log::info!("epoch {epoch}: recovery {:.5} total {:.5} val psnr {:?}", means.recovery, means.total, val_psnr);
        log.append(&LogRecord::Epoch(rec.clone()))?;
        epochs.push(rec);
    }
    let final_path = run_dir.join(FINAL_CHECKPOINT);
    let last_epoch = epochs.last().map_or(0, |e| e.epoch);
    Checkpoint::for_enhancer(&net, Some(&identity), checkpoint_meta(cfg, step, last_epoch, None)).save(&final_path)?;
    let (best_val, best_epoch) = match best {
        Some((score, epoch, en, fi)) => {
            *net.store_mut() = en;
            *identity.store_mut() = fi;
            ((score.is_finite()).then_some(score), epoch)
        }
        None => (None, 0),
    };
    Ok(TrainOutcome {
        net,
        identity,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        run_log: log.path().to_path_buf(),
        best_epoch,
        best_val_psnr: best_val,
        steps: step,
        epochs,
    })
}

/// Something that maps a degraded `[3, N, H, W]` batch to an image batch in `[0, 1]`.
pub trait Enhancer<S: Scalar> {
    fn enhance(&self, batch: &Tensor<S>) -> Result<Tensor<S>>;
}

/// Pass-through baseline: the degraded input itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEnhancer;

impl<S: Scalar> Enhancer<S> for IdentityEnhancer {
    fn enhance(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(batch.clone())
    }
}

impl<S: Scalar> Enhancer<S> for EnhanceNet<S> {
    /// Final stage in evaluation mode, clamped to `[0, 1]`.
    fn enhance(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut ctx = Eager;
        let x = ctx.input(batch.clone(), false);
        let out = self.forward(&mut ctx, &x, Mode::Eval, &mut Vec::new())?;
        let last = out.stages.last().expect("at least one stage");
        Ok(last.map(|v| v.max(S::zero()).min(S::one())))
    }
}

fn same_shape_chunks<'a, S: Scalar>(pairs: &[&'a Pair<S>], batch: usize) -> Vec<Vec<&'a Pair<S>>> {
    let mut out: Vec<Vec<&Pair<S>>> = Vec::new();
    for &p in pairs {
        match out.last_mut() {
            Some(g) if g.len() < batch && g[0].degraded.same_shape(&p.degraded) => g.push(p),
            _ => out.push(vec![p]),
        }
    }
    out
}

/// Score every pair: PSNR/SSIM of the degraded input and of the enhanced
/// output against clean, and, with a head, whether the head is right on each.
pub fn evaluate<S: Scalar, E: Enhancer<S>, H: TaskHead<S>>(enhancer: &E, head: Option<&H>, pairs: &[Pair<S>], batch: usize) -> Result<Vec<ImageScore>> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split has no pairs".into()));
    }
    let labels: Option<Vec<H::Label>> = match head {
        Some(_) => Some(parse_labels(&pairs.iter().map(|p| p.label.as_ref()).collect::<Vec<_>>())?),
        None => None,
    };
    let refs: Vec<&Pair<S>> = pairs.iter().collect();
    let mut scores = Vec::with_capacity(pairs.len());
    let mut offset = 0;
    for group in same_shape_chunks(&refs, batch.max(1)) {
        let bad = batch_images(&group.iter().map(|p| &p.degraded).collect::<Vec<_>>())?;
        let out = enhancer.enhance(&bad)?;
        let hits = match (head, &labels) {
            (Some(h), Some(l)) => {
                let labs = &l[offset..offset + group.len()];
                Some((head_pass(h, &bad, labs)?, head_pass(h, &out, labs)?))
            }
            _ => None,
        };
        for (i, p) in group.iter().enumerate() {
            let enhanced = ImageTensor::from_tensor(&out, i)?;
            scores.push(ImageScore {
                image: p.degraded_path.display().to_string(),
                variant: p.tag.to_string(),
                psnr_in: psnr(&p.degraded, &p.clean)?,
                ssim_in: ssim(&p.degraded, &p.clean)?,
                psnr_out: psnr(&enhanced, &p.clean)?,
                ssim_out: ssim(&enhanced, &p.clean)?,
                hit_in: hits.as_ref().map(|h| h.0[i]),
                hit_out: hits.as_ref().map(|h| h.1[i]),
            });
        }
        offset += group.len();
    }
    Ok(scores)
}

fn head_pass<S: Scalar, H: TaskHead<S>>(head: &H, batch: &Tensor<S>, labels: &[H::Label]) -> Result<Vec<bool>> {
    let mut ctx = Eager;
    let x = ctx.input(batch.clone(), false);
    let out = head.forward(&mut ctx, &x)?;
    head.hits(&out.outputs.iter().map(|o| &**o).collect::<Vec<_>>(), labels)
}

/// Fraction of `true` entries.
pub fn hit_rate(hits: impl IntoIterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += usize::from(h);
    }
    if n == 0 {
        f64::NAN
    } else {
        k as f64 / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Head on the degraded input.
    Degraded,
    /// Untrained enhancer, then head.
    Untrained,
    /// Joint training without the identity term.
    JointNoIdentity,
    /// Full objective.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Degraded, Arm::Untrained, Arm::JointNoIdentity, Arm::Full];

    pub fn letter(self) -> char {
        match self {
            Arm::Degraded => 'a',
            Arm::Untrained => 'b',
            Arm::JointNoIdentity => 'c',
            Arm::Full => 'd',
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Degraded => "task head only",
            Arm::Untrained => "+EN (w/o training)",
            Arm::JointNoIdentity => "+EN (training)",
            Arm::Full => "+FIE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub network: NetworkSpec,
    /// Objective of the full arm; the joint arm uses it with the identity weight zeroed.
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            network: NetworkSpec::build(crate::enhance::Variant::Layers33).expect("built-in variant"),
            objective: ObjectiveConfig::default(),
            training: TrainingConfig::desk(),
            arms: Arm::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub seed: u64,
    pub accuracy: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: Vec<ArmRun>,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub psnr_mean: f64,
    pub psnr_sd: f64,
}

/// Sample mean and standard deviation (`n − 1`); zero spread for one value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ArmSummary {
    fn new(arm: Arm, runs: Vec<ArmRun>) -> Self {
        let (accuracy_mean, accuracy_sd) = mean_sd(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let (psnr_mean, psnr_sd) = mean_sd(&runs.iter().map(|r| r.psnr).collect::<Vec<_>>());
        Self { arm, runs, accuracy_mean, accuracy_sd, psnr_mean, psnr_sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    /// `mean(hi) ≥ mean(lo)` up to the pooled standard deviation of the two arms.
    pub fn not_below(&self, hi: Arm, lo: Arm) -> Option<bool> {
        let (h, l) = (self.arm(hi)?, self.arm(lo)?);
        let pooled = ((h.accuracy_sd.powi(2) + l.accuracy_sd.powi(2)) / 2.0).sqrt();
        Some(h.accuracy_mean + pooled >= l.accuracy_mean)
    }

    pub fn text_table(&self) -> String {
        let mut rows = vec![["arm", "setting", "seeds", "acc_mean", "acc_sd", "psnr_mean", "psnr_sd"].map(String::from).to_vec()];
        for a in &self.arms {
            rows.push(vec![
                format!("({})", a.arm.letter()),
                a.arm.label().replace(' ', "_"),
                a.runs.len().to_string(),
                format!("{:.4}", a.accuracy_mean),
                format!("{:.4}", a.accuracy_sd),
                format!("{:.4}", a.psnr_mean),
                format!("{:.4}", a.psnr_sd),
            ]);
        }
        crate::report::aligned(&rows)
    }
}

fn overall(scores: &[ImageScore]) -> (f64, f64) {
    let acc = hit_rate(scores.iter().map(|s| s.hit_out.unwrap_or(false)));
    let psnr = scores.iter().map(|s| s.psnr_out).sum::<f64>() / scores.len() as f64;
    (acc, psnr)
}

/// Run the selected arms for every seed and summarise test-split accuracy and PSNR.
pub fn ablation_suite<S: Scalar, H: TaskHead<S>>(
    train_pairs: &[Pair<S>],
    test_pairs: &[Pair<S>],
    head: &H,
    cfg: &AblationConfig,
    run_dir: &Path,
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    ensure_frozen(head.store())?;
    let channels = head.descriptor().feature_channels;
    let batch = cfg.training.eval_batch;
    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        let mut runs = Vec::new();
        for &s in &cfg.seeds {
            let scores = match arm {
                Arm::Degraded => evaluate(&IdentityEnhancer, Some(head), test_pairs, batch)?,
                Arm::Untrained => {
                    let (net, _) = init_models::<S>(cfg.network.clone(), channels, s)?;
                    evaluate(&net, Some(head), test_pairs, batch)?
                }
                Arm::JointNoIdentity | Arm::Full => {
                    let (net, fie) = init_models::<S>(cfg.network.clone(), channels, s)?;
                    let objective = match arm {
                        Arm::Full => cfg.objective.clone(),
                        _ => ObjectiveConfig { beta_fi: 0.0, ..cfg.objective.clone() },
                    };
                    let training = TrainingConfig { seed: s, ..cfg.training.clone() };
                    let dir = run_dir.join(format!("arm-{}", arm.letter())).join(format!("seed-{s}"));
                    let out = train_on_pairs(train_pairs, net, fie, head, &objective, &training, &dir)?;
                    evaluate(&out.net, Some(head), test_pairs, batch)?
                }
            };
            let (accuracy, psnr) = overall(&scores);
            log::info!("arm ({}) seed {s}: accuracy {accuracy:.4} psnr {psnr:.3}", arm.letter());
            runs.push(ArmRun { seed: s, accuracy, psnr });
        }
        arms.push(ArmSummary::new(arm, runs));
    }
    Ok(AblationReport { arms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::HBlockSpec;
    use crate::params::ParamKind;
    use crate::task_head::{ToyDataset, ToyHead, ToyHeadConfig};
    use crate::weather::VariantTag;
    use proptest::prelude::*;

    fn toy_pairs(n: usize, size: usize, seed_: u64) -> Vec<Pair<f32>> {
        let data = ToyDataset::<f32>::generate(n, 0, size, seed_);
        data.train
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                VariantTag::ALL.iter().enumerate().map(move |(k, &tag)| {
                    let shade = 0.1 * k as f32;
                    Pair {
                        clean_path: PathBuf::from(format!("/clean/{i}.png")),
                        degraded_path: PathBuf::from(format!("train/{i}_{tag}.png")),
                        clean: s.image.clone(),
                        degraded: ImageTensor::new(size, size, 3, s.image.data().iter().map(|v| 0.6 * v + shade).collect()).unwrap(),
                        tag,
                        label: Some(serde_json::to_value(s.label).unwrap()),
                    }
                })
            })
            .collect()
    }

    fn frozen_head() -> ToyHead<f32> {
        let mut h = ToyHead::new(ToyHeadConfig::default(), 3).unwrap();
        h.freeze();
        h
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::custom(vec![HBlockSpec { depth: 4, growth: 4 }], 2).unwrap()
    }

    fn quick() -> TrainingConfig {
        TrainingConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, milestones: vec![1], validation_fraction: 0.25, ..Default::default() }
    }

    #[test]
    fn config_checks_schedule_and_sizes() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig::desk().validate().is_ok());
        assert!(TrainingConfig { milestones: vec![50, 30], ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { milestones: vec![101], ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let s = TrainingConfig::default().schedule();
        assert!((s.rate(31) - 2e-5).abs() < 1e-18 && (s.rate(51) - 4e-6).abs() < 1e-18 && (s.rate(81) - 8e-7).abs() < 1e-18);
    }

    #[test]
    fn validation_keeps_variants_of_a_source_together() {
        let pairs = toy_pairs(10, 16, 1);
        let (fit, val) = validation_split(&pairs, 0.2, 5);
        assert_eq!((fit.len(), val.len()), (32, 8));
        let held: BTreeSet<_> = val.iter().map(|&i| &pairs[i].clean_path).collect();
        assert!(fit.iter().all(|&i| !held.contains(&pairs[i].clean_path)));
        assert_eq!(validation_split(&pairs, 0.2, 5), (fit, val));
        assert_eq!(validation_split(&pairs, 0.0, 5).1.len(), 0);
    }

    #[test]
    fn runs_are_reproducible_and_only_touch_enhancer_and_projector() {
        let pairs = toy_pairs(4, 16, 2);
        let head = frozen_head();
        let tmp = tempfile::tempdir().unwrap();
        let run = |dir: &str| {
            let (net, fie) = init_models::<f32>(tiny_spec(), 32, 7).unwrap();
            let fie_probe = fie.projection(32 * 2 * 2);
            let out = train_on_pairs(&pairs, net, fie, &head, &ObjectiveConfig::default(), &quick(), &tmp.path().join(dir)).unwrap();
            assert_eq!(*out.identity.projection(32 * 2 * 2), *fie_probe);
            out
        };
        let a = run("a");
        let b = run("b");
        let la = RunLog::read(&a.run_log).unwrap();
        let lb = RunLog::read(&b.run_log).unwrap();
        assert_eq!(RunLog::step_losses(&la), RunLog::step_losses(&lb));
        assert_eq!(RunLog::step_losses(&la).len(), 6);
        assert_eq!(fs::read(&a.final_checkpoint).unwrap(), fs::read(&b.final_checkpoint).unwrap());
        assert_eq!(fs::read(&a.best_checkpoint).unwrap(), fs::read(&b.best_checkpoint).unwrap());
        let (init, _) = init_models::<f32>(tiny_spec(), 32, 7).unwrap();
        assert!(!a.net.store().bitwise_eq(init.store(), &[ParamKind::Trainable]));
        assert!(head.store().bitwise_eq(frozen_head().store(), &[ParamKind::Frozen]));
        let epochs: Vec<_> = la.iter().filter(|r| matches!(r, LogRecord::Epoch(_))).collect();
        assert_eq!(epochs.len(), 2);
        let ck = Checkpoint::<f32>::load(&a.best_checkpoint).unwrap();
        assert!(ck.enhancer().unwrap().store().bitwise_eq(a.net.store(), &[ParamKind::Trainable, ParamKind::Buffer]));
        for r in &la {
            if let LogRecord::Step(s) = r {
                assert!(s.terms.total.is_finite() && s.terms.identity > 0.0 && s.terms.task > 0.0);
                assert_eq!(s.lr, if s.epoch == 1 { 1e-3 } else { 2e-4 });
            }
        }
    }

    #[test]
    fn max_steps_stops_early() {
        let pairs = toy_pairs(4, 16, 3);
        let tmp = tempfile::tempdir().unwrap();
        let (net, fie) = init_models::<f32>(tiny_spec(), 32, 1).unwrap();
        let cfg = TrainingConfig { max_steps: Some(2), ..quick() };
        let out = train_on_pairs(&pairs, net, fie, &frozen_head(), &ObjectiveConfig::default(), &cfg, tmp.path()).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn non_finite_data_aborts_with_last_good_checkpoint() {
        let mut pairs = toy_pairs(2, 16, 4);
        for p in &mut pairs {
            p.clean.data_mut()[0] = f32::NAN;
        }
        let tmp = tempfile::tempdir().unwrap();
        let (net, fie) = init_models::<f32>(tiny_spec(), 32, 1).unwrap();
        let init = net.store().clone();
        let cfg = TrainingConfig { validation_fraction: 0.0, ..quick() };
        let r = train_on_pairs(&pairs, net, fie, &frozen_head(), &ObjectiveConfig::default(), &cfg, tmp.path());
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })), "{:?}", r.err());
        let ck = Checkpoint::<f32>::load(&tmp.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
        assert!(ck.enhancer().unwrap().store().bitwise_eq(&init, &[ParamKind::Trainable]));
        let log = RunLog::read(&tmp.path().join(RUN_LOG_FILE)).unwrap();
        assert!(matches!(log.last(), Some(LogRecord::Diverged { .. })));
    }

    #[test]
    fn unfrozen_head_or_missing_labels_are_rejected() {
        let mut pairs = toy_pairs(2, 16, 5);
        let tmp = tempfile::tempdir().unwrap();
        let (net, fie) = init_models::<f32>(tiny_spec(), 32, 1).unwrap();
        let live = ToyHead::<f32>::new(ToyHeadConfig::default(), 0).unwrap();
        let r = train_on_pairs(&pairs, net.clone(), fie.clone(), &live, &ObjectiveConfig::default(), &quick(), tmp.path());
        assert!(matches!(r, Err(Error::Contract(_))));
        pairs[0].label = None;
        let r = train_on_pairs(&pairs, net, fie, &frozen_head(), &ObjectiveConfig::default(), &quick(), tmp.path());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn identity_enhancer_reports_head_accuracy_on_degraded_input() {
        let pairs = toy_pairs(3, 16, 6);
        let head = frozen_head();
        let scores = evaluate(&IdentityEnhancer, Some(&head), &pairs, 5).unwrap();
        assert_eq!(scores.len(), 12);
        let imgs: Vec<&ImageTensor<f32>> = pairs.iter().map(|p| &p.degraded).collect();
        let labels: Vec<_> = parse_labels::<crate::task_head::ToyLabel>(&pairs.iter().map(|p| p.label.as_ref()).collect::<Vec<_>>()).unwrap();
        let direct = crate::task_head::head_hits(&head, &imgs, &labels, 64).unwrap();
        assert_eq!(scores.iter().map(|s| s.hit_out.unwrap()).collect::<Vec<_>>(), direct);
        assert!(scores.iter().all(|s| s.psnr_in == s.psnr_out && s.ssim_in == s.ssim_out));
        let again = evaluate(&IdentityEnhancer, Some(&head), &pairs, 2).unwrap();
        assert_eq!(scores, again);
        assert!(matches!(evaluate::<f32, _, ToyHead<f32>>(&IdentityEnhancer, None, &[], 4), Err(Error::Empty(_))));
    }

    #[test]
    fn ablation_summaries_and_ordering_rule() {
        let report = AblationReport {
            arms: vec![
                ArmSummary::new(Arm::JointNoIdentity, vec![ArmRun { seed: 0, accuracy: 0.8, psnr: 20.0 }, ArmRun { seed: 1, accuracy: 0.9, psnr: 22.0 }]),
                ArmSummary::new(Arm::Full, vec![ArmRun { seed: 0, accuracy: 0.78, psnr: 20.0 }, ArmRun { seed: 1, accuracy: 0.86, psnr: 21.0 }]),
            ],
        };
        let c = report.arm(Arm::JointNoIdentity).unwrap();
        assert!((c.accuracy_mean - 0.85).abs() < 1e-12);
        assert!((c.accuracy_sd - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(report.not_below(Arm::Full, Arm::JointNoIdentity), Some(true));
        assert_eq!(report.not_below(Arm::Full, Arm::Untrained), None);
        assert!(report.text_table().contains("(d)"));
    }

    #[test]
    fn cheap_arms_run_through_the_suite() {
        let pairs = toy_pairs(2, 16, 8);
        let tmp = tempfile::tempdir().unwrap();
        let cfg = AblationConfig { network: tiny_spec(), arms: vec![Arm::Degraded, Arm::Untrained], ..Default::default() };
        let r = ablation_suite(&pairs, &pairs, &frozen_head(), &cfg, tmp.path()).unwrap();
        let a = r.arm(Arm::Degraded).unwrap();
        assert_eq!(a.runs.len(), 3);
        assert_eq!(a.accuracy_sd, 0.0);
    }

    proptest! {
        #[test]
        fn rate_is_a_step_function_of_epoch(e in 1usize..=100) {
            let s = TrainingConfig::default().schedule();
            let k = [30, 50, 80].iter().filter(|&&m| m < e).count();
            prop_assert!((s.rate(e) - 1e-4 / 5f64.powi(k as i32)).abs() < 1e-18);
            prop_assert!(s.rate(e + 1) <= s.rate(e));
        }
    }
}
