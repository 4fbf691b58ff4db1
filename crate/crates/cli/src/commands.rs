use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clearpath::checkpoint::Checkpoint;
use clearpath::enhance::{CostSummary, NetworkSpec, Variant};
use clearpath::report::{self, cost_table, CostRow};
use clearpath::task_head::{self, pretrain_toy_head, ToyDataset, ToyHead};
use clearpath::trainer::{self, ablation_suite, evaluate, init_models, train, Enhancer};
use clearpath::weather::{build_paired_dataset, load_pairs, DatasetManifest, Split, SynthConfig};
use clearpath::{Error, ImageTensor};
use serde_json::json;

use crate::config::{layered, record, run_dir, AblateRun, PretrainRun, SynthRun, TrainRun};
use crate::{AblateArgs, AnalyzeArgs, Command, EnhanceArgs, EvaluateArgs, PretrainArgs, SplitArg, SynthArgs, ToyDataArgs, TrainArgs};

/// 2 for usage and configuration problems, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownVariant(_)) => 2,
        _ => 1,
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::ToyData(a) => toy_data(a),
        Command::PretrainHead(a) => pretrain(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Enhance(a) => enhance(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if !a.clean_dir.is_dir() {
        anyhow::bail!("clean image directory {} does not exist", a.clean_dir.display());
    }
    let mut cfg: SynthRun = layered(&SynthRun { seed: 0, synth: SynthConfig::default() }, a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = build_paired_dataset(&a.clean_dir, &a.out_dir, &cfg.synth, cfg.seed)?;
    for s in &out.skipped {
        eprintln!("skipped {}: {}", s.path.display(), s.reason);
    }
    record(&a.out_dir, "synth", json!({ "clean_dir": a.clean_dir }), &cfg)?;
    println!("{} degraded images, manifest {}", out.manifest.records.len(), out.manifest_path.display());
    Ok(())
}

fn toy_data(a: ToyDataArgs) -> Result<()> {
    task_head::write_toy_dataset(&a.out_dir, a.train, a.test, a.size, a.seed)?;
    println!("{} train and {} test scenes in {}", a.train, a.test, a.out_dir.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainRun = layered(&PretrainRun::default(), a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    let dir = run_dir(a.out_dir.as_deref(), &format!("head-seed{}", cfg.pretrain.seed))?;
    let data = match &a.data {
        Some(d) => task_head::load_toy_dataset::<f32>(d)?,
        None => ToyDataset::generate(cfg.generated_train, cfg.generated_test, cfg.size, cfg.pretrain.seed),
    };
    let (head, rep) = pretrain_toy_head(&data.train, &data.test, &cfg.pretrain)?;
    let path = dir.join("head.ckpt");
    Checkpoint::for_head(&head, serde_json::to_value(&rep)?).save(&path)?;
    fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&rep)?)?;
    record(&dir, "pretrain-head", json!({ "data": a.data }), &cfg)?;
    println!("clean accuracy {:.4}, head saved to {}", rep.clean_accuracy, path.display());
    Ok(())
}

fn load_head(path: &Path) -> Result<ToyHead<f32>> {
    Checkpoint::<f32>::load(path)?.toy_head().with_context(|| format!("loading head {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainRun = layered(&TrainRun::defaults(a.desk), a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
        cfg.training.milestones.retain(|&m| m <= e);
    }
    if let Some(m) = a.max_steps {
        cfg.training.max_steps = Some(m);
    }
    if let Some(t) = a.stages {
        cfg.stages = t;
    }
    cfg.training.validate()?;
    let spec = NetworkSpec::build(cfg.variant)?.with_stages(cfg.stages);
    spec.validate()?;
    let dir = run_dir(a.out_dir.as_deref(), &format!("train-{}-seed{}", cfg.variant, cfg.training.seed))?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let head = load_head(&a.head)?;
    use clearpath::task_head::TaskHead;
    let (net, fie) = init_models::<f32>(spec.clone(), head.descriptor().feature_channels, cfg.training.seed)?;
    let out = train(&manifest, net, fie, &head, &cfg.objective, &cfg.training, &dir)?;
    let test = load_pairs::<f32>(&manifest, Split::Test)?;
    if !test.is_empty() {
        let scores = evaluate(&out.net, Some(&head), &test, cfg.training.eval_batch)?;
        let cost = CostSummary::of(&spec, test[0].clean.height(), test[0].clean.width(), spec.stages);
        let (rep, _) = report::emit_report(scores, &[cost], &dir)?;
        print!("{}", rep.text_table());
    }
    record(&dir, "train", json!({ "manifest": a.manifest, "head": a.head, "task": "toy" }), &cfg)?;
    println!("{} steps, best epoch {}, checkpoint {}", out.steps, out.best_epoch, out.best_checkpoint.display());
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let net = ck.enhancer()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let pairs = load_pairs::<f32>(&manifest, split_of(a.split))?;
    let head = a.head.as_deref().map(load_head).transpose()?;
    let scores = evaluate(&net, head.as_ref(), &pairs, 8)?;
    let first = pairs.first().ok_or_else(|| Error::Empty("split has no pairs".into()))?;
    let cost = CostSummary::of(net.spec(), first.clean.height(), first.clean.width(), net.spec().stages);
    let (rep, files) = report::emit_report(scores, &[cost], &a.out_dir)?;
    print!("{}", rep.text_table());
    eprintln!("report written to {}", files.json.display());
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let net = Checkpoint::<f32>::load(&a.checkpoint)?.enhancer()?;
    let img = ImageTensor::<f32>::load_png(&a.input)?;
    let out = net.enhance(&img.to_tensor())?;
    ImageTensor::from_tensor(&out, 0)?.save_png(&a.output)?;
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut rows = Vec::new();
    for v in &a.variant {
        if *v == Variant::Custom {
            return Err(Error::UnknownVariant("custom".into()).into());
        }
        let spec = NetworkSpec::build(*v)?;
        rows.push(CostRow::from(&CostSummary::of(&spec, a.height, a.width, a.stages)));
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", cost_table(&rows));
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg: AblateRun = layered(&AblateRun::default(), a.config.as_deref())?;
    if let Some(n) = a.seeds {
        cfg.seeds = (0..n as u64).collect();
    }
    if let Some(m) = a.max_steps {
        cfg.training.max_steps = Some(m);
    }
    cfg.training.validate()?;
    let dir = run_dir(a.out_dir.as_deref(), &format!("ablate-{}seeds", cfg.seeds.len()))?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let head = load_head(&a.head)?;
    let train_pairs = load_pairs::<f32>(&manifest, Split::Train)?;
    let test_pairs = load_pairs::<f32>(&manifest, Split::Test)?;
    let rep = ablation_suite(&train_pairs, &test_pairs, &head, &cfg, &dir)?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rep)?)?;
    fs::write(dir.join("ablation.txt"), rep.text_table())?;
    record(&dir, "ablate", json!({ "manifest": a.manifest, "head": a.head }), &cfg)?;
    print!("{}", rep.text_table());
    for (hi, lo) in [(trainer::Arm::Full, trainer::Arm::JointNoIdentity), (trainer::Arm::JointNoIdentity, trainer::Arm::Untrained)] {
        if let Some(ok) = rep.not_below(hi, lo) {
            println!("({}) >= ({}) within one sd: {ok}", hi.letter(), lo.letter());
        }
    }
    Ok(())
}
