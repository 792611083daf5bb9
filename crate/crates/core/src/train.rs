//! AdamW, the deterministic training loop with checkpoint/resume, dataset
//! evaluation, and the K-ablation and baseline-comparison harnesses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, Task};
use crate::metrics::{self, DepthAccumulator, MetricReport, NormalAccumulator, SegAccumulator};
use crate::model::{self, Model, ModelConfig, Prediction};
use crate::objectives::{self, LossConfig};
use crate::persist;
use crate::rng::Rng;
use crate::scene::{Sample, SceneConfig, CLASS_NAMES};
use crate::nn::ParamStore;
use crate::tensor::{verify_mode, Graph, Scalar, Tensor};

/// Learning-rate presets.
pub const LR_PRETRAIN: f64 = 5e-4;
pub const LR_FINETUNE: f64 = 5e-5;
/// Prefix of the parameter group that trains at `backbone_lr_mult × lr`.
pub const BACKBONE_GROUP: &str = "backbone/";
pub const META_TRAIN: &str = "meta/train";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update with per-parameter learning rates. Weight decay
    /// `p ← p − lr·wd·p` is applied before the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Vec<f32>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} params, {} grads, {} rates",
                self.m.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::contract(format!(
                    "tensor {i}: {} values, {} gradients, {} moments",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let decay = 1.0 - lr * self.weight_decay;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *w = ((*w as f64) * decay - lr * upd) as f32;
            }
        }
        Ok(())
    }

    pub fn state_entries(&self, names: &[String]) -> Vec<(String, Tensor<f32>)> {
        let mut e = vec![("opt/step".to_string(), Tensor::scalar(self.step as f32))];
        for (k, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            e.push((format!("opt/m/{k}"), Tensor::new(vec![m.len()], m.clone()).expect("rank 1")));
            e.push((format!("opt/v/{k}"), Tensor::new(vec![v.len()], v.clone()).expect("rank 1")));
        }
        e
    }

    pub fn load_state(&mut self, names: &[String], entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |n: &str| {
            entries
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks optimizer entry {n:?}")))
        };
        self.step = find("opt/step")?.item() as u64;
        for (i, k) in names.iter().enumerate() {
            let m = find(&format!("opt/m/{k}"))?;
            let v = find(&format!("opt/v/{k}"))?;
            if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
                return Err(Error::contract(format!("optimizer moments for {k:?} have the wrong size")));
            }
            self.m[i].copy_from_slice(m.data());
            self.v[i].copy_from_slice(v.data());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub head: HeadKind,
    pub k: usize,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub lr: f64,
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps (0 = never).
    pub eval_every: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Print progress to stderr every this many steps (0 = silent).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            head: HeadKind::Cluster,
            k: match task {
                Task::Seg => CLASS_NAMES.len(),
                _ => 16,
            },
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            lr: LR_PRETRAIN,
            backbone_lr_mult: 0.1,
            weight_decay: 0.05,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            clip_norm: Some(10.0),
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.backbone_lr_mult >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("learning rates and weight decay must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract("clip norm must be positive"));
            }
        }
        self.backbone.validate()?;
        self.loss.validate()
    }

    pub fn model_config(&self, scene: &SceneConfig) -> Result<ModelConfig> {
        ModelConfig::new(self.task, self.head, self.k, self.backbone.clone(), scene)
    }
}

/// Loss of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

/// Depth range and class count recovered from a dataset header or manifest.
pub fn scene_for(samples: &[Sample], d_min: f64, d_max: f64, num_classes: usize) -> Result<SceneConfig> {
    let first = samples.first().ok_or_else(|| Error::contract("dataset is empty"))?;
    if first.height != first.width {
        return Err(Error::contract("only square images are supported"));
    }
    Ok(SceneConfig {
        size: first.height,
        d_min,
        d_max,
        num_classes,
        ..SceneConfig::default()
    })
}

/// Stateful trainer over an immutable training split.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    opt: AdamW,
    data: &'a [Sample],
    step: usize,
    perm: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, scene: &SceneConfig, data: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        let model = Model::init(cfg.model_config(scene)?, cfg.seed)?;
        let opt = AdamW::new(model.params.values(), cfg.weight_decay);
        Ok(Trainer {
            cfg,
            model,
            opt,
            data,
            step: 0,
            perm: None,
        })
    }

    /// Resumes from checkpoint entries written by [`Trainer::checkpoint_entries`].
    pub fn resume(cfg: TrainConfig, entries: &[(String, Tensor<f32>)], data: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        let model = Model::from_entries(entries)?;
        if model.config.task != cfg.task || model.config.k != cfg.k || model.config.head != cfg.head {
            return Err(Error::contract("checkpoint does not match the training configuration"));
        }
        let mut opt = AdamW::new(model.params.values(), cfg.weight_decay);
        opt.load_state(model.params.names(), entries)?;
        let step = opt.step as usize;
        Ok(Trainer {
            cfg,
            model,
            opt,
            data,
            step,
            perm: None,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut e = self.model.checkpoint_entries();
        e.extend(self.opt.state_entries(self.model.params.names()));
        let json = serde_json::to_vec(&self.cfg).expect("config serializes");
        let data: Vec<f32> = json.iter().map(|&b| b as f32).collect();
        e.push((META_TRAIN.to_string(), Tensor::new(vec![data.len()], data).expect("rank 1")));
        e
    }

    /// Sample indices of the batch at `step`: a fixed walk through
    /// per-epoch permutations derived from the seed.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.data.len();
        let bs = self.cfg.batch_size;
        (0..bs)
            .map(|j| {
                let pos = step * bs + j;
                let epoch = pos / n;
                if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
                    let perm = Rng::derive(self.cfg.seed, epoch as u64).permutation(n);
                    self.perm = Some((epoch, perm));
                }
                self.perm.as_ref().expect("set above").1[pos % n]
            })
            .collect()
    }

    fn group_lrs(&self) -> Vec<f64> {
        self.model
            .params
            .names()
            .iter()
            .map(|n| {
                if n.starts_with(BACKBONE_GROUP) {
                    self.cfg.lr * self.cfg.backbone_lr_mult
                } else {
                    self.cfg.lr
                }
            })
            .collect()
    }

    /// One forward/backward/update on the next batch.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.data[i]).collect();
        let mc = &self.model.config;
        let targets = model::batch_targets(&batch, mc.d_min, mc.d_max)?;
        let mut g = Graph::<f32>::new();
        let bound = self.model.params.bind(&mut g);
        let x = g.constant(model::batch_images(&batch)?);
        let diverged = |e: &Error, terms: &str| Error::NonFinite {
            step,
            diagnostic: batch_diagnostic(&idx, &batch, terms, &e.to_string(), &self.model),
        };
        let fwd = model::forward(mc, &mut g, &bound, x).map_err(|e| non_finite_or(e, &diverged))?;
        let loss = objectives::total_loss(&mut g, mc.task, fwd.prediction, &targets, &self.cfg.loss)
            .map_err(|e| non_finite_or(e, &diverged))?;
        let total = g.value(loss.total).item() as f64;
        let terms: Vec<(String, f64)> = loss
            .terms
            .iter()
            .map(|&(n, v)| (n.to_string(), g.value(v).item() as f64))
            .collect();
        if !total.is_finite() {
            let t = format!("{terms:?}");
            return Err(diverged(&Error::contract(format!("loss is {total}")), &t));
        }
        g.backward(loss.total)?;
        let mut grads: Vec<Vec<f32>> = bound
            .vars()
            .iter()
            .zip(self.model.params.values())
            .map(|(&v, p)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            let t = format!("{terms:?}");
            return Err(diverged(&Error::contract(format!("gradient norm is {norm}")), &t));
        }
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                let s = (c / norm) as f32;
                grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
            }
        }
        let lrs = self.group_lrs();
        self.opt.step(self.model.params.values_mut(), &grads, &lrs)?;
        self.step += 1;
        Ok(StepRecord { step, total, terms })
    }
}

fn non_finite_or(e: Error, diverged: &dyn Fn(&Error, &str) -> Error) -> Error {
    if e.to_string().contains("non-finite") {
        diverged(&e, "")
    } else {
        e
    }
}

fn batch_diagnostic(idx: &[usize], batch: &[&Sample], terms: &str, cause: &str, model: &Model) -> String {
    let mut s = format!("{cause}; batch indices {idx:?}");
    for (i, b) in idx.iter().zip(batch) {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &v in &b.image {
            let v = v as f64;
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        let _ = write!(
            s,
            "; sample {i}: image min {lo:.4} max {hi:.4} mean {:.4}",
            sum / b.image.len().max(1) as f64
        );
    }
    if !terms.is_empty() {
        let _ = write!(s, "; terms {terms}");
    }
    let bad: Vec<&str> = model
        .params
        .iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(n, _)| n)
        .collect();
    let _ = write!(s, "; non-finite parameters {bad:?}");
    s
}

/// Decoded output of one batch plus the cluster-head intermediates.
#[derive(Clone, Debug)]
pub struct Inference {
    pub prediction: Prediction,
    /// Full-resolution probability map `[B, H·W, K]` (cluster heads).
    pub probs: Option<Vec<f64>>,
    /// Bin centers `[B, K]` (depth) or unit sphere-segment centers `[B, K, 3]` (normals).
    pub centers: Option<Vec<f64>>,
}

/// Forward pass on one batch. Runs in 64-bit when `PMX_VERIFY=1`.
pub fn infer(model: &Model, samples: &[&Sample]) -> Result<Inference> {
    if verify_mode() {
        infer_with(&model.config, &model.params.cast::<f64>(), samples)
    } else {
        infer_with(&model.config, &model.params, samples)
    }
}

fn infer_with<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, samples: &[&Sample]) -> Result<Inference> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g);
    let x = g.constant(model::batch_images(samples)?);
    let f = model::forward(cfg, &mut g, &bound, x)?;
    Ok(Inference {
        prediction: model::decode(cfg, &g, &f)?,
        probs: f.probs.map(|v| g.value(v).to_f64_vec()),
        centers: f.centers.map(|v| g.value(v).to_f64_vec()),
    })
}

/// Predictions for `samples`, one entry per batch of `batch_size`.
pub fn predict(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<Prediction>> {
    samples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            Ok(infer(model, &refs)?.prediction)
        })
        .collect()
}

/// Pooled metrics accumulator for one task.
pub enum Accumulator {
    Seg(SegAccumulator),
    Depth(DepthAccumulator),
    Normal(NormalAccumulator),
}

impl Accumulator {
    pub fn new(task: Task, num_classes: usize, ignore: u8) -> Self {
        match task {
            Task::Seg => Accumulator::Seg(SegAccumulator::new(num_classes, ignore)),
            Task::Depth => Accumulator::Depth(DepthAccumulator::default()),
            Task::Normal => Accumulator::Normal(NormalAccumulator::default()),
        }
    }

    /// Adds a prediction for `samples` (in order).
    pub fn add(&mut self, pred: &Prediction, samples: &[&Sample], d_min: f64, d_max: f64) -> Result<()> {
        let t = model::batch_targets(samples, d_min, d_max)?;
        match (self, pred) {
            (Accumulator::Seg(a), Prediction::Labels(l)) => a.add(l, &t.labels),
            (Accumulator::Depth(a), Prediction::Depth(d)) => a.add(d, &t.depth, &t.valid),
            (Accumulator::Normal(a), Prediction::Normal(n)) => a.add(n, &t.normal, &t.valid),
            _ => Err(Error::contract("prediction does not match the task")),
        }
    }

    pub fn report(&self) -> Result<MetricReport> {
        match self {
            Accumulator::Seg(a) => Ok(MetricReport::seg(a, &CLASS_NAMES)),
            Accumulator::Depth(a) => MetricReport::depth(a),
            Accumulator::Normal(a) => MetricReport::normal(a),
        }
    }
}

/// Metrics of `model` over the whole split. Parameters are not modified.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let c = &model.config;
    let mut acc = Accumulator::new(c.task, c.num_classes, 255);
    let bs = batch_size.max(1);
    for (pred, chunk) in predict(model, samples, bs)?.iter().zip(samples.chunks(bs)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        acc.add(pred, &refs, c.d_min, c.d_max)?;
    }
    acc.report()
}

/// Metrics of the ground truth against itself: the perfect report.
pub fn evaluate_oracle(task: Task, samples: &[Sample], scene: &SceneConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut acc = Accumulator::new(task, scene.num_classes, 255);
    for s in samples {
        let pred = match task {
            Task::Seg => Prediction::Labels(s.labels.clone()),
            Task::Depth => Prediction::Depth(s.depth.iter().map(|&v| v as f64).collect()),
            Task::Normal => Prediction::Normal(s.normal.iter().map(|&v| v as f64).collect()),
        };
        acc.add(&pred, &[s], scene.d_min, scene.d_max)?;
    }
    acc.report()
}

/// Evaluates checkpoint entries, checking they were trained for `task`
/// (and `k`, when given).
pub fn evaluate_checkpoint(
    entries: &[(String, Tensor<f32>)],
    samples: &[Sample],
    task: Task,
    k: Option<usize>,
    batch_size: usize,
) -> Result<MetricReport> {
    let model = Model::from_entries(entries)?;
    if model.config.task != task {
        return Err(Error::contract(format!(
            "checkpoint was trained for {}, not {task}",
            model.config.task
        )));
    }
    if let Some(k) = k {
        if k != model.config.k {
            return Err(Error::contract(format!("checkpoint has K={}, requested K={k}", model.config.k)));
        }
    }
    evaluate(&model, samples, batch_size)
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self) -> PathBuf {
        sibling(&self.checkpoint, ".best")
    }
    pub fn loss_csv(&self) -> PathBuf {
        sibling(&self.checkpoint, ".loss.csv")
    }
    pub fn evals(&self) -> PathBuf {
        sibling(&self.checkpoint, ".evals.jsonl")
    }
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut name = p.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    p.with_file_name(name)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<StepRecord>,
    pub evals: Vec<(usize, MetricReport)>,
    pub best: Option<(usize, MetricReport)>,
}

fn better(task: Task, a: f64, b: f64) -> bool {
    if metrics::higher_is_better(task) {
        a > b
    } else {
        a < b
    }
}

/// Trains for `cfg.steps` steps. With `val`, evaluates every `eval_every`
/// steps and after the last step; with `out`, writes the final and best
/// checkpoints, the loss trace CSV and the evaluation JSON lines.
pub fn train(
    cfg: &TrainConfig,
    scene: &SceneConfig,
    data: &[Sample],
    val: Option<&[Sample]>,
    out: Option<&TrainOutputs>,
) -> Result<TrainOutcome> {
    run(Trainer::new(cfg.clone(), scene, data)?, val, out)
}

/// Continues `t` up to `t.cfg.steps`; see [`train`].
pub fn run(mut t: Trainer, val: Option<&[Sample]>, out: Option<&TrainOutputs>) -> Result<TrainOutcome> {
    let cfg = t.cfg.clone();
    let cfg = &cfg;
    let mut trace = Vec::with_capacity(cfg.steps.saturating_sub(t.step_count()));
    let mut evals = Vec::new();
    let mut best: Option<(usize, MetricReport)> = None;
    let eval_at = |t: &Trainer, evals: &mut Vec<(usize, MetricReport)>, best: &mut Option<(usize, MetricReport)>| -> Result<()> {
        let Some(v) = val else { return Ok(()) };
        let r = evaluate(&t.model, v, cfg.batch_size)?;
        let s = t.step_count();
        if cfg.log_every > 0 {
            eprintln!("step {s}: {}", r.to_json_line());
        }
        let improved = best.as_ref().is_none_or(|(_, b)| better(cfg.task, r.primary().1, b.primary().1));
        if improved {
            if let Some(o) = out {
                persist::write_checkpoint(o.best(), &t.checkpoint_entries())?;
            }
            *best = Some((s, r.clone()));
        }
        evals.push((s, r));
        Ok(())
    };
    while t.step_count() < cfg.steps {
        let r = t.step()?;
        if cfg.log_every > 0 && (r.step % cfg.log_every == 0 || r.step + 1 == cfg.steps) {
            eprintln!("step {} loss {:.5}", r.step, r.total);
        }
        trace.push(r);
        if cfg.eval_every > 0 && t.step_count().is_multiple_of(cfg.eval_every) && t.step_count() < cfg.steps {
            eval_at(&t, &mut evals, &mut best)?;
        }
    }
    eval_at(&t, &mut evals, &mut best)?;
    if let Some(o) = out {
        persist::write_checkpoint(&o.checkpoint, &t.checkpoint_entries())?;
        persist::write_atomic(&o.loss_csv(), trace_csv(&trace).as_bytes())?;
        let lines: String = evals
            .iter()
            .map(|(s, r)| format!("{{\"step\":{s},\"report\":{}}}\n", r.to_json_line()))
            .collect();
        persist::write_atomic(&o.evals(), lines.as_bytes())?;
    }
    Ok(TrainOutcome {
        model: t.model,
        trace,
        evals,
        best,
    })
}

/// `step,total,<term>...` with one row per step.
pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut s = String::from("step,total");
    if let Some(first) = trace.first() {
        for (n, _) in &first.terms {
            s.push(',');
            s.push_str(n);
        }
    }
    s.push('\n');
    for r in trace {
        let _ = write!(s, "{},{}", r.step, r.total);
        for (_, v) in &r.terms {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Reads the training configuration stored in a checkpoint.
pub fn train_config_from_entries(entries: &[(String, Tensor<f32>)]) -> Result<TrainConfig> {
    let t = entries
        .iter()
        .find(|(n, _)| n == META_TRAIN)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::contract("checkpoint has no training configuration"))?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    serde_json::from_slice(&bytes).map_err(|e| Error::contract(format!("training configuration: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub report: MetricReport,
}

/// Trains one model per K with a shared seed and schedule.
pub fn ablate_k(cfg: &TrainConfig, scene: &SceneConfig, data: &[Sample], val: &[Sample], ks: &[usize]) -> Result<Vec<AblationRow>> {
    Ok(ablate_k_runs(cfg, scene, data, val, ks)?.into_iter().map(|(r, _)| r).collect())
}

/// [`ablate_k`] that also returns each trained run.
pub fn ablate_k_runs(
    cfg: &TrainConfig,
    scene: &SceneConfig,
    data: &[Sample],
    val: &[Sample],
    ks: &[usize],
) -> Result<Vec<(AblationRow, TrainOutcome)>> {
    if ks.is_empty() {
        return Err(Error::contract("K list is empty"));
    }
    ks.iter()
        .map(|&k| {
            let c = TrainConfig { k, ..cfg.clone() };
            let o = train(&c, scene, data, None, None)?;
            let report = evaluate(&o.model, val, cfg.batch_size)?;
            Ok((AblationRow { k, report }, o))
        })
        .collect()
}

/// Spread of the primary metric across rows: `(max − min) / mean`.
pub fn relative_spread(rows: &[AblationRow]) -> f64 {
    let v: Vec<f64> = rows.iter().map(|r| r.report.primary().1).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (max - min) / mean.abs()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut keys: Vec<&String> = rows.first().map(|r| r.report.metrics.keys().collect()).unwrap_or_default();
    keys.retain(|k| !k.starts_with("iou_"));
    let mut s = String::from("K");
    for k in &keys {
        let _ = write!(s, "\t{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.k);
        for k in &keys {
            let _ = write!(s, "\t{:.4}", r.report.metrics[*k]);
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub cluster: MetricReport,
    pub baseline: MetricReport,
    /// `cluster − baseline` per metric.
    pub deltas: BTreeMap<String, f64>,
}

/// Trains the cluster head and the regression baseline on the same backbone
/// configuration and schedule.
pub fn compare_baseline(cfg: &TrainConfig, scene: &SceneConfig, data: &[Sample], val: &[Sample]) -> Result<BaselineComparison> {
    let run = |head| -> Result<MetricReport> {
        let c = TrainConfig { head, ..cfg.clone() };
        let o = train(&c, scene, data, None, None)?;
        evaluate(&o.model, val, cfg.batch_size)
    };
    let cluster = run(HeadKind::Cluster)?;
    let baseline = run(HeadKind::Baseline)?;
    Ok(BaselineComparison {
        deltas: report_deltas(&cluster, &baseline),
        cluster,
        baseline,
    })
}

pub fn report_deltas(a: &MetricReport, b: &MetricReport) -> BTreeMap<String, f64> {
    a.metrics
        .iter()
        .filter_map(|(k, v)| b.metrics.get(k).map(|w| (k.clone(), v - w)))
        .collect()
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    persist::write_atomic(path, contents.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Attention;
    use crate::scene::generate_split;

    #[test]
    fn adamw_examples() {
        let mut p = vec![Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let mut o = AdamW::new(&p, 0.0);
        o.step(&mut p, &[vec![0.0, 0.0]], &[0.1]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let mut p = vec![Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let mut o = AdamW::new(&p, 0.05);
        o.step(&mut p, &[vec![0.0, 0.0]], &[0.1]).unwrap();
        assert!((p[0].data()[0] - 0.995).abs() < 1e-7);
        assert!((p[0].data()[1] + 1.99).abs() < 1e-7);

        let mut p = vec![Tensor::scalar(0.0f32)];
        let mut o = AdamW::new(&p, 0.0);
        o.step(&mut p, &[vec![1.0]], &[0.01]).unwrap();
        assert!((p[0].item() + 0.01).abs() < 1e-9);

        assert!(o.step(&mut p, &[vec![1.0, 2.0]], &[0.01]).is_err());
    }

    fn tiny_cfg(task: Task) -> (TrainConfig, SceneConfig, Vec<Sample>) {
        let scene = SceneConfig::with_size(16);
        let data = generate_split(7, 6, &scene).unwrap();
        let mut c = TrainConfig::new(task);
        c.backbone = BackboneConfig {
            widths: [4, 6, 6],
            d: 8,
            n_dec: 1,
            attention: Attention::Kmeans,
        };
        c.k = if task == Task::Seg { 4 } else { 3 };
        c.batch_size = 2;
        c.steps = 6;
        c.lr = 1e-3;
        (c, scene, data)
    }

    #[test]
    fn data_order_is_a_function_of_step() {
        let (c, scene, data) = tiny_cfg(Task::Depth);
        let mut a = Trainer::new(c.clone(), &scene, &data).unwrap();
        let mut b = Trainer::new(c, &scene, &data).unwrap();
        let e0: Vec<usize> = (0..3).flat_map(|s| a.batch_indices(s)).collect();
        let mut sorted = e0.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert_eq!(b.batch_indices(4), a.batch_indices(4));
        assert_eq!(b.batch_indices(1), e0[2..4]);
    }

    #[test]
    fn same_seed_same_trace() {
        let (c, scene, data) = tiny_cfg(Task::Seg);
        let a = train(&c, &scene, &data, None, None).unwrap();
        let b = train(&c, &scene, &data, None, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_loss() {
        let (mut c, scene, data) = tiny_cfg(Task::Normal);
        c.lr = 0.0;
        c.batch_size = 6;
        let init = Model::init(c.model_config(&scene).unwrap(), c.seed).unwrap();
        let o = train(&c, &scene, &data, None, None).unwrap();
        assert_eq!(o.model.params, init.params);
        // Same batch every step, only the summation order differs.
        assert!(o.trace.windows(2).all(|w| (w[0].total - w[1].total).abs() < 1e-5 * w[0].total.abs().max(1.0)));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (c, scene, data) = tiny_cfg(Task::Depth);
        let full = train(&c, &scene, &data, None, None).unwrap();
        let mut t = Trainer::new(c.clone(), &scene, &data).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.pmxc");
        persist::write_checkpoint(&p, &t.checkpoint_entries()).unwrap();
        drop(t);
        let entries = persist::read_checkpoint(&p).unwrap();
        assert_eq!(train_config_from_entries(&entries).unwrap(), c);
        let mut r = Trainer::resume(c.clone(), &entries, &data).unwrap();
        assert_eq!(r.step_count(), 3);
        let mut last = None;
        for _ in 3..c.steps {
            last = Some(r.step().unwrap());
        }
        let last = last.unwrap();
        assert_eq!(last, full.trace[c.steps - 1]);
        assert_eq!(r.model.params, full.model.params);
    }

    #[test]
    fn evaluation_contracts() {
        let (c, scene, data) = tiny_cfg(Task::Depth);
        let m = Model::init(c.model_config(&scene).unwrap(), 1).unwrap();
        let before = m.clone();
        let a = evaluate(&m, &data, 4).unwrap();
        let b = evaluate(&m, &data, 3).unwrap();
        assert_eq!(m, before);
        assert_eq!(a.metrics.keys().collect::<Vec<_>>(), b.metrics.keys().collect::<Vec<_>>());
        for (k, v) in &a.metrics {
            assert!(v.is_finite());
            assert!((v - b.metrics[k]).abs() < 1e-9, "{k}");
        }
        let d = ["delta1", "delta2", "delta3"].map(|k| a.metrics[k]);
        assert!(d[0] <= d[1] && d[1] <= d[2] && d[2] <= 1.0 && d[0] >= 0.0);

        for task in Task::ALL {
            let r = evaluate_oracle(task, &data, &scene).unwrap();
            match task {
                Task::Seg => assert_eq!(r.metrics["miou"], 1.0),
                Task::Depth => {
                    assert_eq!(r.metrics["rms"], 0.0);
                    assert_eq!(r.metrics["delta1"], 1.0);
                }
                Task::Normal => {
                    assert!(r.metrics["mean"] < 1e-3);
                    assert_eq!(r.metrics["within_11.5"], 1.0);
                }
            }
        }

        let e = m.checkpoint_entries();
        assert!(evaluate_checkpoint(&e, &data, Task::Normal, None, 4).is_err());
        assert!(evaluate_checkpoint(&e, &data, Task::Depth, Some(5), 4).is_err());
        assert!(evaluate_checkpoint(&e, &data, Task::Depth, Some(3), 4).is_ok());
    }

    #[test]
    fn train_writes_artifacts() {
        let (mut c, scene, data) = tiny_cfg(Task::Depth);
        c.eval_every = 3;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            checkpoint: dir.path().join("m.pmxc"),
        };
        let o = train(&c, &scene, &data, Some(&data[..2]), Some(&out)).unwrap();
        assert_eq!(o.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 6]);
        assert!(out.checkpoint.exists() && out.best().exists());
        let csv = fs::read_to_string(out.loss_csv()).unwrap();
        assert!(csv.starts_with("step,total,silog,rel_sq,grad\n"));
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(fs::read_to_string(out.evals()).unwrap().lines().count(), 2);
    }

    #[test]
    fn harnesses_produce_rows() {
        let (mut c, scene, data) = tiny_cfg(Task::Depth);
        c.steps = 2;
        let rows = ablate_k(&c, &scene, &data, &data[..2], &[2, 3]).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 3]);
        let again = ablate_k(&c, &scene, &data, &data[..2], &[3]).unwrap();
        assert_eq!(again[0], rows[1]);
        assert!(ablation_table(&rows).starts_with("K\t"));
        assert!(ablate_k(&c, &scene, &data, &data, &[]).is_err());
        let cmp = compare_baseline(&c, &scene, &data, &data[..2]).unwrap();
        assert_eq!(cmp.deltas.len(), cmp.cluster.metrics.len());
    }
}
