//! Command-line front end. Exit codes: 0 success, 1 runtime or data error,
//! 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{Attention, BackboneConfig};
use crate::error::Error;
use crate::heads::{self, HeadKind, Task};
use crate::model::{Model, Prediction};
use crate::persist::{self, DatasetHeader, Manifest};
use crate::scene::{generate_split, Sample, SceneConfig};
use crate::train::{self, TrainConfig, TrainOutputs, Trainer};

#[derive(Debug, Parser)]
#[command(name = "pmx", version, about = "Cluster-prediction dense heads on procedural scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a dataset split and its JSON manifest.
    Generate(GenerateArgs),
    /// Train one task head.
    Train(TrainArgs),
    /// Print the metric report of a checkpoint as JSON.
    Eval(EvalArgs),
    /// Write the prediction for one sample as PGM/PPM images.
    Predict(SampleArgs),
    /// Write one PGM panel per cluster of the probability map.
    DumpProbmaps(SampleArgs),
    /// Train one model per K and print the comparison table.
    AblateK(AblateArgs),
    /// Train the cluster head and the per-pixel baseline and print both reports.
    CompareBaseline(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Image side in pixels (multiple of 8).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "data/train.pmxd")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Seg,
    Depth,
    Normal,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Depth => Task::Depth,
            TaskArg::Normal => Task::Normal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Kmeans,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Cluster,
    Baseline,
}

/// Model and schedule flags shared by the training commands.
#[derive(Debug, Args, Clone)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Depth)]
    pub task: TaskArg,
    #[arg(long, default_value = "data/train.pmxd")]
    pub data: PathBuf,
    /// Number of clusters; defaults to the class count for seg and 16 otherwise.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value_t = VariantArg::Kmeans)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = train::LR_PRETRAIN)]
    pub lr: f64,
    /// Use the fine-tuning learning-rate preset instead of --lr.
    #[arg(long)]
    pub finetune: bool,
    #[arg(long, default_value_t = 0.1)]
    pub backbone_lr_mult: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable global gradient-norm clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Pixel-decoder widths of the stem, stage 1 and stage 2.
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 64])]
    pub widths: Vec<usize>,
    /// Embedding dimension D.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_blocks: usize,
    /// Print the loss every this many steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_enum, default_value_t = HeadArg::Cluster)]
    pub head: HeadArg,
    /// Validation split for periodic evaluation and best-checkpoint selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "model.pmxc")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Depth)]
    pub task: TaskArg,
    #[arg(long, default_value = "data/train.pmxd")]
    pub data: PathBuf,
    #[arg(long, default_value = "model.pmxc")]
    pub ckpt: PathBuf,
    /// Require the checkpoint to have this many clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// Score the ground truth against itself instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "model.pmxc")]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "data/train.pmxd")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
    pub ks: Vec<usize>,
    /// Evaluation split; the training split is used when omitted.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Evaluation split; the training split is used when omitted.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` and runs the command.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::DumpProbmaps(a) => probmaps_cmd(&a),
        Command::AblateK(a) => ablate_cmd(&a),
        Command::CompareBaseline(a) => compare_cmd(&a),
    }
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let scene = SceneConfig::with_size(a.size);
    scene.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !a.size.is_multiple_of(crate::backbone::INPUT_MULTIPLE) {
        return Err(CliError::Usage(format!(
            "--size must be a multiple of {}",
            crate::backbone::INPUT_MULTIPLE
        )));
    }
    let samples = generate_split(a.seed, a.count, &scene)?;
    ensure_parent(&a.out)?;
    persist::write_dataset(&a.out, &samples, &scene)?;
    persist::write_manifest(&a.out, &Manifest::new(a.seed, a.count, scene))?;
    eprintln!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

/// Loads a dataset and the scene configuration its header implies. A
/// missing file is a usage error: the flag defaults point at the output of
/// a flag-free `generate`.
pub fn load_dataset(path: &Path) -> CliResult<(SceneConfig, Vec<Sample>)> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist (run `pmx generate` or pass --data)",
            path.display()
        )));
    }
    let (h, samples): (DatasetHeader, Vec<Sample>) = persist::read_dataset(path)?;
    let scene = train::scene_for(&samples, h.d_min as f64, h.d_max as f64, h.classes as usize)?;
    Ok((scene, samples))
}

fn train_config(s: &ScheduleArgs, head: HeadArg, scene: &SceneConfig) -> CliResult<TrainConfig> {
    let task: Task = s.task.into();
    let k = s.k.unwrap_or(if task == Task::Seg { scene.num_classes } else { 16 });
    if task == Task::Seg && head == HeadArg::Cluster && k != scene.num_classes {
        return Err(CliError::Usage(format!(
            "segmentation requires K = C (one query per class): --k {k} but the data has C = {}",
            scene.num_classes
        )));
    }
    if s.widths.len() != 3 {
        return Err(CliError::Usage(format!("--widths takes 3 values, got {}", s.widths.len())));
    }
    let mut c = TrainConfig::new(task);
    c.head = match head {
        HeadArg::Cluster => HeadKind::Cluster,
        HeadArg::Baseline => HeadKind::Baseline,
    };
    c.k = k;
    c.backbone = BackboneConfig {
        widths: [s.widths[0], s.widths[1], s.widths[2]],
        d: s.dim,
        n_dec: s.decoder_blocks,
        attention: match s.variant {
            VariantArg::Kmeans => Attention::Kmeans,
            VariantArg::Standard => Attention::Standard,
        },
    };
    c.lr = if s.finetune { train::LR_FINETUNE } else { s.lr };
    c.backbone_lr_mult = s.backbone_lr_mult;
    c.weight_decay = s.weight_decay;
    c.steps = s.steps;
    c.batch_size = s.batch_size;
    c.seed = s.seed;
    c.clip_norm = if s.no_clip { None } else { c.clip_norm };
    c.log_every = s.log_every;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    c.model_config(scene).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let (scene, data) = load_dataset(&a.schedule.data)?;
    let mut cfg = train_config(&a.schedule, a.head, &scene)?;
    cfg.eval_every = a.eval_every;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    ensure_parent(&a.out)?;
    let out = TrainOutputs {
        checkpoint: a.out.clone(),
    };
    let trainer = match &a.resume {
        Some(p) => {
            let entries = persist::read_checkpoint(p)?;
            let mut stored = train::train_config_from_entries(&entries)?;
            stored.steps = cfg.steps;
            stored.eval_every = cfg.eval_every;
            stored.log_every = cfg.log_every;
            Trainer::resume(stored, &entries, &data)?
        }
        None => Trainer::new(cfg, &scene, &data)?,
    };
    let o = train::run(trainer, val.as_ref().map(|(_, v)| v.as_slice()), Some(&out))?;
    if let Some(last) = o.trace.last() {
        eprintln!("final step {} loss {:.5}", last.step, last.total);
    }
    if let Some((s, r)) = &o.best {
        eprintln!("best {} at step {s}: {:.4}", r.primary().0, r.primary().1);
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let (scene, data) = load_dataset(&a.data)?;
    let task: Task = a.task.into();
    let report = if a.oracle {
        train::evaluate_oracle(task, &data, &scene)?
    } else {
        let entries = persist::read_checkpoint(&a.ckpt)?;
        train::evaluate_checkpoint(&entries, &data, task, a.k, a.batch_size)?
    };
    println!("{}", report.to_json_line());
    Ok(())
}

fn load_sample(a: &SampleArgs) -> CliResult<(Model, Sample)> {
    let (_, mut data) = load_dataset(&a.data)?;
    if a.index >= data.len() {
        return Err(CliError::Usage(format!(
            "--index {} is out of range for {} samples",
            a.index,
            data.len()
        )));
    }
    let model = Model::from_entries(&persist::read_checkpoint(&a.ckpt)?)?;
    Ok((model, data.swap_remove(a.index)))
}

/// Depth in `[d_min, d_max]` mapped linearly onto 0..=255.
pub fn depth_to_gray(d: f64, d_min: f64, d_max: f64) -> u16 {
    (((d - d_min) / (d_max - d_min)).clamp(0.0, 1.0) * 255.0).round() as u16
}

/// Normal component in `[-1, 1]` mapped by `floor((n + 1)/2 · 255 + 0.5)`.
pub fn normal_to_byte(n: f64) -> u8 {
    (((n.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0 + 0.5).floor()) as u8
}

/// Writes `pred_<task>` (and `gt_<task>`) images for one sample; returns the paths.
pub fn write_prediction(dir: &Path, model: &Model, sample: &Sample) -> crate::Result<Vec<PathBuf>> {
    let c = &model.config;
    let inf = train::infer(model, &[sample])?;
    let (h, w) = (sample.height, sample.width);
    let task = c.task;
    let gt = match task {
        Task::Seg => Prediction::Labels(sample.labels.clone()),
        Task::Depth => Prediction::Depth(sample.depth.iter().map(|&v| v as f64).collect()),
        Task::Normal => Prediction::Normal(sample.normal.iter().map(|&v| v as f64).collect()),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (tag, p) in [("pred", &inf.prediction), ("gt", &gt)] {
        let path = match p {
            Prediction::Labels(l) => {
                let path = dir.join(format!("{tag}_{task}.pgm"));
                let px: Vec<u16> = l.iter().map(|&v| v.min(c.num_classes as u8 - 1) as u16).collect();
                persist::write_pgm(&path, w, h, (c.num_classes - 1).max(1) as u16, &px)?;
                path
            }
            Prediction::Depth(d) => {
                let path = dir.join(format!("{tag}_{task}.pgm"));
                let px: Vec<u16> = d.iter().map(|&v| depth_to_gray(v, c.d_min, c.d_max)).collect();
                persist::write_pgm(&path, w, h, 255, &px)?;
                path
            }
            Prediction::Normal(n) => {
                let path = dir.join(format!("{tag}_{task}.ppm"));
                let px: Vec<u8> = n.iter().map(|&v| normal_to_byte(v)).collect();
                persist::write_ppm(&path, w, h, &px)?;
                path
            }
        };
        paths.push(path);
    }
    Ok(paths)
}

fn predict_cmd(a: &SampleArgs) -> CliResult<()> {
    let (model, sample) = load_sample(a)?;
    for p in write_prediction(&a.out, &model, &sample)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Writes the K probability panels of one sample; returns the paths and the
/// cluster centers reported by the head.
pub fn write_probmaps(dir: &Path, model: &Model, sample: &Sample) -> crate::Result<(Vec<PathBuf>, Vec<f64>)> {
    let c = &model.config;
    let inf = train::infer(model, &[sample])?;
    let probs = inf
        .probs
        .ok_or_else(|| Error::contract("the per-pixel baseline has no probability map"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = heads::dump_probmaps(dir, c.task, &probs, c.k, sample.height, sample.width)?;
    Ok((paths, inf.centers.unwrap_or_default()))
}

fn probmaps_cmd(a: &SampleArgs) -> CliResult<()> {
    let (model, sample) = load_sample(a)?;
    let (paths, centers) = write_probmaps(&a.out, &model, &sample)?;
    if model.config.task == Task::Depth {
        eprintln!("bin centers {centers:.3?}");
    }
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn val_split(p: &Option<PathBuf>, train_data: &[Sample]) -> CliResult<Vec<Sample>> {
    match p {
        Some(p) => Ok(load_dataset(p)?.1),
        None => {
            eprintln!("no --val given; evaluating on the training split");
            Ok(train_data.to_vec())
        }
    }
}

fn ablate_cmd(a: &AblateArgs) -> CliResult<()> {
    if a.ks.is_empty() {
        return Err(CliError::Usage("--ks must list at least one K".into()));
    }
    let (scene, data) = load_dataset(&a.schedule.data)?;
    let cfg = train_config(&a.schedule, HeadArg::Cluster, &scene)?;
    for &k in &a.ks {
        TrainConfig { k, ..cfg.clone() }
            .model_config(&scene)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let val = val_split(&a.val, &data)?;
    let rows = train::ablate_k(&cfg, &scene, &data, &val, &a.ks)?;
    print!("{}", train::ablation_table(&rows));
    eprintln!("relative spread of {}: {:.4}", rows[0].report.primary().0, train::relative_spread(&rows));
    Ok(())
}

fn compare_cmd(a: &CompareArgs) -> CliResult<()> {
    let (scene, data) = load_dataset(&a.schedule.data)?;
    let cfg = train_config(&a.schedule, HeadArg::Cluster, &scene)?;
    let val = val_split(&a.val, &data)?;
    let cmp = train::compare_baseline(&cfg, &scene, &data, &val)?;
    println!(
        "{}",
        serde_json::to_string(&cmp).map_err(|e| Error::contract(e.to_string()))?
    );
    Ok(())
}
