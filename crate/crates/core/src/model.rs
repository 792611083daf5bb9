//! A complete network for one task: backbone plus either the cluster head or
//! the per-pixel regression baseline, with batch assembly and decoding.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{self, HeadKind, Task};
use crate::nn::{Bound, ParamStore};
use crate::objectives::Targets;
use crate::rng::Rng;
use crate::scene::{Sample, SceneConfig};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Checkpoint entry holding the JSON-encoded [`ModelConfig`], one byte per
/// element.
pub const META_CONFIG: &str = "meta/config";
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub head: HeadKind,
    /// Cluster count; must equal `num_classes` for the segmentation cluster head.
    pub k: usize,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl ModelConfig {
    pub fn new(task: Task, head: HeadKind, k: usize, backbone: BackboneConfig, scene: &SceneConfig) -> Result<Self> {
        let c = ModelConfig {
            task,
            head,
            k,
            backbone,
            num_classes: scene.num_classes,
            d_min: scene.d_min,
            d_max: scene.d_max,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.k == 0 {
            return Err(Error::contract("K must be at least 1"));
        }
        if self.task == Task::Seg && self.head == HeadKind::Cluster && self.k != self.num_classes {
            return Err(Error::contract(format!(
                "segmentation uses one query per class (K = C): got K={}, C={}",
                self.k, self.num_classes
            )));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::contract(format!("invalid depth range [{}, {}]", self.d_min, self.d_max)));
        }
        Ok(())
    }
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Segmentation logits `[B, N, C]`, depth `[B, N]` or unit normals `[B, N, 3]`
    /// at full resolution.
    pub prediction: Var,
    /// Full-resolution probability map `[B, N, K]` (cluster head only).
    pub probs: Option<Var>,
    /// Bin centers `[B, K]` or sphere-segment centers `[B, K, 3]`.
    pub centers: Option<Var>,
    /// Normals before the final renormalization `[B, N, 3]`.
    pub raw_normal: Option<Var>,
}

/// Host-side per-pixel predictions for a batch, flattened.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Labels(Vec<u8>),
    Depth(Vec<f64>),
    Normal(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, INIT_STREAM);
        let mut p = ParamStore::new();
        backbone::init_pixel_params(&mut p, &mut rng, &config.backbone)?;
        let d = config.backbone.d;
        match config.head {
            HeadKind::Cluster => {
                backbone::init_decoder_params(&mut p, &mut rng, &config.backbone, config.k)?;
                heads::init_cluster_head(&mut p, &mut rng, config.task, d)?;
            }
            HeadKind::Baseline => heads::init_baseline_head(&mut p, &mut rng, config.task, d, config.num_classes)?,
        }
        Ok(Model { config, params: p })
    }

    /// Parameters plus the `meta/config` entry.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut e = self.params.to_entries();
        e.push((META_CONFIG.to_string(), encode_config(&self.config)));
        e
    }

    /// Rebuilds a model from checkpoint entries; `opt/*` entries are ignored.
    pub fn from_entries(entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let config = config_from_entries(entries)?;
        let mut m = Model::init(config, 0)?;
        let params: Vec<_> = entries
            .iter()
            .filter(|(n, _)| !n.starts_with("meta/") && !n.starts_with("opt/"))
            .cloned()
            .collect();
        if params.len() != m.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params.load(&params)?;
        Ok(m)
    }
}

fn encode_config(c: &ModelConfig) -> Tensor<f32> {
    let bytes = serde_json::to_vec(c).expect("config serializes");
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
    Tensor::new(vec![data.len()], data).expect("rank-1 tensor")
}

pub fn config_from_entries(entries: &[(String, Tensor<f32>)]) -> Result<ModelConfig> {
    let t = entries
        .iter()
        .find(|(n, _)| n == META_CONFIG)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::contract("checkpoint has no model configuration"))?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::contract("malformed model configuration entry"))
            }
        })
        .collect::<Result<_>>()?;
    let c: ModelConfig =
        serde_json::from_slice(&bytes).map_err(|e| Error::contract(format!("model configuration: {e}")))?;
    c.validate()?;
    Ok(c)
}

/// Forward pass for `image: [B, 3, H, W]`.
pub fn forward<T: Scalar>(cfg: &ModelConfig, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Forward> {
    match cfg.head {
        HeadKind::Baseline => {
            let feats = backbone::encode_pixels(g, p, image, &cfg.backbone)?;
            let prediction = heads::baseline_head(g, p, &feats, cfg.task, cfg.d_min, cfg.d_max)?;
            Ok(Forward {
                prediction,
                probs: None,
                centers: None,
                raw_normal: None,
            })
        }
        HeadKind::Cluster => {
            let (feats, q) = backbone::run_backbone(g, p, image, &cfg.backbone)?;
            cluster_head(cfg, g, p, feats.flat, q, feats.h, feats.w)
        }
    }
}

/// Cluster head on stride-4 features `f: [B, h·w, D]` and centers `q: [B, K, D]`.
pub fn cluster_head<T: Scalar>(
    cfg: &ModelConfig,
    g: &mut Graph<T>,
    p: &Bound,
    f: Var,
    q: Var,
    h: usize,
    w: usize,
) -> Result<Forward> {
    let logits = heads::cluster_logits(g, f, q)?;
    let logits_up = heads::upsample_rows(g, logits, h, w)?;
    let probs_up = g.softmax(logits_up, 2)?;
    let mut out = Forward {
        prediction: probs_up,
        probs: Some(probs_up),
        centers: None,
        raw_normal: None,
    };
    match cfg.task {
        Task::Seg => {
            out.prediction = logits_up;
        }
        Task::Depth => {
            let (centers, _) = heads::depth_bins(g, p, q, cfg.d_min, cfg.d_max)?;
            out.prediction = heads::depth_compose(g, probs_up, centers)?;
            out.centers = Some(centers);
        }
        Task::Normal => {
            let v = heads::normal_vectors(g, p, q)?;
            let (n, raw) = heads::normal_compose(g, probs_up, v)?;
            out.prediction = n;
            out.centers = Some(v);
            out.raw_normal = Some(raw);
        }
    }
    Ok(out)
}

/// Reads the task prediction off the graph.
pub fn decode<T: Scalar>(cfg: &ModelConfig, g: &Graph<T>, f: &Forward) -> Result<Prediction> {
    Ok(match cfg.task {
        Task::Seg => {
            let labels = match (cfg.head, f.probs) {
                (HeadKind::Cluster, Some(p)) => heads::seg_predict(g.data(p), cfg.k, cfg.num_classes)?,
                _ => heads::argmax_rows(g.data(f.prediction), cfg.num_classes)
                    .into_iter()
                    .map(|c| c as u8)
                    .collect(),
            };
            Prediction::Labels(labels)
        }
        Task::Depth => Prediction::Depth(g.value(f.prediction).to_f64_vec()),
        Task::Normal => Prediction::Normal(g.value(f.prediction).to_f64_vec()),
    })
}

/// `[B, 3, H, W]` image batch from interleaved `H×W×3` samples.
pub fn batch_images<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let n = h * w;
    let mut data = Vec::with_capacity(samples.len() * 3 * n);
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::contract("batch mixes image sizes"));
        }
        for c in 0..3 {
            data.extend(s.image.iter().skip(c).step_by(3).map(|&v| T::of(v as f64)));
        }
    }
    Tensor::new(vec![samples.len(), 3, h, w], data)
}

/// Ground truth for a batch. Depth outside `[d_min, d_max]` is masked.
pub fn batch_targets(samples: &[&Sample], d_min: f64, d_max: f64) -> Result<Targets> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut t = Targets {
        batch: samples.len(),
        height: h,
        width: w,
        labels: Vec::new(),
        depth: Vec::new(),
        normal: Vec::new(),
        valid: Vec::new(),
    };
    for s in samples {
        if s.height != h || s.width != w {
            return Err(Error::contract("batch mixes image sizes"));
        }
        t.labels.extend_from_slice(&s.labels);
        t.depth.extend(s.depth.iter().map(|&d| d as f64));
        t.normal.extend(s.normal.iter().map(|&v| v as f64));
        t.valid.extend(s.depth.iter().map(|&d| {
            let d = d as f64;
            d.is_finite() && d >= d_min * (1.0 - 1e-6) && d <= d_max * (1.0 + 1e-6)
        }));
    }
    Ok(t)
}
