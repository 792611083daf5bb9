//! Evaluation metrics, accumulated over a dataset by pooling all pixels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Task;

/// Depth inlier base; thresholds are `1.25^i` for `i = 1, 2, 3`.
pub const DELTA_BASE: f64 = 1.25;
/// Angular inlier thresholds in degrees.
pub const ANGLE_THRESHOLDS: [f64; 3] = [11.5, 22.5, 30.0];

/// Confusion-matrix accumulator for semantic segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegAccumulator {
    classes: usize,
    ignore: u8,
    /// `confusion[gt · C + pred]`.
    confusion: Vec<u64>,
}

impl SegAccumulator {
    pub fn new(classes: usize, ignore: u8) -> Self {
        SegAccumulator {
            classes,
            ignore,
            confusion: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(gt) {
            if t == self.ignore {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::contract(format!("label {t} / prediction {p} outside {c} classes")));
            }
            self.confusion[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SegAccumulator) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
    }

    pub fn pixels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Per-class IoU (`None` for classes absent from both prediction and
    /// ground truth) and their mean. The mean is 0 when no class is present.
    pub fn finish(&self) -> (Vec<Option<f64>>, f64) {
        let c = self.classes;
        let ious: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.confusion[k * c + k];
                let gt: u64 = (0..c).map(|p| self.confusion[k * c + p]).sum();
                let pr: u64 = (0..c).map(|t| self.confusion[t * c + k]).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        (ious, mean)
    }
}

pub fn miou(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Result<(Vec<Option<f64>>, f64)> {
    let mut acc = SegAccumulator::new(classes, ignore);
    acc.add(pred, gt)?;
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rms: f64,
    pub abs_rel: f64,
    pub log10: f64,
    pub delta: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    n: u64,
    sq: f64,
    rel: f64,
    log10: f64,
    inliers: [u64; 3],
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || mask.len() != gt.len() {
            return Err(Error::dim(format!(
                "depth metrics: {} predictions, {} targets, {} mask entries",
                pred.len(),
                gt.len(),
                mask.len()
            )));
        }
        let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
        for ((&d, &t), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            if !(d > 0.0 && t > 0.0) {
                return Err(Error::contract(format!("non-positive depth {d} / {t} on a valid pixel")));
            }
            self.n += 1;
            self.sq += (d - t) * (d - t);
            self.rel += (d - t).abs() / t;
            self.log10 += (d.log10() - t.log10()).abs();
            let ratio = (d / t).max(t / d);
            for (c, &th) in self.inliers.iter_mut().zip(&thresholds) {
                if ratio < th {
                    *c += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &DepthAccumulator) {
        self.n += o.n;
        self.sq += o.sq;
        self.rel += o.rel;
        self.log10 += o.log10;
        for (a, b) in self.inliers.iter_mut().zip(o.inliers) {
            *a += b;
        }
    }

    pub fn pixels(&self) -> u64 {
        self.n
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::contract("depth metrics over an empty mask"));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            rms: (self.sq / n).sqrt(),
            abs_rel: self.rel / n,
            log10: self.log10 / n,
            delta: self.inliers.map(|c| c as f64 / n),
        })
    }
}

pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    pub rms: f64,
    pub within: [f64; 3],
}

fn unit(v: &[f64]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Cosine between two 3-vectors after defensive renormalization, clamped to
/// `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (unit(a), unit(b));
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0)
}

/// Angle in degrees between two 3-vectors.
pub fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).acos().to_degrees()
}

/// Collects per-pixel angles (the median needs all of them).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalAccumulator {
    angles: Vec<f64>,
    inliers: [u64; 3],
}

impl NormalAccumulator {
    /// `pred` and `gt` are interleaved 3-vectors, one per mask entry.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() != mask.len() * 3 {
            return Err(Error::dim(format!(
                "normal metrics: {} predicted, {} target values for {} pixels",
                pred.len(),
                gt.len(),
                mask.len()
            )));
        }
        // Inliers are decided on the cosine so that an angle exactly at a
        // threshold is excluded regardless of arccos rounding.
        let cos_th = ANGLE_THRESHOLDS.map(|t: f64| t.to_radians().cos());
        for ((p, t), &m) in pred.chunks(3).zip(gt.chunks(3)).zip(mask) {
            if !m {
                continue;
            }
            let c = cosine(p, t);
            self.angles.push(c.acos().to_degrees());
            for (n, &th) in self.inliers.iter_mut().zip(&cos_th) {
                if c > th {
                    *n += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &NormalAccumulator) {
        self.angles.extend_from_slice(&o.angles);
        for (a, b) in self.inliers.iter_mut().zip(o.inliers) {
            *a += b;
        }
    }

    pub fn pixels(&self) -> u64 {
        self.angles.len() as u64
    }

    pub fn finish(&self) -> Result<NormalMetrics> {
        if self.angles.is_empty() {
            return Err(Error::contract("normal metrics over an empty mask"));
        }
        let n = self.angles.len() as f64;
        let mut sorted = self.angles.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(NormalMetrics {
            mean: self.angles.iter().sum::<f64>() / n,
            median: sorted[(sorted.len() - 1) / 2],
            rms: (self.angles.iter().map(|a| a * a).sum::<f64>() / n).sqrt(),
            within: self.inliers.map(|c| c as f64 / n),
        })
    }
}

pub fn normal_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<NormalMetrics> {
    let mut acc = NormalAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// Named scalar metrics for one task over a whole split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub pixels: u64,
    /// How per-pixel values were aggregated across images.
    pub pooling: String,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    fn new(task: Task, pixels: u64, metrics: BTreeMap<String, f64>) -> Self {
        MetricReport {
            task,
            pixels,
            pooling: "pooled over all valid pixels".into(),
            metrics,
        }
    }

    pub fn seg(acc: &SegAccumulator, class_names: &[&str]) -> Self {
        let (ious, mean) = acc.finish();
        let mut m = BTreeMap::new();
        m.insert("miou".to_string(), mean);
        for (i, iou) in ious.iter().enumerate() {
            if let Some(v) = iou {
                let name = class_names.get(i).map(|s| s.to_string()).unwrap_or_else(|| i.to_string());
                m.insert(format!("iou_{name}"), *v);
            }
        }
        Self::new(Task::Seg, acc.pixels(), m)
    }

    pub fn depth(acc: &DepthAccumulator) -> Result<Self> {
        let d = acc.finish()?;
        let mut m = BTreeMap::new();
        m.insert("rms".to_string(), d.rms);
        m.insert("abs_rel".to_string(), d.abs_rel);
        m.insert("log10".to_string(), d.log10);
        for (i, v) in d.delta.iter().enumerate() {
            m.insert(format!("delta{}", i + 1), *v);
        }
        Ok(Self::new(Task::Depth, acc.pixels(), m))
    }

    pub fn normal(acc: &NormalAccumulator) -> Result<Self> {
        let n = acc.finish()?;
        let mut m = BTreeMap::new();
        m.insert("mean".to_string(), n.mean);
        m.insert("median".to_string(), n.median);
        m.insert("rms".to_string(), n.rms);
        for (t, v) in ANGLE_THRESHOLDS.iter().zip(n.within) {
            m.insert(format!("within_{t}"), v);
        }
        Ok(Self::new(Task::Normal, acc.pixels(), m))
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        self.metrics
            .get(key)
            .copied()
            .ok_or_else(|| Error::contract(format!("{} report has no metric {key:?}", self.task)))
    }

    /// The metric used to pick the best checkpoint and summarize runs:
    /// mIoU, δ₁, or mean angular error.
    pub fn primary(&self) -> (&'static str, f64) {
        let key = primary_metric(self.task);
        (key, self.metrics.get(key).copied().unwrap_or(f64::NAN))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Seg => "miou",
        Task::Depth => "delta1",
        Task::Normal => "mean",
    }
}

/// Whether larger values of the task's primary metric are better.
pub fn higher_is_better(task: Task) -> bool {
    !matches!(task, Task::Normal)
}
