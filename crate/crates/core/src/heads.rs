//! Cluster-prediction heads. Every task reads the same probability map
//! `P = softmax_K(F·Qᵀ)` and combines it with per-cluster values: class
//! identities (segmentation), adaptive bin centers (depth) or unit
//! sphere-segment centers (normals). A per-pixel regression head is kept as
//! the baseline.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{PixelFeatures, FEATURE_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::persist;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Var};

/// Guard on vector norms before normalization.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Depth,
    Normal,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Seg, Task::Depth, Task::Normal];

    /// Per-pixel output dimensionality; segmentation regresses nothing and
    /// reports 1 (a class id).
    pub fn output_dim(self) -> usize {
        match self {
            Task::Seg | Task::Depth => 1,
            Task::Normal => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Depth => "depth",
            Task::Normal => "normal",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "depth" => Ok(Task::Depth),
            "normal" => Ok(Task::Normal),
            _ => Err(Error::contract(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cluster,
    Baseline,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Cluster => "cluster",
            HeadKind::Baseline => "baseline",
        })
    }
}

pub fn init_cluster_head<T: Scalar>(p: &mut ParamStore<T>, rng: &mut Rng, task: Task, d: usize) -> Result<()> {
    match task {
        Task::Seg => Ok(()),
        Task::Depth => {
            nn::init_linear(p, rng, "head/bin1", d, d)?;
            nn::init_linear(p, rng, "head/bin2", d, 1)
        }
        Task::Normal => {
            nn::init_linear(p, rng, "head/normal1", d, d)?;
            nn::init_linear(p, rng, "head/normal2", d, 3)
        }
    }
}

pub fn init_baseline_head<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut Rng,
    task: Task,
    d: usize,
    num_classes: usize,
) -> Result<()> {
    let out = match task {
        Task::Seg => num_classes,
        t => t.output_dim(),
    };
    nn::init_conv(p, rng, "head/baseline", d, out, 1)
}

/// Raw cluster logits `F·Qᵀ`: `[B, N, D] × [B, K, D] → [B, N, K]`.
pub fn cluster_logits<T: Scalar>(g: &mut Graph<T>, f: Var, q: Var) -> Result<Var> {
    let (fs, qs) = (g.shape(f).to_vec(), g.shape(q).to_vec());
    if fs.len() != 3 || qs.len() != 3 || fs[0] != qs[0] || fs[2] != qs[2] {
        return Err(Error::dim(format!(
            "probability map: F {fs:?} and Q {qs:?} must share batch and D"
        )));
    }
    g.bmm(f, q, false, true)
}

/// `P = softmax_K(F·Qᵀ)`, `[B, N, K]`.
pub fn probability_map<T: Scalar>(g: &mut Graph<T>, f: Var, q: Var) -> Result<Var> {
    let l = cluster_logits(g, f, q)?;
    g.softmax(l, 2)
}

/// Bilinear upsampling of a `[B, h·w, K]` map by `FEATURE_STRIDE` to
/// `[B, H·W, K]`.
pub fn upsample_rows<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(format!("upsample_rows: {s:?} is not [B, {h}·{w}, K]")));
    }
    let (b, k) = (s[0], s[2]);
    let t = g.permute(x, &[0, 2, 1])?;
    let mut t = g.reshape(t, &[b, k, h, w])?;
    let mut f = 1;
    while f < FEATURE_STRIDE {
        t = g.upsample2x(t)?;
        f *= 2;
    }
    let (hh, ww) = (h * FEATURE_STRIDE, w * FEATURE_STRIDE);
    let t = g.reshape(t, &[b, k, hh * ww])?;
    g.permute(t, &[0, 2, 1])
}

/// Full-resolution probability map from stride-4 logits `F·Qᵀ`: bilinear
/// upsampling of the logits, then softmax over K.
pub fn upsample_probability_map<T: Scalar>(g: &mut Graph<T>, logits: Var, h: usize, w: usize) -> Result<Var> {
    let up = upsample_rows(g, logits, h, w)?;
    g.softmax(up, 2)
}

/// Per-row argmax over the last axis (lowest index wins ties).
pub fn argmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Class ids from a probability map with `K = C` rows.
pub fn seg_predict<T: Scalar>(p: &[T], k: usize, num_classes: usize) -> Result<Vec<u8>> {
    if k != num_classes {
        return Err(Error::contract(format!(
            "segmentation requires K = C (one query per class), got K={k}, C={num_classes}"
        )));
    }
    if k == 0 || !p.len().is_multiple_of(k) {
        return Err(Error::dim(format!("{} values do not form rows of {k}", p.len())));
    }
    Ok(argmax_rows(p, k).into_iter().map(|c| c as u8).collect())
}

/// Floor added to each bin share before renormalizing, so that widths never
/// underflow and centers stay strictly ordered in floating point.
pub const BIN_WIDTH_FLOOR: f64 = 1e-3;

/// Adaptive bins from per-cluster logits `[B, K]`: shares are
/// `(softmax(logits) + ε) / (1 + Kε)`, widths `share·(d_max − d_min)` and
/// centers `d_min + cumsum(w) − w/2`. Returns `(centers, widths)`.
pub fn bins_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, d_min: f64, d_max: f64) -> Result<(Var, Var)> {
    if !(d_min < d_max) {
        return Err(Error::contract(format!("depth range [{d_min}, {d_max}] is empty")));
    }
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("bin logits must be [B, K], got {s:?}")));
    }
    let p = g.softmax(logits, 1)?;
    let p = g.add_scalar(p, BIN_WIDTH_FLOOR)?;
    let p = g.normalize_sum(p)?;
    let widths = g.scale(p, d_max - d_min)?;
    let cum = g.cumsum(widths)?;
    let half = g.scale(widths, 0.5)?;
    let c = g.sub(cum, half)?;
    let centers = g.add_scalar(c, d_min)?;
    Ok((centers, widths))
}

/// Bin centers `[B, K]` from queries `[B, K, D]` via the two-layer bin MLP.
pub fn depth_bins<T: Scalar>(g: &mut Graph<T>, p: &Bound, q: Var, d_min: f64, d_max: f64) -> Result<(Var, Var)> {
    let s = g.shape(q).to_vec();
    let h = nn::linear(g, p, "head/bin1", q)?;
    let h = g.relu(h)?;
    let l = nn::linear(g, p, "head/bin2", h)?;
    let l = g.reshape(l, &[s[0], s[1]])?;
    bins_from_logits(g, l, d_min, d_max)
}

/// `d(p) = Σ_i P(p, i)·b_i`: `[B, N, K] × [B, K] → [B, N]`.
pub fn depth_compose<T: Scalar>(g: &mut Graph<T>, probs: Var, centers: Var) -> Result<Var> {
    let (ps, bs) = (g.shape(probs).to_vec(), g.shape(centers).to_vec());
    if ps.len() != 3 || bs.len() != 2 || ps[0] != bs[0] || ps[2] != bs[1] {
        return Err(Error::dim(format!("depth_compose: P {ps:?} with bins {bs:?}")));
    }
    let b = g.reshape(centers, &[bs[0], bs[1], 1])?;
    let d = g.bmm(probs, b, false, false)?;
    g.reshape(d, &[ps[0], ps[1]])
}

/// Unit sphere-segment centers `[B, K, 3]` from queries via the normal MLP.
pub fn normal_vectors<T: Scalar>(g: &mut Graph<T>, p: &Bound, q: Var) -> Result<Var> {
    let h = nn::linear(g, p, "head/normal1", q)?;
    let h = g.relu(h)?;
    let v = nn::linear(g, p, "head/normal2", h)?;
    g.l2_normalize(v, NORM_EPS)
}

/// `n(p) = normalize(Σ_i P(p, i)·v_i)`. Returns the unit map and the raw
/// (pre-normalization) combination, both `[B, N, 3]`.
pub fn normal_compose<T: Scalar>(g: &mut Graph<T>, probs: Var, centers: Var) -> Result<(Var, Var)> {
    let (ps, vs) = (g.shape(probs).to_vec(), g.shape(centers).to_vec());
    if ps.len() != 3 || vs.len() != 3 || ps[0] != vs[0] || ps[2] != vs[1] || vs[2] != 3 {
        return Err(Error::dim(format!("normal_compose: P {ps:?} with centers {vs:?}")));
    }
    let raw = g.bmm(probs, centers, false, false)?;
    let unit = g.l2_normalize(raw, NORM_EPS)?;
    Ok((unit, raw))
}

/// Per-pixel regression baseline: 1x1 conv on the stride-4 features,
/// bilinear upsampling to full resolution, then the task's output map.
/// Returns `[B, H·W]` depth, `[B, H·W, 3]` unit normals or `[B, H·W, C]`
/// segmentation logits.
pub fn baseline_head<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    feats: &PixelFeatures,
    task: Task,
    d_min: f64,
    d_max: f64,
) -> Result<Var> {
    let y = nn::conv(g, p, "head/baseline", feats.map, 1)?;
    let s = g.shape(y).to_vec();
    let (b, c) = (s[0], s[1]);
    let flat = g.reshape(y, &[b, c, feats.h * feats.w])?;
    let rows = g.permute(flat, &[0, 2, 1])?;
    let up = upsample_rows(g, rows, feats.h, feats.w)?;
    let n = g.shape(up)[1];
    match task {
        Task::Seg => Ok(up),
        Task::Depth => {
            let d = g.reshape(up, &[b, n])?;
            let d = g.sigmoid(d)?;
            let d = g.scale(d, d_max - d_min)?;
            g.add_scalar(d, d_min)
        }
        Task::Normal => g.l2_normalize(up, NORM_EPS),
    }
}

/// Quantizes a probability to 8 bits.
pub fn quantize_unit(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u16
}

/// Writes one PGM panel per cluster, `probmap_{task}_{k}.pgm`, from a single
/// image's full-resolution map (`H·W` rows of `K`). Rows must sum to one.
pub fn dump_probmaps(dir: &Path, task: Task, probs: &[f64], k: usize, height: usize, width: usize) -> Result<Vec<PathBuf>> {
    if k == 0 || probs.len() != height * width * k {
        return Err(Error::dim(format!(
            "probability map of {} values is not {height}x{width}x{k}",
            probs.len()
        )));
    }
    for (i, row) in probs.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!("probability row {i} sums to {s}")));
        }
    }
    let mut paths = Vec::with_capacity(k);
    for c in 0..k {
        let pixels: Vec<u16> = probs.chunks(k).map(|row| quantize_unit(row[c])).collect();
        let path = dir.join(format!("probmap_{task}_{c}.pgm"));
        persist::write_pgm(&path, width, height, 255, &pixels)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tensor};
    use crate::rng::Rng;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn probability_map_example() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let q = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = probability_map(&mut g, f, q).unwrap();
        let e = 1f64.exp();
        assert!((g.data(p)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.data(p)[0] - 0.7311).abs() < 1e-4);
        assert!((g.data(p)[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn identical_queries_give_uniform_rows() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(t(&[1, 2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let q = g.constant(t(&[1, 3, 2], &[0.2, 0.1, 0.2, 0.1, 0.2, 0.1]));
        let p = probability_map(&mut g, f, q).unwrap();
        assert!(g.data(p).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probability_map_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 4, 3]));
        let q = g.constant(Tensor::zeros(&[1, 2, 5]));
        assert!(matches!(probability_map(&mut g, f, q), Err(Error::Dimension(_))));
    }

    #[test]
    fn seg_predict_rules() {
        assert_eq!(seg_predict(&[0.0, 1.0, 0.0, 0.0], 4, 4).unwrap(), vec![1]);
        assert_eq!(seg_predict(&[0.1, 0.4, 0.1, 0.4], 4, 4).unwrap(), vec![1]);
        assert!(matches!(seg_predict(&[0.5, 0.5], 2, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn bins_equal_logits_example() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        let (c, w) = bins_from_logits(&mut g, l, 0.1, 10.0).unwrap();
        let want = [1.3375, 3.8125, 6.2875, 8.7625];
        for (a, b) in g.data(c).iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(g.data(w).iter().all(|v| (v - 2.475).abs() < 1e-12));
        let l1 = g.constant(t(&[1, 1], &[3.7]));
        let (c1, _) = bins_from_logits(&mut g, l1, 0.1, 10.0).unwrap();
        assert!((g.data(c1)[0] - 5.05).abs() < 1e-12);
    }

    #[test]
    fn bins_reject_empty_range() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 2]));
        assert!(bins_from_logits(&mut g, l, 2.0, 2.0).is_err());
    }

    #[test]
    fn depth_compose_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1, 3, 2], &[1.0, 0.0, 0.5, 0.5, 0.25, 0.75]));
        let b = g.constant(t(&[1, 2], &[2.0, 4.0]));
        let d = depth_compose(&mut g, p, b).unwrap();
        assert_eq!(g.data(d), &[2.0, 3.0, 3.5]);
    }

    #[test]
    fn normal_examples() {
        let mut g = Graph::<f64>::new();
        let raw = g.constant(t(&[1, 1, 3], &[3.0, 0.0, 0.0]));
        let u = g.l2_normalize(raw, NORM_EPS).unwrap();
        assert_eq!(g.data(u), &[1.0, 0.0, 0.0]);

        let p = g.constant(t(&[1, 2, 2], &[0.5, 0.5, 0.5, 0.5]));
        let v = g.constant(t(&[1, 2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let (n, _) = normal_compose(&mut g, p, v).unwrap();
        let h = 0.5f64.sqrt();
        for (a, b) in g.data(n)[..3].iter().zip([h, h, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let anti = g.constant(t(&[1, 2, 3], &[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]));
        let (n, raw) = normal_compose(&mut g, p, anti).unwrap();
        assert!(g.value(n).all_finite());
        assert!(g.data(raw).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn baseline_depth_midpoint_on_zero_weights() {
        use crate::backbone::PixelFeatures;
        let mut p = ParamStore::<f64>::new();
        init_baseline_head(&mut p, &mut Rng::new(0), Task::Depth, 4, 4).unwrap();
        for v in p.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let map = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let flat = g.constant(Tensor::zeros(&[1, 4, 4]));
        let feats = PixelFeatures { map, flat, h: 2, w: 2 };
        let d = baseline_head(&mut g, &b, &feats, Task::Depth, 0.5, 10.0).unwrap();
        assert_eq!(g.shape(d), &[1, 64]);
        assert!(g.data(d).iter().all(|v| (v - 5.25).abs() < 1e-15));
    }

    #[test]
    fn baseline_normals_unit_and_seg_identity() {
        use crate::backbone::PixelFeatures;
        let mut rng = Rng::new(1);
        let mut p = ParamStore::<f64>::new();
        init_baseline_head(&mut p, &mut rng, Task::Normal, 4, 4).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let vals: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let map = g.constant(t(&[1, 4, 2, 2], &vals));
        let flat = g.constant(Tensor::zeros(&[1, 4, 4]));
        let feats = PixelFeatures { map, flat, h: 2, w: 2 };
        let n = baseline_head(&mut g, &b, &feats, Task::Normal, 0.5, 10.0).unwrap();
        for v in g.data(n).chunks(3) {
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
        }

        // Identity weights on one-hot features recover the hot class.
        let mut p = ParamStore::<f64>::new();
        init_baseline_head(&mut p, &mut rng, Task::Seg, 4, 4).unwrap();
        {
            let w = p.get_mut("head/baseline/w").unwrap();
            w.data_mut().iter_mut().for_each(|x| *x = 0.0);
            for c in 0..4 {
                w.data_mut()[c * 4 + c] = 1.0;
            }
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        // Features hot in class (pixel index) at the four stride-4 cells.
        let mut one_hot = vec![0.0; 16];
        for px in 0..4 {
            one_hot[px * 4 + px] = 1.0;
        }
        let map = g.constant(t(&[1, 4, 2, 2], &one_hot));
        let flat = g.constant(Tensor::zeros(&[1, 4, 4]));
        let feats = PixelFeatures { map, flat, h: 2, w: 2 };
        let logits = baseline_head(&mut g, &b, &feats, Task::Seg, 0.5, 10.0).unwrap();
        let pred = argmax_rows(g.data(logits), 4);
        // Corners of the 8x8 output sit nearest their own cell.
        assert_eq!([pred[0], pred[7], pred[56], pred[63]], [0, 1, 2, 3]);
    }

    #[test]
    fn upsampled_rows_stay_normalized() {
        let mut rng = Rng::new(3);
        let mut g = Graph::<f64>::new();
        let f = g.constant(t(&[2, 4, 3], &(0..24).map(|_| rng.normal()).collect::<Vec<_>>()));
        let q = g.constant(t(&[2, 5, 3], &(0..30).map(|_| rng.normal()).collect::<Vec<_>>()));
        let l = cluster_logits(&mut g, f, q).unwrap();
        let up = upsample_probability_map(&mut g, l, 2, 2).unwrap();
        assert_eq!(g.shape(up), &[2, 64, 5]);
        for row in g.data(up).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn gradcheck_bins_and_compose() {
        let mut rng = Rng::new(5);
        let logits = t(&[2, 3], &(0..6).map(|_| rng.normal()).collect::<Vec<_>>());
        let probs = t(&[2, 4, 3], &(0..24).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<_>>());
        let err = gradcheck(
            |g, l| {
                let (c, _) = bins_from_logits(g, l, 0.5, 10.0)?;
                let p = g.constant(probs.clone());
                let d = depth_compose(g, p, c)?;
                let d = g.square(d)?;
                g.sum(d, None)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn dump_writes_complementary_panels() {
        let dir = tempfile::tempdir().unwrap();
        let probs: Vec<f64> = (0..16).flat_map(|i| {
            let a = i as f64 / 15.0;
            [a * 0.5, 0.5 - a * 0.5, 0.5]
        }).collect();
        let paths = dump_probmaps(dir.path(), Task::Depth, &probs, 3, 4, 4).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("probmap_depth_2.pgm"));
        let panels: Vec<_> = paths.iter().map(|p| persist::read_netpbm(p).unwrap()).collect();
        for px in 0..16 {
            let s: i32 = panels.iter().map(|p| p.data[px] as i32).sum();
            assert!((s - 255).abs() <= 2, "pixel {px}: {s}");
        }
        let bad = vec![0.2; 48];
        assert!(dump_probmaps(dir.path(), Task::Depth, &bad, 3, 4, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bins_ordered_and_contained(logits in prop::collection::vec(-8.0f64..8.0, 1..12), shift in -5.0f64..5.0) {
            let k = logits.len();
            let mut g = Graph::<f64>::new();
            let l = g.constant(t(&[1, k], &logits));
            let (c, w) = bins_from_logits(&mut g, l, 0.5, 10.0).unwrap();
            let c = g.data(c).to_vec();
            prop_assert!((g.data(w).iter().sum::<f64>() - 9.5).abs() < 1e-9);
            prop_assert!(c.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(c.iter().all(|&v| v > 0.5 && v < 10.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let l2 = g.constant(t(&[1, k], &shifted));
            let (c2, _) = bins_from_logits(&mut g, l2, 0.5, 10.0).unwrap();
            for (a, b) in c.iter().zip(g.data(c2)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn seg_argmax_invariant_under_monotone_maps(vals in prop::collection::vec(-5.0f64..5.0, 8)) {
            let base = seg_predict(&vals, 4, 4).unwrap();
            let cubed: Vec<f64> = vals.iter().map(|v| v * v * v + 2.0 * v).collect();
            let expd: Vec<f64> = vals.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(&seg_predict(&cubed, 4, 4).unwrap(), &base);
            prop_assert_eq!(&seg_predict(&expd, 4, 4).unwrap(), &base);
        }
    }
}
