//! Training losses. Depth and normal losses average over valid pixels;
//! SILog is computed per image and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Task;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub silog_lambda: f64,
    pub charbonnier_eps: f64,
    pub grad_scales: usize,
    pub w_silog: f64,
    pub w_rel_sq: f64,
    pub w_grad: f64,
    /// Off by default; the robust term for outlier-heavy depth data.
    pub w_charbonnier: f64,
    pub w_seg: f64,
    pub w_normal: f64,
    pub ignore_label: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            silog_lambda: 0.5,
            charbonnier_eps: 1e-3,
            grad_scales: 4,
            w_silog: 1.0,
            w_rel_sq: 1.0,
            w_grad: 1.0,
            w_charbonnier: 0.0,
            w_seg: 1.0,
            w_normal: 1.0,
            ignore_label: 255,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.silog_lambda) {
            return Err(Error::contract(format!("silog lambda {} outside [0, 1]", self.silog_lambda)));
        }
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::contract("charbonnier epsilon must be positive"));
        }
        if self.grad_scales == 0 {
            return Err(Error::contract("gradient loss needs at least one scale"));
        }
        Ok(())
    }
}

/// Ground truth for a batch of `B` images of `height × width`, flattened
/// row-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub depth: Vec<f64>,
    /// `[B·H·W·3]`.
    pub normal: Vec<f64>,
    /// Pixels with valid depth / normal ground truth.
    pub valid: Vec<bool>,
}

impl Targets {
    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::dim(format!("{what}: {got} values, expected {want}")));
    }
    Ok(())
}

fn constant<T: Scalar>(g: &mut Graph<T>, shape: &[usize], data: impl Iterator<Item = f64>) -> Result<Var> {
    let data: Vec<T> = data.map(T::of).collect();
    Ok(g.constant(Tensor::new(shape.to_vec(), data)?))
}

/// Σ x·m / Σ m over a boolean mask, as a scalar node.
fn masked_mean<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool], what: &str) -> Result<Var> {
    check_len(what, g.value(x).len(), mask.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::contract(format!("{what}: mask selects no pixels")));
    }
    let inv = 1.0 / n as f64;
    let shape = g.shape(x).to_vec();
    let w = constant(g, &shape, mask.iter().map(|&m| if m { inv } else { 0.0 }))?;
    let y = g.mul(x, w)?;
    g.sum(y, None)
}

/// `ln pred − ln gt` with masked ground truth replaced by 1.
fn log_residual<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    check_len("depth prediction", g.value(pred).len(), gt.len())?;
    check_len("depth mask", mask.len(), gt.len())?;
    let shape = g.shape(pred).to_vec();
    let lg = constant(
        g,
        &shape,
        gt.iter().zip(mask).map(|(&d, &m)| if m { d.ln() } else { 0.0 }),
    )?;
    let lp = g.log(pred)?;
    g.sub(lp, lg)
}

/// Scale-invariant log error per image, `mean(g²) − λ·mean(g)²`, averaged
/// over the images that have valid pixels. `pred` is `[B, N]`.
pub fn silog<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64], mask: &[bool], lambda: f64) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("silog expects [B, N] predictions, got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let r = log_residual(g, pred, gt, mask)?;
    let counts: Vec<usize> = mask.chunks(n).map(|c| c.iter().filter(|&&m| m).count()).collect();
    let images = counts.iter().filter(|&&c| c > 0).count();
    if images == 0 {
        return Err(Error::contract("silog: mask selects no pixels"));
    }
    let w = constant(
        g,
        &shape,
        mask.iter().enumerate().map(|(i, &m)| if m { 1.0 / counts[i / n] as f64 } else { 0.0 }),
    )?;
    let rw = g.mul(r, w)?;
    let mean_g = g.sum(rw, Some(1))?;
    let r2 = g.square(r)?;
    let r2w = g.mul(r2, w)?;
    let mean_g2 = g.sum(r2w, Some(1))?;
    let m2 = g.square(mean_g)?;
    let m2 = g.scale(m2, lambda)?;
    let per_image = g.sub(mean_g2, m2)?;
    let iw = constant(g, &[b], counts.iter().map(|&c| if c > 0 { 1.0 / images as f64 } else { 0.0 }))?;
    let y = g.mul(per_image, iw)?;
    g.sum(y, None)
}

/// `mean(((pred − gt) / gt)²)` over valid pixels.
pub fn rel_sq<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    check_len("depth prediction", g.value(pred).len(), gt.len())?;
    let shape = g.shape(pred).to_vec();
    let gt_c = constant(g, &shape, gt.iter().copied())?;
    let inv = constant(g, &shape, gt.iter().zip(mask).map(|(&d, &m)| if m { 1.0 / d } else { 0.0 }))?;
    let diff = g.sub(pred, gt_c)?;
    let rel = g.mul(diff, inv)?;
    let sq = g.square(rel)?;
    masked_mean(g, sq, mask, "rel_sq")
}

/// 2x2 "all valid" pooling of a `[B, H, W]` mask (odd edges dropped).
fn pool_mask(mask: &[bool], b: usize, h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * oh * ow);
    for bi in 0..b {
        let m = &mask[bi * h * w..(bi + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let at = |r: usize, c: usize| m[r * w + c];
                out.push(at(2 * i, 2 * j) && at(2 * i, 2 * j + 1) && at(2 * i + 1, 2 * j) && at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    out
}

/// Mean absolute forward difference of `x: [B, H, W]` over pairs whose both
/// ends are valid; `None` when no pair is valid.
fn masked_abs_diff<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool], b: usize, h: usize, w: usize, along_x: bool) -> Result<Option<Var>> {
    let (oh, ow) = if along_x { (h, w.saturating_sub(1)) } else { (h.saturating_sub(1), w) };
    if oh == 0 || ow == 0 {
        return Ok(None);
    }
    let mut pair = Vec::with_capacity(b * oh * ow);
    for bi in 0..b {
        let m = &mask[bi * h * w..(bi + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let other = if along_x { m[i * w + j + 1] } else { m[(i + 1) * w + j] };
                pair.push(m[i * w + j] && other);
            }
        }
    }
    if !pair.iter().any(|&p| p) {
        return Ok(None);
    }
    let d = g.diff(x, along_x)?;
    let a = g.abs(d)?;
    masked_mean(g, a, &pair, "gradient loss").map(Some)
}

/// Multi-scale gradient matching on the log residual `R = ln pred − ln gt`:
/// `Σ_s mean|∂x R⁽ˢ⁾| + mean|∂y R⁽ˢ⁾|` with `R⁽ˢ⁾` average-pooled `2ˢ` times.
/// A pooled cell is valid only if all its constituents are valid.
pub fn multiscale_grad<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: &[f64],
    mask: &[bool],
    height: usize,
    width: usize,
    scales: usize,
) -> Result<Var> {
    let len = g.value(pred).len();
    if height == 0 || width == 0 || !len.is_multiple_of(height * width) {
        return Err(Error::dim(format!("gradient loss: {len} values for {height}x{width} maps")));
    }
    let b = len / (height * width);
    let r = log_residual(g, pred, gt, mask)?;
    let mut r = g.reshape(r, &[b, height, width])?;
    let mut m = mask.to_vec();
    let (mut h, mut w) = (height, width);
    let mut total: Option<Var> = None;
    for s in 0..scales {
        if s > 0 {
            if h < 2 || w < 2 {
                break;
            }
            r = g.avg_pool2x(r)?;
            m = pool_mask(&m, b, h, w);
            h /= 2;
            w /= 2;
        }
        for along_x in [true, false] {
            if let Some(t) = masked_abs_diff(g, r, &m, b, h, w, along_x)? {
                total = Some(match total {
                    Some(acc) => g.add(acc, t)?,
                    None => t,
                });
            }
        }
    }
    match total {
        Some(t) => Ok(t),
        None => {
            // No valid neighbor pairs anywhere: zero, still attached to `pred`.
            let z = g.scale(pred, 0.0)?;
            g.sum(z, None)
        }
    }
}

/// `mean(√((pred − gt)² + ε²) − ε)` over valid pixels.
pub fn charbonnier<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64], mask: &[bool], eps: f64) -> Result<Var> {
    check_len("depth prediction", g.value(pred).len(), gt.len())?;
    let shape = g.shape(pred).to_vec();
    let gt_c = constant(g, &shape, gt.iter().copied())?;
    let d = g.sub(pred, gt_c)?;
    let d2 = g.square(d)?;
    let d2 = g.add_scalar(d2, eps * eps)?;
    let r = g.sqrt(d2)?;
    let r = g.add_scalar(r, -eps)?;
    masked_mean(g, r, mask, "charbonnier")
}

/// `mean ‖pred − gt‖²` over valid pixels; `pred` is `[B, N, 3]`.
pub fn normal_l2<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.last() != Some(&3) {
        return Err(Error::dim(format!("normal loss expects [..., 3], got {shape:?}")));
    }
    check_len("normal ground truth", gt.len(), g.value(pred).len())?;
    let gt_c = constant(g, &shape, gt.iter().copied())?;
    let d = g.sub(pred, gt_c)?;
    let d2 = g.square(d)?;
    let s = g.sum(d2, Some(shape.len() - 1))?;
    masked_mean(g, s, mask, "normal_l2")
}

/// Mean over non-ignored pixels of `−ln softmax(logits)[label]`;
/// `logits` is `[..., C]`.
pub fn seg_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let c = *shape.last().ok_or_else(|| Error::dim("cross entropy of a scalar"))?;
    check_len("labels", labels.len(), g.value(logits).len() / c)?;
    let mut idx = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for &l in labels {
        if l == ignore {
            idx.push(0);
            mask.push(false);
        } else if (l as usize) < c {
            idx.push(l as usize);
            mask.push(true);
        } else {
            return Err(Error::contract(format!("label {l} outside {c} classes")));
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("cross entropy: every pixel carries the ignore label"));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, &idx)?;
    let m = masked_mean(g, picked, &mask, "cross entropy")?;
    g.scale(m, -1.0)
}

/// Weighted total and its named terms.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

/// Task loss on the head output: segmentation logits `[B, N, C]`, depth
/// `[B, N]` or normals `[B, N, 3]`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, task: Task, pred: Var, t: &Targets, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let mut terms: Vec<(&'static str, Var, f64)> = Vec::new();
    match task {
        Task::Seg => {
            let ce = seg_cross_entropy(g, pred, &t.labels, cfg.ignore_label)?;
            terms.push(("ce", ce, cfg.w_seg));
        }
        Task::Depth => {
            if cfg.w_silog != 0.0 {
                let v = silog(g, pred, &t.depth, &t.valid, cfg.silog_lambda)?;
                terms.push(("silog", v, cfg.w_silog));
            }
            if cfg.w_rel_sq != 0.0 {
                let v = rel_sq(g, pred, &t.depth, &t.valid)?;
                terms.push(("rel_sq", v, cfg.w_rel_sq));
            }
            if cfg.w_grad != 0.0 {
                let v = multiscale_grad(g, pred, &t.depth, &t.valid, t.height, t.width, cfg.grad_scales)?;
                terms.push(("grad", v, cfg.w_grad));
            }
            if cfg.w_charbonnier != 0.0 {
                let v = charbonnier(g, pred, &t.depth, &t.valid, cfg.charbonnier_eps)?;
                terms.push(("charbonnier", v, cfg.w_charbonnier));
            }
        }
        Task::Normal => {
            let v = normal_l2(g, pred, &t.normal, &t.valid)?;
            terms.push(("normal_l2", v, cfg.w_normal));
        }
    }
    let mut total: Option<Var> = None;
    for &(_, v, w) in &terms {
        let s = g.scale(v, w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::contract("every loss term has zero weight"))?;
    Ok(LossTerms {
        total,
        terms: terms.into_iter().map(|(n, v, _)| (n, v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck;

    fn var(g: &mut Graph<f64>, shape: &[usize], d: &[f64]) -> Var {
        g.constant(Tensor::from_f64(shape, d).unwrap())
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    fn positive(n: usize, seed: u64) -> Vec<f64> {
        let mut r = Rng::new(seed);
        (0..n).map(|_| r.uniform(0.5, 5.0)).collect()
    }

    #[test]
    fn silog_examples() {
        let gt = positive(8, 1);
        let mask = vec![true; 8];
        let twice: Vec<f64> = gt.iter().map(|v| 2.0 * v).collect();
        let run = |p: &[f64], l: f64| eval(|g| {
            let x = var(g, &[2, 4], p);
            silog(g, x, &gt, &mask, l).unwrap()
        });
        assert_eq!(run(&gt, 0.5), 0.0);
        assert!(run(&twice, 1.0).abs() < 1e-15);
        let want = 0.5 * 2f64.ln().powi(2);
        assert!((run(&twice, 0.5) - want).abs() < 1e-12);
        assert!((want - 0.24023).abs() < 1e-5);
    }

    #[test]
    fn silog_empty_mask_errors() {
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, &[1, 2], &[1.0, 2.0]);
        assert!(matches!(silog(&mut g, x, &[1.0, 1.0], &[false, false], 0.5), Err(Error::Contract(_))));
        assert!(matches!(rel_sq(&mut g, x, &[1.0, 1.0], &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn silog_ignores_masked_pixels() {
        let a = eval(|g| {
            let x = var(g, &[1, 3], &[1.0, 2.0, 50.0]);
            silog(g, x, &[1.5, 2.5, 1.0], &[true, true, false], 0.5).unwrap()
        });
        let b = eval(|g| {
            let x = var(g, &[1, 2], &[1.0, 2.0]);
            silog(g, x, &[1.5, 2.5], &[true, true], 0.5).unwrap()
        });
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn rel_sq_examples() {
        let v = eval(|g| {
            let x = var(g, &[1, 1], &[1.1]);
            rel_sq(g, x, &[1.0], &[true]).unwrap()
        });
        assert!((v - 0.01).abs() < 1e-12);
        let gt = positive(6, 2);
        let p = positive(6, 3);
        let base = eval(|g| {
            let x = var(g, &[1, 6], &p);
            rel_sq(g, x, &gt, &[true; 6]).unwrap()
        });
        let s: Vec<f64> = p.iter().map(|v| v * 3.5).collect();
        let gs: Vec<f64> = gt.iter().map(|v| v * 3.5).collect();
        let scaled = eval(|g| {
            let x = var(g, &[1, 6], &s);
            rel_sq(g, x, &gs, &[true; 6]).unwrap()
        });
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn grad_loss_examples() {
        let gt = positive(64, 4);
        let mask = vec![true; 64];
        let run = |p: &[f64], scales| eval(|g| {
            let x = var(g, &[1, 64], p);
            multiscale_grad(g, x, &gt, &mask, 8, 8, scales).unwrap()
        });
        assert_eq!(run(&gt, 4), 0.0);
        let scaled: Vec<f64> = gt.iter().map(|v| v * 1.7).collect();
        assert!(run(&scaled, 4).abs() < 1e-12);
        // R = c·x ramp: pred = gt·exp(c·col).
        let c = 0.3;
        let ramp: Vec<f64> = gt.iter().enumerate().map(|(i, v)| v * (c * (i % 8) as f64).exp()).collect();
        assert!((run(&ramp, 1) - c).abs() < 1e-12);
    }

    #[test]
    fn grad_loss_mask_rules() {
        let mut mask = vec![true; 16];
        mask[5] = false;
        assert_eq!(pool_mask(&mask, 1, 4, 4), vec![false, true, true, true]);
        // Degenerate maps contribute zero rather than failing.
        let v = eval(|g| {
            let x = var(g, &[1, 4], &[1.0, 2.0, 3.0, 4.0]);
            multiscale_grad(g, x, &[1.0; 4], &[true, false, false, true], 2, 2, 3).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn charbonnier_examples() {
        let e = 1e-3;
        let run = |p: f64, t: f64| eval(|g| {
            let x = var(g, &[1], &[p]);
            charbonnier(g, x, &[t], &[true], e).unwrap()
        });
        assert_eq!(run(2.0, 2.0), 0.0);
        assert!((run(1.0 + e, 1.0) - (2f64.sqrt() - 1.0) * e).abs() < 1e-12);
        assert!((run(4.0, 1.0) - ((9.0f64 + 1e-6).sqrt() - 1e-3)).abs() < 1e-12);
        assert!((run(4.0, 1.0) - 2.99900).abs() < 1e-5);
    }

    #[test]
    fn normal_l2_examples() {
        let run = |p: [f64; 3], t: [f64; 3]| eval(|g| {
            let x = var(g, &[1, 1, 3], &p);
            normal_l2(g, x, &t, &[true]).unwrap()
        });
        assert_eq!(run([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]), 0.0);
        assert!((run([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert!((run([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = eval(|g| {
            let x = var(g, &[1, 4], &[0.0, 100.0, 0.0, 0.0]);
            seg_cross_entropy(g, x, &[1], 255).unwrap()
        });
        assert!(v < 1e-40);
        let v = eval(|g| {
            let x = var(g, &[2, 4], &[0.3; 8]);
            seg_cross_entropy(g, x, &[0, 3], 255).unwrap()
        });
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, &[2, 4], &[0.0; 8]);
        assert!(matches!(seg_cross_entropy(&mut g, x, &[255, 255], 255), Err(Error::Contract(_))));
        assert!(seg_cross_entropy(&mut g, x, &[7, 0], 255).is_err());
        // Ignored pixels do not contribute.
        let a = eval(|g| {
            let x = var(g, &[2, 2], &[1.0, 0.0, 5.0, -5.0]);
            seg_cross_entropy(g, x, &[0, 255], 255).unwrap()
        });
        let b = eval(|g| {
            let x = var(g, &[1, 2], &[1.0, 0.0]);
            seg_cross_entropy(g, x, &[0], 255).unwrap()
        });
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn depth_breakdown_sums_to_total() {
        let gt = positive(2 * 64, 5);
        let p = positive(2 * 64, 6);
        let t = Targets {
            batch: 2,
            height: 8,
            width: 8,
            labels: vec![0; 128],
            depth: gt,
            normal: vec![0.0; 384],
            valid: vec![true; 128],
        };
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, &[2, 64], &p);
        let cfg = LossConfig::default();
        let l = total_loss(&mut g, Task::Depth, x, &t, &cfg).unwrap();
        let names: Vec<_> = l.terms.iter().map(|t| t.0).collect();
        assert_eq!(names, ["silog", "rel_sq", "grad"]);
        let s: f64 = l.terms.iter().map(|t| g.value(t.1).item()).sum();
        assert!((s - g.value(l.total).item()).abs() < 1e-12);
        let perfect = var(&mut g, &[2, 64], &t.depth.clone());
        let l = total_loss(&mut g, Task::Depth, perfect, &t, &cfg).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
    }

    #[test]
    fn gradchecks() {
        let gt = positive(2 * 64, 7);
        let mut mask = vec![true; 128];
        mask[3] = false;
        mask[70] = false;
        let p = Tensor::from_f64(&[2, 64], &positive(128, 8)).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>)> = vec![
            ("silog", Box::new(|g, x| silog(g, x, &gt, &mask, 0.5))),
            ("rel_sq", Box::new(|g, x| rel_sq(g, x, &gt, &mask))),
            ("grad", Box::new(|g, x| multiscale_grad(g, x, &gt, &mask, 8, 8, 3))),
            ("charbonnier", Box::new(|g, x| charbonnier(g, x, &gt, &mask, 1e-3))),
        ];
        for (name, f) in cases {
            let err = gradcheck(|g, x| f(g, x), &p, 1e-6).unwrap();
            assert!(err < 1e-5, "{name}: {err}");
        }
        let mut r = Rng::new(9);
        let n = Tensor::from_f64(&[1, 5, 3], &(0..15).map(|_| r.normal()).collect::<Vec<_>>()).unwrap();
        let ngt: Vec<f64> = (0..15).map(|_| r.normal()).collect();
        let err = gradcheck(|g, x| normal_l2(g, x, &ngt, &[true, false, true, true, true]), &n, 1e-6).unwrap();
        assert!(err < 1e-5, "normal_l2: {err}");
        let logits = Tensor::from_f64(&[1, 5, 4], &(0..20).map(|_| r.normal()).collect::<Vec<_>>()).unwrap();
        let err = gradcheck(|g, x| seg_cross_entropy(g, x, &[0, 3, 255, 1, 2], 255), &logits, 1e-6).unwrap();
        assert!(err < 1e-5, "ce: {err}");
    }
}
