//! Pixel encoder-decoder producing per-pixel embeddings `F`, and the
//! transformer decoder that refines learned queries into cluster centers `Q`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Output stride of the pixel features relative to the input.
pub const FEATURE_STRIDE: usize = 4;
/// Input sides must be multiples of this (the bottleneck runs at stride 8).
pub const INPUT_MULTIPLE: usize = 8;
/// Standard deviation of the learned query table.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    /// Hard argmax assignment of pixels to queries; queries read the mean of
    /// their assigned pixel values.
    Kmeans,
    /// Softmax over pixels of scaled query-key products.
    Standard,
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attention::Kmeans => "kmeans",
            Attention::Standard => "standard",
        })
    }
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Attention::Kmeans),
            "standard" => Ok(Attention::Standard),
            _ => Err(Error::contract(format!("unknown attention variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of the stem and the two residual stages.
    pub widths: [usize; 3],
    /// Embedding dimension `D` shared by pixels and queries.
    pub d: usize,
    pub n_dec: usize,
    pub attention: Attention,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [32, 64, 64],
            d: 64,
            n_dec: 2,
            attention: Attention::Kmeans,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.d == 0 {
            return Err(Error::contract(format!(
                "widths {:?} and D {} must be positive",
                self.widths, self.d
            )));
        }
        if self.n_dec == 0 {
            return Err(Error::contract("at least one transformer decoder block is required"));
        }
        Ok(())
    }
}

/// Pixel-encoder parameters, all under `backbone/`.
pub fn init_pixel_params<T: Scalar>(p: &mut ParamStore<T>, rng: &mut Rng, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let [w0, w1, w2] = cfg.widths;
    nn::init_conv(p, rng, "backbone/stem", 3, w0, 3)?;
    init_res_block(p, rng, "backbone/stage1", w0, w1)?;
    init_res_block(p, rng, "backbone/stage2", w1, w2)?;
    nn::init_conv(p, rng, "backbone/skip", w1, w2, 1)?;
    nn::init_conv(p, rng, "backbone/fuse", w2, w2, 3)?;
    nn::init_conv(p, rng, "backbone/proj", w2, cfg.d, 1)
}

fn init_res_block<T: Scalar>(p: &mut ParamStore<T>, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Result<()> {
    nn::init_conv(p, rng, &format!("{name}/conv1"), cin, cout, 3)?;
    nn::init_conv(p, rng, &format!("{name}/conv2"), cout, cout, 3)?;
    nn::init_conv(p, rng, &format!("{name}/short"), cin, cout, 1)
}

/// Query table and transformer decoder parameters for `k` clusters.
pub fn init_decoder_params<T: Scalar>(
    p: &mut ParamStore<T>,
    rng: &mut Rng,
    cfg: &BackboneConfig,
    k: usize,
) -> Result<()> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let d = cfg.d;
    nn::init_embedding(p, rng, "queries", k, d, QUERY_INIT_STD)?;
    for i in 0..cfg.n_dec {
        let b = format!("decoder{i}");
        if cfg.attention == Attention::Standard {
            nn::init_linear(p, rng, &format!("{b}/cross_q"), d, d)?;
            nn::init_linear(p, rng, &format!("{b}/cross_k"), d, d)?;
        }
        nn::init_linear(p, rng, &format!("{b}/cross_v"), d, d)?;
        nn::init_linear(p, rng, &format!("{b}/cross_o"), d, d)?;
        nn::init_layer_norm(p, &format!("{b}/cross_ln"), d)?;
        for w in ["self_q", "self_k", "self_v", "self_o"] {
            nn::init_linear(p, rng, &format!("{b}/{w}"), d, d)?;
        }
        nn::init_layer_norm(p, &format!("{b}/self_ln"), d)?;
        nn::init_linear(p, rng, &format!("{b}/ffn1"), d, 2 * d)?;
        nn::init_linear(p, rng, &format!("{b}/ffn2"), 2 * d, d)?;
        nn::init_layer_norm(p, &format!("{b}/ffn_ln"), d)?;
    }
    Ok(())
}

/// Per-pixel embeddings at stride 4.
#[derive(Debug, Clone, Copy)]
pub struct PixelFeatures {
    /// `[B, D, h, w]`.
    pub map: Var,
    /// `[B, h·w, D]`.
    pub flat: Var,
    pub h: usize,
    pub w: usize,
}

pub fn check_input_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::contract(format!("expected a [B, 3, H, W] image, got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::contract(format!(
            "image sides must be multiples of {INPUT_MULTIPLE}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Stem (stride 2), residual stages (stride 4, stride 8), one bilinear
/// upsampling stage fused with the stride-4 skip, and a 1x1 projection to D.
pub fn encode_pixels<T: Scalar>(g: &mut Graph<T>, p: &Bound, image: Var, cfg: &BackboneConfig) -> Result<PixelFeatures> {
    check_input_shape(g.shape(image))?;
    let x = g.add_scalar(image, -0.5)?;
    let x = nn::conv(g, p, "backbone/stem", x, 2)?;
    let x = g.relu(x)?;
    let s4 = res_block(g, p, "backbone/stage1", x, 2)?;
    let s8 = res_block(g, p, "backbone/stage2", s4, 2)?;
    let up = g.upsample2x(s8)?;
    let skip = nn::conv(g, p, "backbone/skip", s4, 1)?;
    let x = g.add(up, skip)?;
    let x = nn::conv(g, p, "backbone/fuse", x, 1)?;
    let x = g.relu(x)?;
    let map = nn::conv(g, p, "backbone/proj", x, 1)?;
    let s = g.shape(map).to_vec();
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d != cfg.d {
        return Err(Error::contract(format!("projection yields D={d}, config says {}", cfg.d)));
    }
    let flat = g.reshape(map, &[b, d, h * w])?;
    let flat = g.permute(flat, &[0, 2, 1])?;
    Ok(PixelFeatures { map, flat, h, w })
}

fn res_block<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let a = nn::conv(g, p, &format!("{name}/conv1"), x, stride)?;
    let a = g.relu(a)?;
    let a = nn::conv(g, p, &format!("{name}/conv2"), a, 1)?;
    let s = nn::conv(g, p, &format!("{name}/short"), x, stride)?;
    let y = g.add(a, s)?;
    g.relu(y)
}

/// Hard assignment of every pixel to `argmax_k f·q_k` (lowest index on
/// ties). Returns `[B, N]` cluster ids.
pub fn assign_pixels<T: Scalar>(f: &[T], q: &[T], b: usize, n: usize, k: usize, d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * n);
    for bi in 0..b {
        for pi in 0..n {
            let fp = &f[(bi * n + pi) * d..(bi * n + pi + 1) * d];
            let mut best = 0;
            let mut best_v = T::neg_infinity();
            for ki in 0..k {
                let qk = &q[(bi * k + ki) * d..(bi * k + ki + 1) * d];
                let v = fp.iter().zip(qk).fold(T::zero(), |s, (&a, &c)| s + a * c);
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Mean of `values` (`[B, N, D]`) over the pixels assigned to each query
/// under `argmax_k F·Qᵀ`. The assignment is a constant of the graph. Returns
/// the `[B, K, D]` read and, per `(b, k)`, whether the cluster is non-empty.
pub fn kmeans_read<T: Scalar>(g: &mut Graph<T>, f: Var, q: Var, values: Var) -> Result<(Var, Vec<bool>)> {
    let fs = g.shape(f).to_vec();
    let qs = g.shape(q).to_vec();
    if fs.len() != 3 || qs.len() != 3 || fs[0] != qs[0] || fs[2] != qs[2] {
        return Err(Error::dim(format!("kmeans_read: F {fs:?} vs Q {qs:?}")));
    }
    let (b, n, d, k) = (fs[0], fs[1], fs[2], qs[1]);
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let assign = assign_pixels(g.data(f), g.data(q), b, n, k, d);
    let mut counts = vec![0usize; b * k];
    for bi in 0..b {
        for &a in &assign[bi * n..(bi + 1) * n] {
            counts[bi * k + a] += 1;
        }
    }
    let mut m = vec![T::zero(); b * k * n];
    for bi in 0..b {
        for pi in 0..n {
            let a = assign[bi * n + pi];
            m[(bi * k + a) * n + pi] = T::one() / T::of(counts[bi * k + a] as f64);
        }
    }
    let m = g.constant(Tensor::new(vec![b, k, n], m)?);
    let read = g.bmm(m, values, false, false)?;
    Ok((read, counts.iter().map(|&c| c > 0).collect()))
}

/// Cross-attention stage of block `index`: queries read the pixels, then
/// residual + LayerNorm. Under kmeans, queries whose cluster is empty are
/// returned unchanged.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    index: usize,
    q: Var,
    f: Var,
    attention: Attention,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let fs = g.shape(f).to_vec();
    if qs.len() != 3 || fs.len() != 3 || qs[0] != fs[0] || qs[2] != fs[2] {
        return Err(Error::dim(format!("decoder block: Q {qs:?} vs F {fs:?}")));
    }
    if qs[1] == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    let (b, k, d) = (qs[0], qs[1], qs[2]);
    let name = |s: &str| format!("decoder{index}/{s}");
    let v = nn::linear(g, p, &name("cross_v"), f)?;
    match attention {
        Attention::Standard => {
            let qq = nn::linear(g, p, &name("cross_q"), q)?;
            let kk = nn::linear(g, p, &name("cross_k"), f)?;
            let s = g.bmm(qq, kk, false, true)?;
            let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
            let a = g.softmax(s, 2)?;
            let o = g.bmm(a, v, false, false)?;
            let o = nn::linear(g, p, &name("cross_o"), o)?;
            let r = g.add(q, o)?;
            nn::layer_norm(g, p, &name("cross_ln"), r)
        }
        Attention::Kmeans => {
            let (read, nonempty) = kmeans_read(g, f, q, v)?;
            let o = nn::linear(g, p, &name("cross_o"), read)?;
            let r = g.add(q, o)?;
            let updated = nn::layer_norm(g, p, &name("cross_ln"), r)?;
            if nonempty.iter().all(|&x| x) {
                return Ok(updated);
            }
            // q + m·(updated − q) with m = 0 on empty clusters.
            let mut mask = Vec::with_capacity(b * k * d);
            for &ne in &nonempty {
                let v = if ne { T::one() } else { T::zero() };
                mask.extend(std::iter::repeat_n(v, d));
            }
            let m = g.constant(Tensor::new(vec![b, k, d], mask)?);
            let delta = g.sub(updated, q)?;
            let delta = g.mul(delta, m)?;
            g.add(q, delta)
        }
    }
}

/// One post-norm block: cross-attention (queries read pixels), self-attention
/// over queries, and a GELU feed-forward, each with residual + LayerNorm.
pub fn decoder_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    index: usize,
    q: Var,
    f: Var,
    attention: Attention,
) -> Result<Var> {
    let q1 = cross_attention(g, p, index, q, f, attention)?;
    let d = g.shape(q1)[2];
    let name = |s: &str| format!("decoder{index}/{s}");
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let sq = nn::linear(g, p, &name("self_q"), q1)?;
    let sk = nn::linear(g, p, &name("self_k"), q1)?;
    let sv = nn::linear(g, p, &name("self_v"), q1)?;
    let s = g.bmm(sq, sk, false, true)?;
    let s = g.scale(s, inv_sqrt_d)?;
    let a = g.softmax(s, 2)?;
    let o = g.bmm(a, sv, false, false)?;
    let o = nn::linear(g, p, &name("self_o"), o)?;
    let r = g.add(q1, o)?;
    let q2 = nn::layer_norm(g, p, &name("self_ln"), r)?;

    let h = nn::linear(g, p, &name("ffn1"), q2)?;
    let h = g.gelu(h)?;
    let o = nn::linear(g, p, &name("ffn2"), h)?;
    let r = g.add(q2, o)?;
    nn::layer_norm(g, p, &name("ffn_ln"), r)
}

/// Initial `[B, K, D]` queries from the learned table.
pub fn initial_queries<T: Scalar>(g: &mut Graph<T>, p: &Bound, batch: usize) -> Result<Var> {
    let table = p.var("queries")?;
    g.expand(table, batch)
}

/// Pixel features and final cluster centers `[B, K, D]`.
pub fn run_backbone<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    image: Var,
    cfg: &BackboneConfig,
) -> Result<(PixelFeatures, Var)> {
    let feats = encode_pixels(g, p, image, cfg)?;
    let batch = g.shape(image)[0];
    let mut q = initial_queries(g, p, batch)?;
    for i in 0..cfg.n_dec {
        q = decoder_block(g, p, i, q, feats.flat, cfg.attention)?;
    }
    Ok((feats, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck_many;

    fn store(cfg: &BackboneConfig, k: usize, seed: u64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_pixel_params(&mut p, &mut rng, cfg).unwrap();
        init_decoder_params(&mut p, &mut rng, cfg, k).unwrap();
        // Nonzero biases keep pixel embeddings off the exact-tie point F = 0.
        let names: Vec<String> = p.names().iter().filter(|n| n.ends_with("/b")).cloned().collect();
        for n in names {
            for v in p.get_mut(&n).unwrap().data_mut() {
                *v = rng.uniform(-0.3, 0.3);
            }
        }
        p
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform(0.0, 1.0)).collect()).unwrap()
    }

    fn small_cfg(attention: Attention) -> BackboneConfig {
        BackboneConfig {
            widths: [4, 6, 6],
            d: 8,
            n_dec: 2,
            attention,
        }
    }

    #[test]
    fn shapes_and_stride() {
        let cfg = small_cfg(Attention::Kmeans);
        let p = store(&cfg, 4, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(random(&[2, 3, 64, 64], 2));
        let (f, q) = run_backbone(&mut g, &b, x, &cfg).unwrap();
        assert_eq!(g.shape(f.map), &[2, 8, 16, 16]);
        assert_eq!(g.shape(f.flat), &[2, 256, 8]);
        assert_eq!(g.shape(q), &[2, 4, 8]);
        assert!(g.value(q).all_finite());
    }

    #[test]
    fn default_config_shapes() {
        let cfg = BackboneConfig::default();
        let p = store(&cfg, 4, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let (f, q) = run_backbone(&mut g, &b, x, &cfg).unwrap();
        assert_eq!(g.shape(f.flat), &[2, 256, 64]);
        assert_eq!(g.shape(q), &[2, 4, 64]);
        assert!(g.value(f.flat).all_finite() && g.value(q).all_finite());
    }

    #[test]
    fn bad_input_sides_rejected() {
        let cfg = small_cfg(Attention::Kmeans);
        let p = store(&cfg, 2, 1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 30, 32]));
        assert!(matches!(encode_pixels(&mut g, &b, x, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_k_rejected() {
        let cfg = small_cfg(Attention::Kmeans);
        let mut p = ParamStore::<f64>::new();
        assert!(init_decoder_params(&mut p, &mut Rng::new(0), &cfg, 0).is_err());
    }

    #[test]
    fn batch_independence_and_determinism() {
        let cfg = small_cfg(Attention::Standard);
        let p = store(&cfg, 3, 4);
        let img = random(&[1, 3, 16, 16], 5);
        let mut both = img.data().to_vec();
        both.extend_from_slice(img.data());
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = g.constant(Tensor::new(vec![2, 3, 16, 16], data).unwrap());
            let (f, q) = run_backbone(&mut g, &b, x, &cfg).unwrap();
            (g.data(f.flat).to_vec(), g.data(q).to_vec())
        };
        let (f1, q1) = run(both.clone());
        let (f2, q2) = run(both);
        assert_eq!(f1, f2);
        assert_eq!(q1, q2);
        let half = f1.len() / 2;
        assert_eq!(f1[..half], f1[half..]);
        assert_eq!(q1[..q1.len() / 2], q1[q1.len() / 2..]);
    }

    #[test]
    fn kmeans_single_cluster_reads_mean() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(random(&[1, 5, 3], 1));
        let q = g.constant(random(&[1, 1, 3], 2));
        let (read, ne) = kmeans_read(&mut g, f, q, f).unwrap();
        assert_eq!(ne, vec![true]);
        let fd = g.data(f).to_vec();
        for c in 0..3 {
            let mean: f64 = (0..5).map(|i| fd[i * 3 + c]).sum::<f64>() / 5.0;
            assert!((g.data(read)[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_cluster_passes_through_cross_attention() {
        // Every pixel scores higher against query 0, so query 1 gets nothing.
        let cfg = BackboneConfig {
            widths: [2, 2, 2],
            d: 2,
            n_dec: 1,
            attention: Attention::Kmeans,
        };
        let p = store(&cfg, 2, 3);
        let mut g = Graph::<f64>::new();
        let b = p.bind(&mut g);
        let f = g.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 0.1, 2.0, -0.2, 1.5, 0.0]).unwrap());
        let q = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, -1.0, 0.3]).unwrap());
        let (_, ne) = kmeans_read(&mut g, f, q, f).unwrap();
        assert_eq!(ne, vec![true, false]);
        let out = cross_attention(&mut g, &b, 0, q, f, Attention::Kmeans).unwrap();
        assert_eq!(&g.data(out)[2..4], &[-1.0, 0.3]);
        assert_ne!(&g.data(out)[0..2], &[1.0, 0.0]);
        let full = decoder_block(&mut g, &b, 0, q, f, Attention::Kmeans).unwrap();
        assert!(g.value(full).all_finite());
    }

    #[test]
    fn slot_permutation_equivariance() {
        for attention in [Attention::Kmeans, Attention::Standard] {
            let cfg = small_cfg(attention);
            let p = store(&cfg, 4, 11);
            let perm = [2usize, 0, 3, 1];
            let mut pp = p.clone();
            {
                let t = pp.get_mut("queries").unwrap();
                let d = cfg.d;
                let src = p.get("queries").unwrap().data().to_vec();
                for (new, &old) in perm.iter().enumerate() {
                    t.data_mut()[new * d..(new + 1) * d].copy_from_slice(&src[old * d..(old + 1) * d]);
                }
            }
            let img = random(&[1, 3, 16, 16], 12);
            let run = |p: &ParamStore<f64>| {
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let x = g.constant(img.clone());
                let (_, q) = run_backbone(&mut g, &b, x, &cfg).unwrap();
                g.data(q).to_vec()
            };
            let a = run(&p);
            let bq = run(&pp);
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..cfg.d {
                    let (x, y) = (bq[new * cfg.d + c], a[old * cfg.d + c]);
                    assert!((x - y).abs() < 1e-12, "{attention}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn assignment_invariant_to_positive_rescaling() {
        let f = random(&[2, 20, 4], 1).data().iter().map(|v| v - 0.5).collect::<Vec<_>>();
        let q = random(&[2, 3, 4], 2).data().iter().map(|v| v - 0.5).collect::<Vec<_>>();
        let a = assign_pixels(&f, &q, 2, 20, 3, 4);
        for s in [1e-3, 0.7, 42.0] {
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            assert_eq!(assign_pixels(&f, &qs, 2, 20, 3, 4), a);
        }
    }

    fn block_gradcheck(attention: Attention) -> f64 {
        let cfg = BackboneConfig {
            widths: [2, 3, 3],
            d: 4,
            n_dec: 1,
            attention,
        };
        let p = store(&cfg, 2, 21);
        let img = random(&[1, 3, 8, 8], 22);
        let names: Vec<String> = p.names().to_vec();
        let mut inputs = vec![img];
        inputs.extend(p.values().iter().cloned());
        gradcheck_many(
            |g, xs| {
                let bound = Bound::from_parts(&names, &xs[1..])?;
                let (f, q) = run_backbone(g, &bound, xs[0], &cfg)?;
                let w = g.constant(random(g.shape(q), 23));
                let y = g.mul(q, w)?;
                let s1 = g.sum(y, None)?;
                let fw = g.constant(random(g.shape(f.flat), 24));
                let z = g.mul(f.flat, fw)?;
                let s2 = g.sum(z, None)?;
                g.add(s1, s2)
            },
            &inputs,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn gradcheck_full_block_tiny() {
        for attention in [Attention::Standard, Attention::Kmeans] {
            let err = block_gradcheck(attention);
            assert!(err < 1e-5, "{attention}: {err}");
        }
    }
}
