use super::kernels::{self, ConvGeom};
use super::{verify_mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Abs,
    Square,
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
struct MatMulSpec {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(MatMulSpec),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    /// Forward difference along the last (`true`) or second-to-last axis.
    Diff { x: Var, last: bool },
    Reduce {
        x: Var,
        axis: Option<usize>,
        mean: bool,
    },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Expand(Var),
    Pick { x: Var, idx: Vec<usize> },
    Cumsum(Var),
    NormalizeSum(Var),
    L2Normalize { x: Var, eps: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only tape of tensor ops. Node order is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions) || verify_mode(),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(Error::contract(format!(
                "non-finite output from {:?} on finite inputs",
                std::mem::discriminant(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn data(&self, x: Var) -> &[T] {
        self.nodes[x.0].value.data()
    }

    pub fn grad(&self, x: Var) -> Option<&[T]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = T::of(c);
        let v = self.map_value(x, |v| v * cs);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cs = T::of(c);
        let v = self.map_value(x, |v| v + cs);
        self.push(v, Op::AddScalar(x), &[x])
    }

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = &self.nodes[x.0].value;
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `x[..., j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::dim(format!("add_bias: {xs:?} with bias {bs:?}")));
        }
        let n = bs[0];
        let bias = self.data(b).to_vec();
        let mut v = self.value(x).clone();
        for row in v.data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(v, Op::AddBias(x, b), &[x, b])
    }

    /// `a[..., n] · b[n, p]` with the leading axes of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::dim(format!(
                "matmul: inner dimensions differ: {ash:?} vs {bsh:?}"
            )));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k;
        let spec = MatMulSpec {
            a,
            b,
            batch: 1,
            m,
            k,
            n,
            ta: false,
            tb: false,
            a_batched: false,
            b_batched: false,
        };
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        self.matmul_spec(spec, out_shape)
    }

    /// Batched product of `[B, m, k]` (stored `[B, k, m]` when `ta`) with
    /// `[B, k, n]` (stored `[B, n, k]` when `tb`). A rank-2 `b` is shared
    /// across the batch.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let bad = || Error::dim(format!("bmm: incompatible shapes {ash:?} vs {bsh:?}"));
        if ash.len() != 3 || !(bsh.len() == 3 || bsh.len() == 2) {
            return Err(bad());
        }
        let batch = ash[0];
        let (m, k) = if ta { (ash[2], ash[1]) } else { (ash[1], ash[2]) };
        let b_batched = bsh.len() == 3;
        let bm = if b_batched { &bsh[1..] } else { &bsh[..] };
        if b_batched && bsh[0] != batch {
            return Err(bad());
        }
        let (kb, n) = if tb { (bm[1], bm[0]) } else { (bm[0], bm[1]) };
        if kb != k {
            return Err(bad());
        }
        let spec = MatMulSpec {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
            a_batched: true,
            b_batched,
        };
        self.matmul_spec(spec, vec![batch, m, n])
    }

    fn matmul_spec(&mut self, s: MatMulSpec, out_shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![T::zero(); s.batch * s.m * s.n];
        {
            let a = self.data(s.a);
            let b = self.data(s.b);
            for i in 0..s.batch {
                let ao = if s.a_batched { i * s.m * s.k } else { 0 };
                let bo = if s.b_batched { i * s.k * s.n } else { 0 };
                kernels::gemm(
                    s.m,
                    s.k,
                    s.n,
                    &a[ao..],
                    s.ta,
                    &b[bo..],
                    s.tb,
                    &mut out[i * s.m * s.n..(i + 1) * s.m * s.n],
                    false,
                );
            }
        }
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul(s),
            &[s.a, s.b],
        )
    }

    fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let v = self.map_value(x, |v| apply_unary(u, v));
        self.push(v, Op::Unary(x, u), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xd[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("log_softmax of a scalar"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Tensor { shape, data: out }, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(format!(
                "layer_norm: {shape:?} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let rows = xd.len() / n;
        let nn = T::of(n as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Cross-correlation of `[B, C, H, W]` with `[O, C, k, k]` (k ∈ {1, 3}),
    /// zero padding `k / 2`, stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv2d: input {xs:?} kernel {ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim(format!(
                "conv2d: channel mismatch, input {xs:?} kernel {ws:?}"
            )));
        }
        if ws[2] != ws[3] || !(ws[2] == 1 || ws[2] == 3) || !(stride == 1 || stride == 2) {
            return Err(Error::dim(format!(
                "conv2d: unsupported kernel {ws:?} / stride {stride}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("conv2d: bias {:?} for {ws:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride);
        let plane = geom.out_plane();
        let mut out = vec![T::zero(); geom.batch * geom.cout * plane];
        {
            let xd = self.data(x);
            let wd = self.data(w);
            let direct = geom.ksize == 1 && stride == 1;
            let mut col = if direct {
                Vec::new()
            } else {
                vec![T::zero(); geom.col_rows() * plane]
            };
            let in_img = geom.cin * geom.h * geom.w;
            for bi in 0..geom.batch {
                let xb = &xd[bi * in_img..(bi + 1) * in_img];
                let src: &[T] = if direct {
                    xb
                } else {
                    kernels::im2col(xb, &geom, &mut col);
                    &col
                };
                kernels::gemm(
                    geom.cout,
                    geom.col_rows(),
                    plane,
                    wd,
                    false,
                    src,
                    false,
                    &mut out[bi * geom.cout * plane..(bi + 1) * geom.cout * plane],
                    false,
                );
            }
            if let Some(b) = b {
                let bd = self.data(b);
                for (ci, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = bd[ci % geom.cout];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor {
                shape: vec![geom.batch, geom.cout, geom.oh, geom.ow],
                data: out,
            },
            Op::Conv2d { x, w, b, geom },
            &inputs,
        )
    }

    /// 2x bilinear upsampling of the last two axes (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("upsample2x: rank too low {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let ty = kernels::upsample_taps(h);
        let tx = kernels::upsample_taps(w);
        let planes = self.value(x).len() / (h * w);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                let (fy1, fy0) = (T::of(fy), T::of(1.0 - fy));
                for &(x0, x1, fx) in &tx {
                    let (fx1, fx0) = (T::of(fx), T::of(1.0 - fx));
                    let top = src[y0 * w + x0] * fx0 + src[y0 * w + x1] * fx1;
                    let bot = src[y1 * w + x0] * fx0 + src[y1 * w + x1] * fx1;
                    out.push(top * fy0 + bot * fy1);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] *= 2;
        out_shape[r - 1] *= 2;
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Upsample2x(x),
            &[x],
        )
    }

    /// 2x2 average pooling of the last two axes (odd trailing rows/cols dropped).
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] < 2 || shape[r - 1] < 2 {
            return Err(Error::dim(format!("avg_pool2x: too small {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = self.value(x).len() / (h * w);
        let xd = self.data(x);
        let q = T::of(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let s = &xd[p * h * w..];
            for i in 0..oh {
                for j in 0..ow {
                    let a = s[2 * i * w + 2 * j] + s[2 * i * w + 2 * j + 1];
                    let b = s[(2 * i + 1) * w + 2 * j] + s[(2 * i + 1) * w + 2 * j + 1];
                    out.push((a + b) * q);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::AvgPool2x(x),
            &[x],
        )
    }

    /// Forward difference `x[.., i+1] - x[.., i]` along the last axis
    /// (`last == true`) or the second-to-last axis.
    pub fn diff(&mut self, x: Var, last: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::dim(format!("diff: rank too low {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = if last { (h, w - 1) } else { (h - 1, w) };
        if oh == 0 || ow == 0 {
            return Err(Error::dim(format!("diff: axis of length 1 in {shape:?}")));
        }
        let planes = self.value(x).len() / (h * w);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let s = &xd[p * h * w..];
            for i in 0..oh {
                for j in 0..ow {
                    let v = if last {
                        s[i * w + j + 1] - s[i * w + j]
                    } else {
                        s[(i + 1) * w + j] - s[i * w + j]
                    };
                    out.push(v);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Diff { x, last },
            &[x],
        )
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xd = self.data(x);
        let (data, out_shape) = match axis {
            None => {
                let s: T = xd.iter().copied().sum();
                let v = if mean { s / T::of(xd.len() as f64) } else { s };
                (vec![v], vec![])
            }
            Some(a) => {
                if a >= shape.len() {
                    return Err(Error::dim(format!("reduce: axis {a} out of range for {shape:?}")));
                }
                let (outer, len, inner) = kernels::split_axis(&shape, a);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if mean {
                    let l = T::of(len as f64);
                    out.iter_mut().for_each(|v| *v = *v / l);
                }
                let mut s = shape.clone();
                s.remove(a);
                (out, s)
            }
        };
        self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Reduce { x, axis, mean },
            &[x],
        )
    }

    /// Sum over `axis`, or over everything into a scalar.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::dim(format!("permute: {perm:?} invalid for {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.data(x), &shape, perm);
        self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::dim("expand to zero copies"));
        }
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.len());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        self.push(Tensor { shape, data }, Op::Expand(x), &[x])
    }

    /// Gathers one entry per row along the last axis.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("pick from a scalar"))?;
        let rows = self.value(x).len() / c;
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim(format!(
                "pick: {} indices for {rows} rows of width {c}",
                idx.len()
            )));
        }
        let xd = self.data(x);
        let data = idx.iter().enumerate().map(|(r, &i)| xd[r * c + i]).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Inclusive prefix sum along the last axis.
    pub fn cumsum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("cumsum of a scalar"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for j in 1..n {
                let prev = row[j - 1];
                row[j] += prev;
            }
        }
        self.push(Tensor { shape, data: out }, Op::Cumsum(x), &[x])
    }

    /// Divides each last-axis slice by its sum.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("normalize_sum of a scalar"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        self.push(Tensor { shape, data: out }, Op::NormalizeSum(x), &[x])
    }

    /// Divides each last-axis slice by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("l2_normalize of a scalar"))?;
        let mut out = self.data(x).to_vec();
        let e = T::of(eps);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(e);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        self.push(Tensor { shape, data: out }, Op::L2Normalize { x, eps }, &[x])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into `grad` of every
    /// node that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.zero_grad();
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bd).map(|(&g, &b)| g * b).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(ad).map(|(&g, &a)| g * a).collect()));
                }
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                out.push((*x, g.iter().map(|&v| v * c).collect()));
            }
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::AddBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((*b, db));
                }
            }
            Op::MatMul(s) => self.matmul_backward(s, g, &mut out),
            Op::Unary(x, u) => {
                let xd = self.data(*x);
                let dx = g
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * unary_grad(*u, x, y))
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.value.shape().last().unwrap();
                let gd = self.data(*gamma);
                let nn = T::of(n as f64);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..rstd.len() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dhh = T::zero();
                    for j in 0..n {
                        let dh = gr[j] * gd[j];
                        mean_dh += dh;
                        mean_dhh += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh = mean_dh / nn;
                    mean_dhh = mean_dhh / nn;
                    for j in 0..n {
                        let dh = gr[j] * gd[j];
                        dx[r * n + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, &mut out),
            Op::Upsample2x(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let ty = kernels::upsample_taps(h);
                let tx = kernels::upsample_taps(w);
                let planes = self.value(*x).len() / (h * w);
                let mut dx = vec![T::zero(); planes * h * w];
                let mut gi = 0;
                for p in 0..planes {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for &(y0, y1, fy) in &ty {
                        let (fy1, fy0) = (T::of(fy), T::of(1.0 - fy));
                        for &(x0, x1, fx) in &tx {
                            let (fx1, fx0) = (T::of(fx), T::of(1.0 - fx));
                            let gv = g[gi];
                            gi += 1;
                            d[y0 * w + x0] += gv * fy0 * fx0;
                            d[y0 * w + x1] += gv * fy0 * fx1;
                            d[y1 * w + x0] += gv * fy1 * fx0;
                            d[y1 * w + x1] += gv * fy1 * fx1;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::AvgPool2x(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = self.value(*x).len() / (h * w);
                let q = T::of(0.25);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(p * oh + i) * ow + j] * q;
                            let base = p * h * w;
                            dx[base + 2 * i * w + 2 * j] += gv;
                            dx[base + 2 * i * w + 2 * j + 1] += gv;
                            dx[base + (2 * i + 1) * w + 2 * j] += gv;
                            dx[base + (2 * i + 1) * w + 2 * j + 1] += gv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Diff { x, last } => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (oh, ow) = if *last { (h, w - 1) } else { (h - 1, w) };
                let planes = self.value(*x).len() / (h * w);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(p * oh + i) * ow + j];
                            let base = p * h * w;
                            let (hi, lo) = if *last {
                                (i * w + j + 1, i * w + j)
                            } else {
                                ((i + 1) * w + j, i * w + j)
                            };
                            dx[base + hi] += gv;
                            dx[base + lo] -= gv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Reduce { x, axis, mean } => {
                let xs = self.shape(*x);
                let n = self.value(*x).len();
                let dx = match axis {
                    None => {
                        let v = if *mean { g[0] / T::of(n as f64) } else { g[0] };
                        vec![v; n]
                    }
                    Some(a) => {
                        let (outer, len, inner) = kernels::split_axis(xs, *a);
                        let f = if *mean { T::one() / T::of(len as f64) } else { T::one() };
                        let mut dx = vec![T::zero(); n];
                        for o in 0..outer {
                            for j in 0..len {
                                for k in 0..inner {
                                    dx[(o * len + j) * inner + k] = g[o * inner + k] * f;
                                }
                            }
                        }
                        dx
                    }
                };
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (dx, _) = kernels::permute(g, node.value.shape(), &inv);
                out.push((*x, dx));
            }
            Op::Expand(x) => {
                let n = self.value(*x).len();
                let mut dx = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    dx.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                }
                out.push((*x, dx));
            }
            Op::Pick { x, idx } => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] += g[r];
                }
                out.push((*x, dx));
            }
            Op::Cumsum(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(n) {
                    for j in (0..n.saturating_sub(1)).rev() {
                        let next = row[j + 1];
                        row[j] += next;
                    }
                }
                out.push((*x, dx));
            }
            Op::NormalizeSum(x) => {
                let n = *node.value.shape().last().unwrap();
                let xd = self.data(*x);
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..g.len() / n {
                    let s: T = xd[r * n..(r + 1) * n].iter().copied().sum();
                    let dot: T = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        dx[r * n + j] = (g[r * n + j] - dot) / s;
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, eps } => {
                let n = *node.value.shape().last().unwrap();
                let xd = self.data(*x);
                let e = T::of(*eps);
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..g.len() / n {
                    let xr = &xd[r * n..(r + 1) * n];
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > e {
                        let dot: T = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum();
                        for j in 0..n {
                            dx[r * n + j] = (g[r * n + j] - y[r * n + j] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dx[r * n + j] = g[r * n + j] / e;
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }

    fn matmul_backward(&self, s: &MatMulSpec, g: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        let ad = self.data(s.a);
        let bd = self.data(s.b);
        let (m, k, n) = (s.m, s.k, s.n);
        if self.needs(s.a) {
            let mut da = vec![T::zero(); ad.len()];
            for i in 0..s.batch {
                let ao = if s.a_batched { i * m * k } else { 0 };
                let bo = if s.b_batched { i * k * n } else { 0 };
                let gc = &g[i * m * n..(i + 1) * m * n];
                let dst = &mut da[ao..ao + m * k];
                if s.ta {
                    // A stored k×m: dA = op(B)·dCᵀ
                    kernels::gemm(k, n, m, &bd[bo..], s.tb, gc, true, dst, true);
                } else {
                    kernels::gemm(m, n, k, gc, false, &bd[bo..], !s.tb, dst, true);
                }
            }
            out.push((s.a, da));
        }
        if self.needs(s.b) {
            let mut db = vec![T::zero(); bd.len()];
            for i in 0..s.batch {
                let ao = if s.a_batched { i * m * k } else { 0 };
                let bo = if s.b_batched { i * k * n } else { 0 };
                let gc = &g[i * m * n..(i + 1) * m * n];
                let dst = &mut db[bo..bo + k * n];
                if s.tb {
                    // B stored n×k: dB = dCᵀ·op(A)
                    kernels::gemm(n, m, k, gc, true, &ad[ao..], s.ta, dst, true);
                } else {
                    kernels::gemm(k, m, n, &ad[ao..], !s.ta, gc, false, dst, true);
                }
            }
            out.push((s.b, db));
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let xd = self.data(x);
        let wd = self.data(w);
        let plane = geom.out_plane();
        let rows = geom.col_rows();
        let in_img = geom.cin * geom.h * geom.w;
        let out_img = geom.cout * plane;
        let direct = geom.ksize == 1 && geom.stride == 1;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dw = vec![T::zero(); wd.len()];
        let mut dx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
        let mut col = if direct { Vec::new() } else { vec![T::zero(); rows * plane] };
        let mut dcol = if direct || !need_x {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        for bi in 0..geom.batch {
            let gb = &g[bi * out_img..(bi + 1) * out_img];
            let xb = &xd[bi * in_img..(bi + 1) * in_img];
            if need_w {
                let src: &[T] = if direct {
                    xb
                } else {
                    kernels::im2col(xb, geom, &mut col);
                    &col
                };
                kernels::gemm(geom.cout, plane, rows, gb, false, src, true, &mut dw, true);
            }
            if need_x {
                if direct {
                    kernels::gemm(
                        rows,
                        geom.cout,
                        plane,
                        wd,
                        true,
                        gb,
                        false,
                        &mut dx[bi * in_img..(bi + 1) * in_img],
                        true,
                    );
                } else {
                    kernels::gemm(rows, geom.cout, plane, wd, true, gb, false, &mut dcol, false);
                    kernels::col2im(&dcol, geom, &mut dx[bi * in_img..(bi + 1) * in_img]);
                }
            }
        }
        if need_x {
            out.push((x, dx));
        }
        if need_w {
            out.push((w, dw));
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![T::zero(); geom.cout];
                for (ci, chunk) in g.chunks(plane).enumerate() {
                    db[ci % geom.cout] += chunk.iter().copied().sum::<T>();
                }
                out.push((b, db));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn apply_unary<T: Scalar>(u: Unary, x: T) -> T {
    match u {
        Unary::Relu => x.max(T::zero()),
        Unary::Gelu => {
            let inner = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
            T::of(0.5) * x * (T::one() + inner.tanh())
        }
        Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
        Unary::Log => x.ln(),
        Unary::Exp => x.exp(),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
    }
}

fn unary_grad<T: Scalar>(u: Unary, x: T, y: T) -> T {
    match u {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Gelu => {
            let c = T::of(GELU_C);
            let a = T::of(0.044715);
            let t = (c * (x + a * x * x * x)).tanh();
            T::of(0.5) * (T::one() + t)
                + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Log => T::one() / x,
        Unary::Exp => y,
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => T::of(2.0) * x,
        Unary::Clamp(lo, hi) => {
            if x > T::of(lo) && x < T::of(hi) {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}
