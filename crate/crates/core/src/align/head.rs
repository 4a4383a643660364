//! Alignment heads mapping vision patch features into the text space.
//!
//! Rows are patches: every variant maps `X: N×d_in` to `Z: N×d_out` with
//! weights applied as `X·W + b`. Backward passes are written out by hand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, SeededRng, Tensor2D};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Linear,
    Mlp,
    Transformer,
}

fn default_hidden() -> usize {
    64
}

fn default_heads() -> usize {
    4
}

/// Shape of a head. `hidden` is the MLP width or the transformer
/// feed-forward width; `heads` only applies to the transformer, whose
/// model width is `d_in`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub variant: HeadVariant,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

impl HeadSpec {
    pub fn linear(d_in: usize, d_out: usize) -> Self {
        Self {
            variant: HeadVariant::Linear,
            d_in,
            d_out,
            hidden: default_hidden(),
            heads: default_heads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 {
            return Err(Error::domain("head dims must be positive"));
        }
        match self.variant {
            HeadVariant::Linear => {}
            HeadVariant::Mlp => {
                if self.hidden == 0 {
                    return Err(Error::domain("mlp hidden width must be positive"));
                }
            }
            HeadVariant::Transformer => {
                if self.hidden == 0 || self.heads == 0 {
                    return Err(Error::domain("transformer hidden width and heads must be positive"));
                }
                if !self.d_in.is_multiple_of(self.heads) {
                    return Err(Error::domain(format!(
                        "{} heads do not divide model width {}",
                        self.heads, self.d_in
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parameter names with their (rows, cols) and fan-in; fan-in 0 marks
    /// bias and layer-norm shift, `usize::MAX` a layer-norm gain.
    fn layout(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let (di, d_out, h) = (self.d_in, self.d_out, self.hidden);
        match self.variant {
            HeadVariant::Linear => vec![("w", di, d_out, di), ("b", 1, d_out, 0)],
            HeadVariant::Mlp => vec![
                ("w1", di, h, di),
                ("b1", 1, h, 0),
                ("w2", h, d_out, h),
                ("b2", 1, d_out, 0),
            ],
            HeadVariant::Transformer => vec![
                ("ln1_g", 1, di, usize::MAX),
                ("ln1_b", 1, di, 0),
                ("wq", di, di, di),
                ("bq", 1, di, 0),
                ("wk", di, di, di),
                ("bk", 1, di, 0),
                ("wv", di, di, di),
                ("bv", 1, di, 0),
                ("wo", di, di, di),
                ("bo", 1, di, 0),
                ("ln2_g", 1, di, usize::MAX),
                ("ln2_b", 1, di, 0),
                ("w1", di, h, di),
                ("b1", 1, h, 0),
                ("w2", h, di, h),
                ("b2", 1, di, 0),
                ("wout", di, d_out, di),
                ("bout", 1, d_out, 0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
}

/// Gradients aligned index-for-index with [`AlignmentHead::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub grads: Vec<Tensor2D>,
}

impl HeadGrads {
    pub fn zeros_like(head: &AlignmentHead) -> Self {
        Self {
            grads: head
                .params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &HeadGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor2D::all_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHead {
    pub spec: HeadSpec,
    params: Vec<Param>,
    /// When false the head returns the raw affine output.
    pub normalize_output: bool,
}

/// Intermediates kept by [`AlignmentHead::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor2D,
    norms: Vec<f64>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    Linear { x: Tensor2D },
    Mlp { x: Tensor2D, pre: Tensor2D, act: Tensor2D },
    Transformer(Box<BlockCache>),
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    h1: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    attn: Vec<Tensor2D>,
    mixed: Tensor2D,
    ln2: LayerNormCache,
    h2: Tensor2D,
    f1: Tensor2D,
    g: Tensor2D,
    r2: Tensor2D,
}

#[derive(Debug, Clone)]
struct LayerNormCache {
    xhat: Tensor2D,
    rstd: Vec<f64>,
}

impl AlignmentHead {
    /// Weights uniform in `±1/√fan_in`, biases zero, layer-norm gains one.
    pub fn init(spec: HeadSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, rows, cols, fan_in)| {
                let mut value = Tensor2D::zeros(rows, cols);
                if fan_in == usize::MAX {
                    value.data_mut().iter_mut().for_each(|v| *v = 1.0);
                } else if fan_in > 0 {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    value
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.uniform(-bound, bound));
                }
                Param {
                    name: name.to_string(),
                    value,
                }
            })
            .collect();
        Ok(Self {
            spec,
            params,
            normalize_output: true,
        })
    }

    /// Linear head with the given `d_in × d_out` weight and bias.
    pub fn linear_from(w: Tensor2D, b: Vec<f64>) -> Result<Self> {
        let spec = HeadSpec::linear(w.rows(), w.cols());
        let b = Tensor2D::from_vec(1, b.len(), b)?;
        Self::from_params(
            spec,
            vec![
                Param {
                    name: "w".into(),
                    value: w,
                },
                Param {
                    name: "b".into(),
                    value: b,
                },
            ],
        )
    }

    /// Rebuilds a head from named parameters, checking names and shapes.
    pub fn from_params(spec: HeadSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.len() {
            return Err(Error::shape(format!(
                "{:?} head needs {} parameters, got {}",
                spec.variant,
                layout.len(),
                params.len()
            )));
        }
        for ((name, rows, cols, _), p) in layout.iter().zip(&params) {
            if p.name != *name || p.value.shape() != (*rows, *cols) {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {name} ({rows}, {cols})",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            spec,
            params,
            normalize_output: true,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    fn p(&self, i: usize) -> &Tensor2D {
        &self.params[i].value
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Forward pass over one image's patches, keeping what backward needs.
    pub fn forward_cached(&self, x: &Tensor2D) -> Result<ForwardPass> {
        if x.cols() != self.spec.d_in {
            return Err(Error::shape(format!(
                "head expects {} input features, got {}",
                self.spec.d_in,
                x.cols()
            )));
        }
        let (pre_norm, cache) = match self.spec.variant {
            HeadVariant::Linear => (affine(x, self.p(0), self.p(1))?, Cache::Linear { x: x.clone() }),
            HeadVariant::Mlp => {
                let pre = affine(x, self.p(0), self.p(1))?;
                let act = map(&pre, gelu);
                let out = affine(&act, self.p(2), self.p(3))?;
                (out, Cache::Mlp { x: x.clone(), pre, act })
            }
            HeadVariant::Transformer => {
                let (out, cache) = self.block_forward(x)?;
                (out, Cache::Transformer(Box::new(cache)))
            }
        };
        let (output, norms) = if self.normalize_output {
            normalize_rows(&pre_norm)?
        } else {
            {
                let rows = pre_norm.rows();
                (pre_norm, vec![1.0; rows])
            }
        };
        Ok(ForwardPass { output, norms, cache })
    }

    /// Parameter gradients for upstream gradient `dz = ∂L/∂Z`.
    pub fn backward(&self, pass: &ForwardPass, dz: &Tensor2D) -> Result<HeadGrads> {
        if dz.shape() != pass.output.shape() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} vs output {:?}",
                dz.shape(),
                pass.output.shape()
            )));
        }
        let du = if self.normalize_output {
            normalize_backward(&pass.output, &pass.norms, dz)
        } else {
            dz.clone()
        };
        let grads = match &pass.cache {
            Cache::Linear { x } => vec![matmul_tn(x, &du)?, col_sums(&du)],
            Cache::Mlp { x, pre, act } => {
                let dw2 = matmul_tn(act, &du)?;
                let db2 = col_sums(&du);
                let dact = matmul_nt(&du, self.p(2))?;
                let dpre = zip_map(&dact, pre, |g, v| g * gelu_grad(v));
                vec![matmul_tn(x, &dpre)?, col_sums(&dpre), dw2, db2]
            }
            Cache::Transformer(c) => self.block_backward(c, &du)?,
        };
        Ok(HeadGrads { grads })
    }

    fn block_forward(&self, x: &Tensor2D) -> Result<(Tensor2D, BlockCache)> {
        let (h1, ln1) = layer_norm(x, self.p(0), self.p(1));
        let q = affine(&h1, self.p(2), self.p(3))?;
        let k = affine(&h1, self.p(4), self.p(5))?;
        let v = affine(&h1, self.p(6), self.p(7))?;
        let (mixed, attn) = self.attention(&q, &k, &v)?;
        let a = affine(&mixed, self.p(8), self.p(9))?;
        let r1 = zip_map(x, &a, |p, q| p + q);
        let (h2, ln2) = layer_norm(&r1, self.p(10), self.p(11));
        let f1 = affine(&h2, self.p(12), self.p(13))?;
        let g = map(&f1, gelu);
        let f2 = affine(&g, self.p(14), self.p(15))?;
        let r2 = zip_map(&r1, &f2, |p, q| p + q);
        let out = affine(&r2, self.p(16), self.p(17))?;
        let cache = BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            mixed,
            ln2,
            h2,
            f1,
            g,
            r2,
        };
        Ok((out, cache))
    }

    fn attention(&self, q: &Tensor2D, k: &Tensor2D, v: &Tensor2D) -> Result<(Tensor2D, Vec<Tensor2D>)> {
        let n = q.rows();
        let d = q.cols();
        let dh = d / self.spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Tensor2D::zeros(n, d);
        let mut attn = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = slice_cols(q, cols.clone());
            let kh = slice_cols(k, cols.clone());
            let vh = slice_cols(v, cols.clone());
            let mut s = matmul_nt(&qh, &kh)?;
            s.data_mut().iter_mut().for_each(|x| *x *= scale);
            softmax_rows(&mut s);
            let oh = matmul(&s, &vh)?;
            for i in 0..n {
                mixed.row_mut(i)[cols.clone()].copy_from_slice(oh.row(i));
            }
            attn.push(s);
        }
        Ok((mixed, attn))
    }

    fn block_backward(&self, c: &BlockCache, du: &Tensor2D) -> Result<Vec<Tensor2D>> {
        let dwout = matmul_tn(&c.r2, du)?;
        let dbout = col_sums(du);
        let dr2 = matmul_nt(du, self.p(16))?;

        // feed-forward branch
        let dw2 = matmul_tn(&c.g, &dr2)?;
        let db2 = col_sums(&dr2);
        let dg = matmul_nt(&dr2, self.p(14))?;
        let df1 = zip_map(&dg, &c.f1, |g, v| g * gelu_grad(v));
        let dw1 = matmul_tn(&c.h2, &df1)?;
        let db1 = col_sums(&df1);
        let dh2 = matmul_nt(&df1, self.p(12))?;
        let (dr1_ln, dln2_g, dln2_b) = layer_norm_backward(&c.ln2, self.p(10), &dh2);
        let dr1 = zip_map(&dr2, &dr1_ln, |a, b| a + b);

        // attention branch
        let dwo = matmul_tn(&c.mixed, &dr1)?;
        let dbo = col_sums(&dr1);
        let dmixed = matmul_nt(&dr1, self.p(8))?;
        let n = c.q.rows();
        let d = c.q.cols();
        let dh = d / self.spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor2D::zeros(n, d);
        let mut dk = Tensor2D::zeros(n, d);
        let mut dv = Tensor2D::zeros(n, d);
        for (h, a) in c.attn.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            let qh = slice_cols(&c.q, cols.clone());
            let kh = slice_cols(&c.k, cols.clone());
            let vh = slice_cols(&c.v, cols.clone());
            let doh = slice_cols(&dmixed, cols.clone());
            let da = matmul_nt(&doh, &vh)?;
            let dvh = matmul_tn(a, &doh)?;
            let mut ds = Tensor2D::zeros(n, n);
            for i in 0..n {
                let ai = a.row(i);
                let dai = da.row(i);
                let inner: f64 = ai.iter().zip(dai).map(|(p, g)| p * g).sum();
                for (o, (p, g)) in ds.row_mut(i).iter_mut().zip(ai.iter().zip(dai)) {
                    *o = p * (g - inner) * scale;
                }
            }
            let dqh = matmul(&ds, &kh)?;
            let dkh = matmul_tn(&ds, &qh)?;
            for i in 0..n {
                dq.row_mut(i)[cols.clone()].copy_from_slice(dqh.row(i));
                dk.row_mut(i)[cols.clone()].copy_from_slice(dkh.row(i));
                dv.row_mut(i)[cols.clone()].copy_from_slice(dvh.row(i));
            }
        }
        let dwq = matmul_tn(&c.h1, &dq)?;
        let dwk = matmul_tn(&c.h1, &dk)?;
        let dwv = matmul_tn(&c.h1, &dv)?;
        let mut dh1 = matmul_nt(&dq, self.p(2))?;
        for (g, w) in [(&dk, self.p(4)), (&dv, self.p(6))] {
            let part = matmul_nt(g, w)?;
            dh1.data_mut().iter_mut().zip(part.data()).for_each(|(a, b)| *a += b);
        }
        let (_, dln1_g, dln1_b) = layer_norm_backward(&c.ln1, self.p(0), &dh1);

        Ok(vec![
            dln1_g,
            dln1_b,
            dwq,
            col_sums(&dq),
            dwk,
            col_sums(&dk),
            dwv,
            col_sums(&dv),
            dwo,
            dbo,
            dln2_g,
            dln2_b,
            dw1,
            db1,
            dw2,
            db2,
            dwout,
            dbout,
        ])
    }
}

fn affine(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let mut out = matmul(x, w)?;
    let bias = b.row(0);
    for i in 0..out.rows() {
        out.row_mut(i).iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    }
    Ok(out)
}

fn col_sums(m: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(1, m.cols());
    for i in 0..m.rows() {
        out.row_mut(0).iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += v);
    }
    out
}

fn map(m: &Tensor2D, f: impl Fn(f64) -> f64) -> Tensor2D {
    let mut out = m.clone();
    out.data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn zip_map(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, &y)| *x = f(*x, y));
    out
}

fn slice_cols(m: &Tensor2D, cols: std::ops::Range<usize>) -> Tensor2D {
    let width = cols.len();
    let mut data = Vec::with_capacity(m.rows() * width);
    for i in 0..m.rows() {
        data.extend_from_slice(&m.row(i)[cols.clone()]);
    }
    Tensor2D::from_vec(m.rows(), width, data).expect("column slice shape")
}

fn softmax_rows(m: &mut Tensor2D) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn layer_norm(x: &Tensor2D, gain: &Tensor2D, shift: &Tensor2D) -> (Tensor2D, LayerNormCache) {
    let (n, d) = x.shape();
    let mut xhat = Tensor2D::zeros(n, d);
    let mut out = Tensor2D::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.set(i, j, h);
            out.set(i, j, h * gain.get(0, j) + shift.get(0, j));
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dshift)`.
fn layer_norm_backward(c: &LayerNormCache, gain: &Tensor2D, dy: &Tensor2D) -> (Tensor2D, Tensor2D, Tensor2D) {
    let (n, d) = dy.shape();
    let mut dx = Tensor2D::zeros(n, d);
    let mut dgain = Tensor2D::zeros(1, d);
    for i in 0..n {
        let xh = c.xhat.row(i);
        let g = dy.row(i);
        let dxhat: Vec<f64> = (0..d).map(|j| g[j] * gain.get(0, j)).collect();
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx.set(i, j, c.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx));
            dgain.row_mut(0)[j] += g[j] * xh[j];
        }
    }
    (dx, dgain, col_sums(dy))
}

fn normalize_rows(u: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
    let mut out = u.clone();
    let mut norms = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || n <= 1e-12 {
            return Err(Error::NonFinite(format!("head output row {i} has norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// `∂L/∂u = (g − z(z·g)) / |u|` for `z = u/|u|`.
fn normalize_backward(z: &Tensor2D, norms: &[f64], dz: &Tensor2D) -> Tensor2D {
    let mut out = dz.clone();
    for (i, &norm) in norms.iter().enumerate() {
        let zi = z.row(i);
        let proj: f64 = zi.iter().zip(dz.row(i)).map(|(a, b)| a * b).sum();
        for (o, &zv) in out.row_mut(i).iter_mut().zip(zi) {
            *o = (*o - zv * proj) / norm;
        }
    }
    out
}
