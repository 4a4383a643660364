//! Dense f64 kernels shared by every stage of the pipeline.
//!
//! Everything here is a pure function of its inputs. Tensors are plain
//! row-major `Vec<f64>` buffers with an explicit shape; there is no
//! broadcasting and no views.

use rand_core::{RngCore, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2D {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2D {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(format!("vstack column mismatch: {} vs {cols}", p.cols)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `h × w × c` grid (channels innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3D {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h * w * c != data.len() {
            return Err(Error::shape(format!(
                "{h}x{w}x{c} grid needs {} elements, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.w + x) * self.c;
        &mut self.data[o..o + self.c]
    }

    /// Views the grid as an `(h·w) × c` matrix of pixel/patch vectors.
    pub fn to_matrix(&self) -> Tensor2D {
        Tensor2D {
            rows: self.h * self.w,
            cols: self.c,
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(m: Tensor2D, h: usize, w: usize) -> Result<Self> {
        if m.rows != h * w {
            return Err(Error::shape(format!("{} rows cannot form a {h}x{w} grid", m.rows)));
        }
        Ok(Self {
            h,
            w,
            c: m.cols,
            data: m.data,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `log Σ exp(v)` with max-shift.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("logsumexp of an empty vector"));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::domain(format!("logsumexp input {v} is not finite")));
        }
        max = max.max(v);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Tensor2D) -> Result<Tensor2D> {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let n = norm(row);
        if n <= 1e-12 {
            return Err(Error::domain(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= 1e-12 {
        return Err(Error::domain("vector has zero norm"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `out[i][j] = a_i · b_j`.
pub fn similarity_matrix(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "similarity needs equal inner dims, got {} and {}",
            a.cols, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a: k×n`, `b: k×m`.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    similarity_matrix(a, b)
}

/// Bilinear resize with the align-corners=false convention: output index `i`
/// samples source coordinate `(i + 0.5)·in/out − 0.5`, clamped to the grid.
pub fn bilinear_resize(grid: &Tensor3D, out_h: usize, out_w: usize) -> Result<Tensor3D> {
    if grid.h == 0 || grid.w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::domain(format!(
            "cannot resize {}x{} to {out_h}x{out_w}",
            grid.h, grid.w
        )));
    }
    let ys = axis_taps(grid.h, out_h);
    let xs = axis_taps(grid.w, out_w);
    let c = grid.c;
    let mut out = Tensor3D::zeros(out_h, out_w, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = grid.at(y0, x0);
            let p01 = grid.at(y0, x1);
            let p10 = grid.at(y1, x0);
            let p11 = grid.at(y1, x1);
            let dst = out.at_mut(oy, ox);
            for ch in 0..c {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fx;
                dst[ch] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// 64-bit FNV-1a. Used to derive per-image seeds from string ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `seed ⊕ fnv1a64(label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    seed ^ fnv1a64(label.as_bytes())
}

/// Project-wide generator: PCG64 (XSL-RR 128/64), seeded through
/// `SeedableRng::seed_from_u64`. Derived draws are defined here rather than
/// delegated to distribution crates so the stream is easy to reproduce
/// elsewhere.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Pcg64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection on the top of the u64 range.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller (cosine branch only).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, returned in ascending order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }
}
