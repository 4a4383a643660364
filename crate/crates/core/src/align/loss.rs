//! Contrastive objectives over aligned patch features and frozen prototypes,
//! each returning the loss and its exact gradient with respect to the patch
//! features.
//!
//! With `n` labeled patches `z_i` (labels `y_i`), `K` prototypes `t_k`, `N_k`
//! patches of class `k` and `N⁺_i = N_{y_i} − 1`:
//!
//! ```text
//! ℓ_t(z_i)  = −z_i·t_{y_i} + log( Σ_k exp(z_i·t_k) + Σ_{j≠i} exp(z_i·z_j) )
//! ℓ_t(t_k)  = (1/N_k) Σ_{i: y_i=k} ℓ_t(z_i)
//! ℓ_im(z_i) = (1/N⁺_i) Σ_{l≠i, y_l=y_i} ( −z_i·z_l + log Σ_{j≠i} exp(z_i·z_j) )   (0 if N⁺_i = 0)
//!
//! tsupcon   = ( Σ_k ℓ_t(t_k) + Σ_i ℓ_im(z_i) ) / (n + K)
//! prototype = ( Σ_k ℓ_t(t_k) ) / (n + K)
//! supcon    = SupCon over the pooled set {z_i} ∪ {t_k}, t_k labelled k, / (n + K)
//! ```
//!
//! All similarities are divided by the temperature (1 by default).
//! Every term is a function of the similarity matrices `S = Z·Zᵀ/τ` and
//! `P = Z·Tᵀ/τ`, so gradients are assembled as `dZ = ((G + Gᵀ)·Z + H·T)/τ`
//! from per-row partials `G = ∂L/∂S`, `H = ∂L/∂P`. Rows are evaluated in
//! parallel but every reduction runs in a fixed order, so results do not
//! depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Tsupcon,
    Supcon,
    Prototype,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    /// `n × D` aligned patch features (labeled patches only).
    pub features: &'a Tensor2D,
    pub labels: &'a [u32],
    /// `K × D` frozen prototypes.
    pub prototypes: &'a Tensor2D,
    pub temperature: f64,
}

impl<'a> LossBatch<'a> {
    pub fn new(features: &'a Tensor2D, labels: &'a [u32], prototypes: &'a Tensor2D) -> Self {
        Self {
            features,
            labels,
            prototypes,
            temperature: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, d) = self.features.shape();
        let k = self.prototypes.rows();
        if n == 0 {
            return Err(Error::domain("loss batch has no patches"));
        }
        if k == 0 {
            return Err(Error::domain("loss batch has no prototypes"));
        }
        if self.labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} patches", self.labels.len())));
        }
        if self.prototypes.cols() != d {
            return Err(Error::shape(format!(
                "patch dim {d} vs prototype dim {}",
                self.prototypes.cols()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::domain(format!("label {bad} >= {k} prototypes")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::domain(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::NonFinite("non-finite patch features entering the loss".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `∂loss/∂features`, same shape as the features.
    pub grad: Tensor2D,
}

pub fn loss(kind: LossKind, batch: &LossBatch<'_>) -> Result<LossOutput> {
    match kind {
        LossKind::Tsupcon => tsupcon_loss(batch),
        LossKind::Supcon => supcon_loss(batch),
        LossKind::Prototype => prototype_loss(batch),
    }
}

pub fn tsupcon_loss(batch: &LossBatch<'_>) -> Result<LossOutput> {
    text_anchored(batch, true)
}

pub fn prototype_loss(batch: &LossBatch<'_>) -> Result<LossOutput> {
    text_anchored(batch, false)
}

/// Loss contribution of one anchor row plus its partials.
struct RowTerms {
    loss: f64,
    /// `∂L/∂S[i, ·]`
    g: Vec<f64>,
    /// `∂L/∂P[i, ·]`
    h: Vec<f64>,
}

fn class_counts(labels: &[u32], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y as usize] += 1;
    }
    counts
}

/// Supervised-contrastive term for anchor `i` over similarities `s`
/// (`s[i]` ignored): `log Σ_{j≠i} exp(s_j) − mean_{l∈pos} s_l`, scaled by
/// `weight`, with partials accumulated into `g`. Returns the scaled loss;
/// zero when the anchor has no positives.
fn supcon_anchor(s: &[f64], i: usize, labels: &[u32], weight: f64, g: &mut [f64]) -> f64 {
    let yi = labels[i];
    let n_pos = labels.iter().enumerate().filter(|&(j, &y)| j != i && y == yi).count();
    if n_pos == 0 {
        return 0.0;
    }
    let m = s
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .fold(f64::NEG_INFINITY, |acc, (_, &v)| acc.max(v));
    let mut denom = 0.0;
    let mut pos_sum = 0.0;
    for (j, &v) in s.iter().enumerate() {
        if j == i {
            continue;
        }
        denom += (v - m).exp();
        if labels[j] == yi {
            pos_sum += v;
        }
    }
    let lse = m + denom.ln();
    let inv_pos = 1.0 / n_pos as f64;
    for (j, &v) in s.iter().enumerate() {
        if j == i {
            continue;
        }
        let positive = if labels[j] == yi { inv_pos } else { 0.0 };
        g[j] += weight * ((v - lse).exp() - positive);
    }
    weight * (lse - pos_sum * inv_pos)
}

fn text_anchored(batch: &LossBatch<'_>, with_patch_term: bool) -> Result<LossOutput> {
    batch.validate()?;
    let z = batch.features;
    let t = batch.prototypes;
    let labels = batch.labels;
    let (n, _) = z.shape();
    let k = t.rows();
    let inv_tau = 1.0 / batch.temperature;
    let counts = class_counts(labels, k);
    let norm = 1.0 / (n + k) as f64;

    let rows: Vec<RowTerms> = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = z.row(i);
            let s: Vec<f64> = (0..n).map(|j| dot(zi, z.row(j)) * inv_tau).collect();
            let p: Vec<f64> = (0..k).map(|c| dot(zi, t.row(c)) * inv_tau).collect();
            let yi = labels[i] as usize;
            let mut g = vec![0.0; n];
            let mut h = vec![0.0; k];

            // patch–text term, weighted by 1/N_{y_i}
            let m = s
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .chain(p.iter().copied())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom: f64 = p.iter().map(|&v| (v - m).exp()).sum();
            for (j, &v) in s.iter().enumerate() {
                if j != i {
                    denom += (v - m).exp();
                }
            }
            let lse = m + denom.ln();
            let ci = norm / counts[yi] as f64;
            let mut loss = ci * (lse - p[yi]);
            for (c, hc) in h.iter_mut().enumerate() {
                let target = if c == yi { 1.0 } else { 0.0 };
                *hc = ci * ((p[c] - lse).exp() - target);
            }
            for (j, gj) in g.iter_mut().enumerate() {
                if j != i {
                    *gj += ci * (s[j] - lse).exp();
                }
            }

            if with_patch_term {
                loss += supcon_anchor(&s, i, labels, norm, &mut g);
            }
            RowTerms { loss, g, h }
        })
        .collect();

    let total: f64 = rows.iter().map(|r| r.loss).sum();
    let grad = assemble_grad(z, Some(t), &rows, inv_tau, n)?;
    finish(total, grad)
}

pub fn supcon_loss(batch: &LossBatch<'_>) -> Result<LossOutput> {
    batch.validate()?;
    let z = batch.features;
    let t = batch.prototypes;
    let (n, _) = z.shape();
    let k = t.rows();
    let inv_tau = 1.0 / batch.temperature;
    let pooled = Tensor2D::vstack(&[z, t])?;
    let labels: Vec<u32> = batch.labels.iter().copied().chain(0..k as u32).collect();
    let m = n + k;
    let norm = 1.0 / m as f64;

    let rows: Vec<RowTerms> = (0..m)
        .into_par_iter()
        .map(|a| {
            let ua = pooled.row(a);
            let s: Vec<f64> = (0..m).map(|b| dot(ua, pooled.row(b)) * inv_tau).collect();
            let mut g = vec![0.0; m];
            let loss = supcon_anchor(&s, a, &labels, norm, &mut g);
            RowTerms { loss, g, h: Vec::new() }
        })
        .collect();

    let total: f64 = rows.iter().map(|r| r.loss).sum();
    let full = assemble_grad(&pooled, None, &rows, inv_tau, m)?;
    let grad = Tensor2D::from_vec(n, z.cols(), full.data()[..n * z.cols()].to_vec())?;
    finish(total, grad)
}

/// `((G + Gᵀ)·X + H·T) / τ`, computed row-parallel with fixed-order sums.
fn assemble_grad(x: &Tensor2D, t: Option<&Tensor2D>, rows: &[RowTerms], inv_tau: f64, m: usize) -> Result<Tensor2D> {
    let d = x.cols();
    let out: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; d];
            for j in 0..m {
                let c = rows[i].g[j] + rows[j].g[i];
                if c != 0.0 {
                    acc.iter_mut().zip(x.row(j)).for_each(|(a, v)| *a += c * v);
                }
            }
            if let Some(t) = t {
                for (c, &hc) in rows[i].h.iter().enumerate() {
                    acc.iter_mut().zip(t.row(c)).for_each(|(a, v)| *a += hc * v);
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv_tau);
            acc
        })
        .collect();
    Tensor2D::from_vec(m, d, out.into_iter().flatten().collect())
}

fn finish(total: f64, grad: Tensor2D) -> Result<LossOutput> {
    if !total.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {total}")));
    }
    Ok(LossOutput { loss: total, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize_rows, SeededRng};

    /// Direct transcription of the formulas with plain exp/log, no shared helpers.
    fn brute_force(z: &Tensor2D, y: &[u32], t: &Tensor2D, kind: LossKind) -> f64 {
        let n = z.rows();
        let k = t.rows();
        let d = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        if kind == LossKind::Supcon {
            let mut u: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).to_vec()).collect();
            let mut lab = y.to_vec();
            for c in 0..k {
                u.push(t.row(c).to_vec());
                lab.push(c as u32);
            }
            let mut total = 0.0;
            for a in 0..u.len() {
                let pos: Vec<usize> = (0..u.len()).filter(|&b| b != a && lab[b] == lab[a]).collect();
                if pos.is_empty() {
                    continue;
                }
                let mut den = 0.0;
                for b in 0..u.len() {
                    if b != a {
                        den += d(&u[a], &u[b]).exp();
                    }
                }
                let mut s = 0.0;
                for &p in &pos {
                    s += -(d(&u[a], &u[p]).exp() / den).ln();
                }
                total += s / pos.len() as f64;
            }
            return total / (n + k) as f64;
        }
        let mut sum_t = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| y[i] as usize == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut acc = 0.0;
            for &i in &members {
                let mut den = 0.0;
                for cc in 0..k {
                    den += d(z.row(i), t.row(cc)).exp();
                }
                for j in 0..n {
                    if j != i {
                        den += d(z.row(i), z.row(j)).exp();
                    }
                }
                acc += -d(z.row(i), t.row(c)) + den.ln();
            }
            sum_t += acc / members.len() as f64;
        }
        let mut sum_im = 0.0;
        if kind == LossKind::Tsupcon {
            for i in 0..n {
                let pos: Vec<usize> = (0..n).filter(|&l| l != i && y[l] == y[i]).collect();
                if pos.is_empty() {
                    continue;
                }
                let mut den = 0.0;
                for j in 0..n {
                    if j != i {
                        den += d(z.row(i), z.row(j)).exp();
                    }
                }
                let mut acc = 0.0;
                for &l in &pos {
                    acc += -d(z.row(i), z.row(l)) + den.ln();
                }
                sum_im += acc / pos.len() as f64;
            }
        }
        (sum_t + sum_im) / (n + k) as f64
    }

    fn fixture(seed: u64, n: usize, k: usize, d: usize) -> (Tensor2D, Vec<u32>, Tensor2D) {
        let mut rng = SeededRng::new(seed);
        let z = Tensor2D::from_vec(n, d, (0..n * d).map(|_| rng.gaussian()).collect()).unwrap();
        let t = Tensor2D::from_vec(k, d, (0..k * d).map(|_| rng.gaussian()).collect()).unwrap();
        let y = (0..n)
            .map(|i| if i < k { i as u32 } else { rng.below(k as u64) as u32 })
            .collect();
        (l2_normalize_rows(&z).unwrap(), y, l2_normalize_rows(&t).unwrap())
    }

    const E: f64 = std::f64::consts::E;

    #[test]
    fn single_patch_on_its_prototype_is_zero() {
        let z = Tensor2D::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = tsupcon_loss(&LossBatch::new(&z, &[0], &z)).unwrap();
        assert!(out.loss.abs() < 1e-15);
        let out = supcon_loss(&LossBatch::new(&z, &[0], &z)).unwrap();
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn two_orthogonal_patches_one_class() {
        // z1·z2 = 0 and z_i·t = 1 only fixes similarities, so the fixture
        // uses a non-unit prototype
        let z = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t = Tensor2D::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let expected = (-1.0 + (E + 1.0).ln()) / 3.0;
        assert!((expected - 0.104_421).abs() < 5e-7);
        let out = tsupcon_loss(&LossBatch::new(&z, &[0, 0], &t)).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
        let proto = prototype_loss(&LossBatch::new(&z, &[0, 0], &t)).unwrap();
        assert!((proto.loss - brute_force(&z, &[0, 0], &t, LossKind::Prototype)).abs() < 1e-12);
        assert!((proto.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn two_patches_two_classes() {
        let z = Tensor2D::identity(2);
        let out = tsupcon_loss(&LossBatch::new(&z, &[0, 1], &z)).unwrap();
        let expected = 2.0 * (-1.0 + (E + 2.0).ln()) / 4.0;
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.275_722).abs() < 5e-7);
        let proto = prototype_loss(&LossBatch::new(&z, &[0, 1], &z)).unwrap();
        assert!((proto.loss - out.loss).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..20 {
            let (z, y, t) = fixture(seed, 7, 3, 5);
            for kind in [LossKind::Tsupcon, LossKind::Supcon, LossKind::Prototype] {
                let got = loss(kind, &LossBatch::new(&z, &y, &t)).unwrap().loss;
                let want = brute_force(&z, &y, &t, kind);
                assert!((got - want).abs() < 1e-10, "{kind:?} seed {seed}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let (z, y, t) = fixture(99, 6, 3, 4);
        for kind in [LossKind::Tsupcon, LossKind::Supcon, LossKind::Prototype] {
            let out = loss(kind, &LossBatch::new(&z, &y, &t)).unwrap();
            let eps = 1e-5;
            for idx in 0..z.data().len() {
                let mut zp = z.clone();
                zp.data_mut()[idx] += eps;
                let mut zm = z.clone();
                zm.data_mut()[idx] -= eps;
                let fp = loss(kind, &LossBatch::new(&zp, &y, &t)).unwrap().loss;
                let fm = loss(kind, &LossBatch::new(&zm, &y, &t)).unwrap().loss;
                let num = (fp - fm) / (2.0 * eps);
                let ana = out.grad.data()[idx];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4, "{kind:?}[{idx}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn temperature_divides_similarities() {
        // tau = 1/2 doubles every similarity, as does scaling z and t by sqrt(2)
        let (z, y, t) = fixture(5, 5, 2, 3);
        let mut b = LossBatch::new(&z, &y, &t);
        b.temperature = 0.5;
        let hot = tsupcon_loss(&b).unwrap().loss;
        let zs = Tensor2D::from_vec(5, 3, z.data().iter().map(|v| v * 2f64.sqrt()).collect()).unwrap();
        let ts = Tensor2D::from_vec(2, 3, t.data().iter().map(|v| v * 2f64.sqrt()).collect()).unwrap();
        let scaled = brute_force(&zs, &y, &ts, LossKind::Tsupcon);
        assert!((hot - scaled).abs() < 1e-10);
    }

    #[test]
    fn invariant_under_patch_reordering_and_relabeling() {
        let (z, y, t) = fixture(21, 8, 3, 4);
        let base = tsupcon_loss(&LossBatch::new(&z, &y, &t)).unwrap().loss;
        let order = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let zr = z.select_rows(&order);
        let yr: Vec<u32> = order.iter().map(|&i| y[i]).collect();
        let reordered = tsupcon_loss(&LossBatch::new(&zr, &yr, &t)).unwrap().loss;
        assert!((base - reordered).abs() < 1e-12);
        // class k becomes perm[k]
        let perm = [2u32, 0, 1];
        let mut tp = Tensor2D::zeros(3, 4);
        for (k, &pk) in perm.iter().enumerate() {
            tp.row_mut(pk as usize).copy_from_slice(t.row(k));
        }
        let yp: Vec<u32> = y.iter().map(|&l| perm[l as usize]).collect();
        let relabeled = tsupcon_loss(&LossBatch::new(&z, &yp, &tp)).unwrap().loss;
        assert!((base - relabeled).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_batches() {
        let t = Tensor2D::identity(2);
        let empty = Tensor2D::zeros(0, 2);
        assert!(tsupcon_loss(&LossBatch::new(&empty, &[], &t)).is_err());
        let z = Tensor2D::identity(2);
        let none = Tensor2D::zeros(0, 2);
        assert!(tsupcon_loss(&LossBatch::new(&z, &[0, 1], &none)).is_err());
        assert!(tsupcon_loss(&LossBatch::new(&z, &[0, 2], &t)).is_err());
    }
}
