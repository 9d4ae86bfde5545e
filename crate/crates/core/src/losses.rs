//! Training objectives of the flow.
//!
//! Batch losses are recorded on a [`Graph`]. Per-sample L1 losses are summed
//! over coordinates and averaged over the batch.

use crate::error::{Error, Result};
use crate::heatmap::{Cov2, SIGMA_GT};
use crate::ndcore::{Graph, Tensor, TensorError, Var};

type GResult<T> = std::result::Result<T, TensorError>;

/// Inverse multiquadric bandwidths.
pub const BANDWIDTHS: [f64; 3] = [0.0025, 0.04, 0.81];

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Weight of the adversarial term.
    pub gen: f64,
    pub mmd: f64,
    pub det: f64,
    pub mb: f64,
    pub hm: f64,
    /// Hypotheses averaged by `L_MB`.
    pub k: usize,
    /// Heatmap standard deviation (px) above which `L_HM` is active.
    pub sigma_t: f64,
    /// Pixel size used to convert hypothesis covariances.
    pub mm_per_px: f64,
    /// Unit of the heatmap covariance discrepancy entering the total, per px²
    /// (`1e-4` expresses it in m² at 10 mm per px).
    pub hm_unit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gen: 1.0, mmd: 10.0, det: 4.0, mb: 4.0, hm: 750.0, k: 5, sigma_t: 1.05 * SIGMA_GT, mm_per_px: 10.0, hm_unit: 1e-4 }
    }
}

impl LossWeights {
    /// `m² -> px²` factor for hypothesis covariances.
    pub fn px2_per_m2(&self) -> f64 {
        (1000.0 / self.mm_per_px).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gen, self.mmd, self.det, self.mb, self.hm, self.sigma_t, self.mm_per_px, self.hm_unit];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.k == 0 || !(self.mm_per_px > 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative, k and mm_per_px positive"));
        }
        Ok(())
    }
}

/// Mean over rows of `‖a_i - b_i‖₁`.
fn batch_l1(g: &mut Graph, a: Var, b: Var) -> GResult<Var> {
    let n = g.shape(a).first().copied().unwrap_or(1).max(1);
    let d = g.sub(a, b)?;
    let s = g.l1_norm(d)?;
    g.scale(s, 1.0 / n as f64)
}

/// `L_2D = ‖y - ŷ‖₁`, averaged over the batch.
pub fn l2d(g: &mut Graph, y: Var, y_hat: Var) -> GResult<Var> {
    batch_l1(g, y, y_hat)
}

/// `L_det = ‖x - x̂_det‖₁`, averaged over the batch.
pub fn l_det(g: &mut Graph, x: Var, x_det: Var) -> GResult<Var> {
    batch_l1(g, x, x_det)
}

/// `Σ_b b / (b + ‖v - v̂‖²)`.
pub fn imq_kernel(v: &[f64], v_hat: &[f64], bandwidths: &[f64]) -> f64 {
    let d2: f64 = v.iter().zip(v_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    bandwidths.iter().map(|b| b / (b + d2)).sum()
}

/// Kernel sum over the listed row pairs of `a` and `b`.
fn kernel_sum(g: &mut Graph, a: Var, b: Var, pairs: &[(usize, usize)], bandwidths: &[f64]) -> GResult<Var> {
    let ia: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ra = g.gather_rows(a, &ia)?;
    let rb = g.gather_rows(b, &ib)?;
    let diff = g.sub(ra, rb)?;
    let sq = g.square(diff)?;
    let d2 = g.row_sums(sq)?;
    let mut acc: Option<Var> = None;
    for &bw in bandwidths {
        let den = g.add_scalar(d2, bw)?;
        let r = g.recip(den)?;
        let k = g.scale(r, bw)?;
        let s = g.sum(k)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one bandwidth"))
}

/// Unbiased squared MMD between the row sets `v` and `v_hat` (both `[n, d]`).
///
/// To block gradients through part of `v_hat`, wrap that part in
/// [`Graph::stop_grad`] before concatenating.
pub fn mmd_unbiased(g: &mut Graph, v: Var, v_hat: Var, bandwidths: &[f64]) -> Result<Var> {
    let n = g.shape(v)[0];
    if g.shape(v) != g.shape(v_hat) {
        return Err(Error::invalid(format!("MMD sets differ in shape: {:?} vs {:?}", g.shape(v), g.shape(v_hat))));
    }
    if n < 2 {
        return Err(Error::invalid(format!("unbiased MMD needs at least 2 samples, got {n}")));
    }
    if bandwidths.is_empty() {
        return Err(Error::invalid("no kernel bandwidths"));
    }
    let off: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let kxx = kernel_sum(g, v, v, &off, bandwidths)?;
    let kyy = kernel_sum(g, v_hat, v_hat, &off, bandwidths)?;
    let kxy = kernel_sum(g, v, v_hat, &all, bandwidths)?;
    let nn1 = (n * (n - 1)) as f64;
    let a = g.add(kxx, kyy)?;
    let a = g.scale(a, 1.0 / nn1)?;
    let b = g.scale(kxy, 2.0 / (n * n) as f64)?;
    Ok(g.sub(a, b)?)
}

/// Tape-free value of [`mmd_unbiased`] on row sets.
pub fn mmd_unbiased_value(v: &[Vec<f64>], v_hat: &[Vec<f64>], bandwidths: &[f64]) -> Result<f64> {
    let n = v.len();
    if n != v_hat.len() || n < 2 {
        return Err(Error::invalid(format!("unbiased MMD needs two sets of equal size ≥ 2, got {n} and {}", v_hat.len())));
    }
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += imq_kernel(&v[i], &v[j], bandwidths);
                yy += imq_kernel(&v_hat[i], &v_hat[j], bandwidths);
            }
            xy += imq_kernel(&v[i], &v_hat[j], bandwidths);
        }
    }
    Ok((xx + yy) / (n * (n - 1)) as f64 - 2.0 * xy / (n * n) as f64)
}

/// Mean per-joint distance between two joint-major 3D poses (same units).
pub(crate) fn pose_mpjpe(a: &[f64], b: &[f64]) -> f64 {
    let j = a.len() / 3;
    a.chunks_exact(3)
        .zip(b.chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum::<f64>()
        / j.max(1) as f64
}

/// Indices of the `k` hypotheses with the lowest MPJPE to `x`; ties keep the
/// lower index first.
pub fn top_k(hyps: &[&[f64]], x: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > hyps.len() {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {}]", hyps.len())));
    }
    let err: Vec<f64> = hyps.iter().map(|h| pose_mpjpe(h, x)).collect();
    let mut idx: Vec<usize> = (0..hyps.len()).collect();
    idx.sort_by(|&a, &b| err[a].total_cmp(&err[b]));
    idx.truncate(k);
    Ok(idx)
}

/// `L_MB`: L1 distance between `x` and the mean of its `k` best hypotheses,
/// averaged over the batch.
///
/// `hyps` is `[n·L, D]` with the `L` hypotheses of sample `i` in rows
/// `i·L .. (i+1)·L`; `x` is `[n, D]`.
pub fn l_mb(g: &mut Graph, hyps: Var, x: &Tensor, l: usize, k: usize) -> Result<Var> {
    let (n, d) = x.dims2();
    if g.shape(hyps) != [n * l, d] {
        return Err(Error::invalid(format!("hypotheses {:?} do not match {n} samples x {l}", g.shape(hyps))));
    }
    let mut rows = Vec::with_capacity(n * k);
    {
        let h = g.value(hyps);
        for i in 0..n {
            let set: Vec<&[f64]> = (0..l).map(|j| h.row_slice(i * l + j)).collect();
            rows.extend(top_k(&set, x.row_slice(i), k)?.into_iter().map(|j| i * l + j));
        }
    }
    let picked = g.gather_rows(hyps, &rows)?;
    let mut avg = vec![0.0; n * n * k];
    for i in 0..n {
        for j in 0..k {
            avg[i * n * k + i * k + j] = 1.0 / k as f64;
        }
    }
    let avg = g.constant(Tensor::new(vec![n, n * k], avg)?);
    let mean = g.matmul(avg, picked)?;
    let xv = g.constant(x.clone());
    Ok(batch_l1(g, xv, mean)?)
}

/// `L_MB` for one hypothesis set.
pub fn l_mb_single(hyps: &[Vec<f64>], x: &[f64], k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let h = g.constant(Tensor::from_rows(hyps)?);
    let loss = l_mb(&mut g, h, &Tensor::row(x.to_vec()), hyps.len(), k)?;
    Ok(g.value(loss).item())
}

/// Per-sample, per-joint x/y covariance (unbiased) of the hypotheses, in px².
///
/// `hyps` is laid out as in [`l_mb`]. Returns `(Σ̂11, Σ̂12, Σ̂22)`, each `[n, J]`.
pub fn hypothesis_cov_px(g: &mut Graph, hyps: Var, n: usize, l: usize, px2_per_unit2: f64) -> Result<(Var, Var, Var)> {
    if l < 2 {
        return Err(Error::invalid("covariance needs at least 2 hypotheses"));
    }
    let d = g.shape(hyps)[1];
    if g.shape(hyps)[0] != n * l || d % 3 != 0 {
        return Err(Error::invalid(format!("hypotheses {:?} do not match {n} samples x {l}", g.shape(hyps))));
    }
    let j = d / 3;
    let mut group = vec![0.0; n * n * l];
    for i in 0..n {
        for h in 0..l {
            group[i * n * l + i * l + h] = 1.0;
        }
    }
    let group = g.constant(Tensor::new(vec![n, n * l], group)?);
    let sums = g.matmul(group, hyps)?;
    let means = g.scale(sums, 1.0 / l as f64)?;
    let spread = g.matmul_t(group, true, means, false)?;
    let centered = g.sub(hyps, spread)?;
    let xs: Vec<usize> = (0..j).map(|k| 3 * k).collect();
    let ys: Vec<usize> = (0..j).map(|k| 3 * k + 1).collect();
    let cx = g.gather_cols(centered, &xs)?;
    let cy = g.gather_cols(centered, &ys)?;
    let scale = px2_per_unit2 / (l - 1) as f64;
    let mut cov = |a: Var, b: Var| -> GResult<Var> {
        let p = g.mul(a, b)?;
        let s = g.matmul(group, p)?;
        g.scale(s, scale)
    };
    Ok((cov(cx, cx)?, cov(cx, cy)?, cov(cy, cy)?))
}

/// Mask of Eq. `m`: the joint is uncertain in at least one axis.
pub fn hm_mask(sigma: &Cov2, sigma_t: f64) -> bool {
    sigma.xx.sqrt() > sigma_t || sigma.yy.sqrt() > sigma_t
}

/// Masked lower-bound RMSE between a heatmap covariance and a hypothesis
/// covariance, both in px².
pub fn l_hm_value(sigma: &Cov2, sigma_hat: &Cov2, sigma_t: f64) -> f64 {
    if !hm_mask(sigma, sigma_t) {
        return 0.0;
    }
    let a = (sigma.xx - sigma_hat.xx).max(0.0);
    let b = (sigma.yy - sigma_hat.yy).max(0.0);
    let c = sigma.xy - sigma_hat.xy;
    (a * a + b * b + c * c).sqrt()
}

/// `L_HM` summed over joints and averaged over the batch.
///
/// `sigma` holds the fitted heatmap covariance of every joint of every sample
/// (`n·J` entries, sample-major); `hat` comes from [`hypothesis_cov_px`].
pub fn l_hm(g: &mut Graph, sigma: &[Cov2], hat: (Var, Var, Var), sigma_t: f64) -> Result<Var> {
    let shape = g.shape(hat.0).to_vec();
    let (n, j) = (shape[0], shape[1]);
    if sigma.len() != n * j {
        return Err(Error::invalid(format!("{} heatmap covariances for {n} x {j} joints", sigma.len())));
    }
    let field = |f: fn(&Cov2) -> f64| Tensor::new(vec![n, j], sigma.iter().map(f).collect());
    let sxx = g.constant(field(|c| c.xx)?);
    let sxy = g.constant(field(|c| c.xy)?);
    let syy = g.constant(field(|c| c.yy)?);
    let mask = Tensor::new(vec![n, j], sigma.iter().map(|c| if hm_mask(c, sigma_t) { 1.0 } else { 0.0 }).collect())?;
    let mask = g.constant(mask);
    let dxx = g.sub(sxx, hat.0)?;
    let dxx = g.max0(dxx)?;
    let dyy = g.sub(syy, hat.2)?;
    let dyy = g.max0(dyy)?;
    let dxy = g.sub(sxy, hat.1)?;
    let a = g.square(dxx)?;
    let b = g.square(dyy)?;
    let c = g.square(dxy)?;
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    let r = g.sqrt(s)?;
    let r = g.mul(r, mask)?;
    let total = g.sum(r)?;
    Ok(g.scale(total, 1.0 / n.max(1) as f64)?)
}

/// The six loss terms of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub l2d: Var,
    pub gen: Var,
    pub mmd: Var,
    pub det: Var,
    pub mb: Var,
    pub hm: Var,
}

/// `L_2D + λ_gen L_gen + λ_MMD L_MMD + λ_det L_det + λ_MB L_MB + λ_HM L_HM`.
pub fn total_nf_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> GResult<Var> {
    let mut acc = parts.l2d;
    for (v, weight) in [(parts.gen, w.gen), (parts.mmd, w.mmd), (parts.det, w.det), (parts.mb, w.mb), (parts.hm, w.hm)] {
        let t = g.scale(v, weight)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn l2d_examples() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::row(vec![0.5; 32]));
        let yh = g.constant(Tensor::row(vec![0.6; 32]));
        let l = l2d(&mut g, y, yh).unwrap();
        assert!((g.value(l).item() - 3.2).abs() < 1e-12);
        let l0 = l2d(&mut g, y, y).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let ls = l2d(&mut g, yh, y).unwrap();
        assert_eq!(g.value(ls).item(), g.value(l).item());
    }

    #[test]
    fn l_det_offset() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0; 48]));
        let xh = g.constant(Tensor::row(vec![1.0; 48]));
        let l = l_det(&mut g, x, xh).unwrap();
        assert_eq!(g.value(l).item(), 48.0);
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(imq_kernel(&[1.0, 2.0], &[1.0, 2.0], &BANDWIDTHS), 3.0);
        assert!((imq_kernel(&[0.2], &[0.0], &[0.04]) - 0.5).abs() < 1e-15);
        assert!(imq_kernel(&[0.0], &[1.0], &BANDWIDTHS) > imq_kernel(&[0.0], &[2.0], &BANDWIDTHS));
    }

    #[test]
    fn mmd_small_case_and_errors() {
        // n = 2, 1-dim, S = {1}, V = V̂ = {0, 1}:
        // xx = yy = 2·k(0,1)/2 = 0.5, xy = (1 + 0.5 + 0.5 + 1)/4 = 0.75.
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let m = mmd_unbiased(&mut g, v, v, &[1.0]).unwrap();
        assert!((g.value(m).item() - (0.5 + 0.5 - 1.5)).abs() < 1e-15);
        let one = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        assert!(mmd_unbiased(&mut g, one, one, &[1.0]).is_err());
    }

    #[test]
    fn mmd_blocked_y_has_zero_grad() {
        let mut r = rng::stream(1, "mmd", 0);
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![6, 4], rng::normals(&mut r, 24)).unwrap());
        let y = g.param(Tensor::new(vec![6, 2], rng::normals(&mut r, 12)).unwrap());
        let z = g.param(Tensor::new(vec![6, 2], rng::normals(&mut r, 12)).unwrap());
        let ys = g.stop_grad(y).unwrap();
        let vh = g.concat(&[ys, z]).unwrap();
        let m = mmd_unbiased(&mut g, v, vh, &BANDWIDTHS).unwrap();
        let grads = g.backward(m).unwrap();
        assert!(grads.get(y).data().iter().all(|&v| v == 0.0));
        assert!(grads.get(z).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn l_mb_reductions_and_ties() {
        let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let d = vec![0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
        let plus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - b).collect();
        let h = vec![plus.clone(), x.clone(), minus.clone()];
        // k = 1 picks the exact pose.
        assert_eq!(l_mb_single(&h, &x, 1).unwrap(), 0.0);
        // k = 2: x first, then the tie between +δ and -δ goes to the lower index.
        assert_eq!(top_k(&h.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &x, 2).unwrap(), vec![1, 0]);
        assert!((l_mb_single(&h, &x, 2).unwrap() - 0.05).abs() < 1e-15);
        // k = |H|: the plain mean is x itself.
        assert!(l_mb_single(&h, &x, 3).unwrap().abs() < 1e-15);
        assert!(l_mb_single(&h, &x, 4).is_err());
    }

    #[test]
    fn l_hm_examples() {
        let t = 2.1;
        assert_eq!(l_hm_value(&Cov2::isotropic(2.0), &Cov2::isotropic(0.0), t), 0.0);
        let nine = Cov2 { xx: 9.0, xy: 0.0, yy: 9.0 };
        assert_eq!(l_hm_value(&nine, &Cov2 { xx: 16.0, xy: 0.0, yy: 16.0 }, t), 0.0);
        let v = l_hm_value(&nine, &Cov2 { xx: 4.0, xy: 0.0, yy: 4.0 }, t);
        assert!((v - 50f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn l_hm_graph_matches_scalar() {
        let mut r = rng::stream(2, "hm", 0);
        let (n, l, j) = (2, 5, 3);
        let mut g = Graph::new();
        let hyps = g.param(Tensor::new(vec![n * l, 3 * j], rng::normals(&mut r, n * l * 3 * j)).unwrap());
        let hat = hypothesis_cov_px(&mut g, hyps, n, l, 4.0).unwrap();
        let sigma: Vec<Cov2> = (0..n * j).map(|i| Cov2::from_std(1.0 + i as f64, 3.0, 0.2)).collect();
        let loss = l_hm(&mut g, &sigma, hat, 2.1).unwrap();
        let h = g.value(hyps).clone();
        let mut expected = 0.0;
        for i in 0..n {
            for jj in 0..j {
                let col = |a: usize| -> Vec<f64> { (0..l).map(|k| h.at(i * l + k, 3 * jj + a)).collect() };
                let (xs, ys) = (col(0), col(1));
                let mx = xs.iter().sum::<f64>() / l as f64;
                let my = ys.iter().sum::<f64>() / l as f64;
                let c = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
                    4.0 * a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / (l - 1) as f64
                };
                let hat = Cov2 { xx: c(&xs, mx, &xs, mx), xy: c(&xs, mx, &ys, my), yy: c(&ys, my, &ys, my) };
                expected += l_hm_value(&sigma[i * j + jj], &hat, 2.1);
            }
        }
        assert!((g.value(loss).item() - expected / n as f64).abs() < 1e-10);
    }

    #[test]
    fn total_weights() {
        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let parts = LossParts { l2d: one, gen: one, mmd: one, det: one, mb: one, hm: one };
        let t = total_nf_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 770.0);
        let zero = g.scalar(0.0);
        let parts = LossParts { l2d: zero, gen: zero, mmd: zero, det: zero, mb: zero, hm: zero };
        let t = total_nf_loss(&mut g, &parts, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
    }
}
