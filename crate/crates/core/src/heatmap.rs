//! Heatmap uncertainty: 2D Gaussian fitting and the condition vector.
//!
//! Each joint heatmap is summarized by a scaled Gaussian
//! `A * exp(-0.5 (p - μ)ᵀ Σ⁻¹ (p - μ))` fitted by Levenberg–Marquardt. The
//! covariance is optimized through its Cholesky factor so every iterate stays
//! symmetric positive definite. The per-joint coefficients, minus the three
//! hip joints, are stacked into the condition vector fed to the flow.

use std::path::Path;

use nalgebra::{Matrix6, Vector6};

use crate::binio::{Reader, Writer};
use crate::error::{Error, FormatError, Result};

/// Ground-truth heatmap standard deviation (px).
pub const SIGMA_GT: f64 = 2.0;
/// Standard deviation above which a sample counts as ambiguous (px).
pub const AMBIGUITY_THRESHOLD_PX: f64 = 5.0;
/// Smallest eigenvalue kept when projecting a fitted covariance (px²).
pub const EIGEN_FLOOR: f64 = 1e-4;
/// Relative RMS residual above which a fit is flagged as not Gaussian-shaped.
pub const HIGH_RESIDUAL: f64 = 0.1;

/// Symmetric 2x2 covariance in px².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn isotropic(sigma: f64) -> Self {
        Self { xx: sigma * sigma, xy: 0.0, yy: sigma * sigma }
    }

    pub fn from_std(sx: f64, sy: f64, rho: f64) -> Self {
        Self { xx: sx * sx, xy: rho * sx * sy, yy: sy * sy }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_spd(&self) -> bool {
        self.xx > 0.0 && self.det() > 0.0 && self.xx.is_finite() && self.yy.is_finite() && self.xy.is_finite()
    }

    pub fn std_x(&self) -> f64 {
        self.xx.max(0.0).sqrt()
    }

    pub fn std_y(&self) -> f64 {
        self.yy.max(0.0).sqrt()
    }

    /// Lower Cholesky factor `(a, b, c)` with `Σ = [[a, 0], [b, c]] [[a, b], [0, c]]`.
    pub fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !self.is_spd() {
            return None;
        }
        let a = self.xx.sqrt();
        let b = self.xy / a;
        let c = (self.yy - b * b).sqrt();
        Some((a, b, c))
    }

    pub fn from_cholesky(a: f64, b: f64, c: f64) -> Self {
        Self { xx: a * a, xy: a * b, yy: b * b + c * c }
    }

    /// Eigenvalues `(λ_max, λ_min)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.xx + self.yy;
        let disc = ((self.xx - self.yy).powi(2) / 4.0 + self.xy * self.xy).sqrt();
        (tr / 2.0 + disc, tr / 2.0 - disc)
    }

    /// Clamp eigenvalues to at least `floor`.
    pub fn project_spd(&self, floor: f64) -> Self {
        let (l1, l2) = self.eigenvalues();
        if l2 >= floor {
            return *self;
        }
        // Eigenvector of l1.
        let (vx, vy) = if self.xy.abs() > 1e-300 {
            (l1 - self.yy, self.xy)
        } else if self.xx >= self.yy {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let n = (vx * vx + vy * vy).sqrt();
        let (ux, uy) = (vx / n, vy / n);
        let (l1, l2) = (l1.max(floor), l2.max(floor));
        // Σ = l1 u uᵀ + l2 u⊥ u⊥ᵀ
        Self {
            xx: l1 * ux * ux + l2 * uy * uy,
            xy: (l1 - l2) * ux * uy,
            yy: l1 * uy * uy + l2 * ux * ux,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapGaussian {
    pub amplitude: f64,
    /// `(μx, μy)` in px; x is the column, y the row.
    pub mean: [f64; 2],
    pub cov: Cov2,
}

impl HeatmapGaussian {
    /// Initial guess for a joint detected at `mean`: unit amplitude and the
    /// ground-truth heatmap variance on both axes.
    pub fn initial(mean: [f64; 2]) -> Self {
        Self { amplitude: 1.0, mean, cov: Cov2::isotropic(SIGMA_GT) }
    }

    /// `[A, μx, μy, Σ11, Σ12, Σ22]`.
    pub fn coefficients(&self) -> [f64; 6] {
        [self.amplitude, self.mean[0], self.mean[1], self.cov.xx, self.cov.xy, self.cov.yy]
    }

    pub fn from_coefficients(c: &[f64]) -> Self {
        Self { amplitude: c[0], mean: [c[1], c[2]], cov: Cov2 { xx: c[3], xy: c[4], yy: c[5] } }
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let det = self.cov.det();
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let q = (self.cov.yy * dx * dx - 2.0 * self.cov.xy * dx * dy + self.cov.xx * dy * dy) / det;
        self.amplitude * (-0.5 * q).exp()
    }
}

/// Row-major grid of non-negative responses; pixel `(col, row)` is sampled
/// at coordinates `(col, row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Position and value of the maximum.
    pub fn argmax(&self) -> ([f64; 2], f64) {
        let (i, &v) = self
            .values
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        ([(i % self.width) as f64, (i / self.width) as f64], v)
    }

    pub fn add(&mut self, other: &Heatmap) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Render `g` on a `width x height` grid.
pub fn synthesize_heatmap(g: &HeatmapGaussian, width: usize, height: usize) -> Result<Heatmap> {
    synthesize_window(g, width, height, [0.0, 0.0], true)
}

/// Render `g` on a window whose pixel `(0, 0)` sits at image position `origin`.
pub(crate) fn synthesize_window(
    g: &HeatmapGaussian,
    width: usize,
    height: usize,
    origin: [f64; 2],
    require_inside: bool,
) -> Result<Heatmap> {
    if !g.cov.is_spd() {
        return Err(Error::invalid(format!("heatmap covariance is not SPD: {:?}", g.cov)));
    }
    let (mx, my) = (g.mean[0] - origin[0], g.mean[1] - origin[1]);
    if require_inside && !(mx >= 0.0 && my >= 0.0 && mx <= (width - 1) as f64 && my <= (height - 1) as f64) {
        return Err(Error::invalid(format!("mean {:?} outside a {width}x{height} heatmap", g.mean)));
    }
    let local = HeatmapGaussian { mean: [mx, my], ..*g };
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            values.push(local.value_at(col as f64, row as f64));
        }
    }
    Ok(Heatmap { width, height, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFit {
    pub gaussian: HeatmapGaussian,
    /// `sqrt(Σ r² / Σ h²)` at the returned parameters.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The map is poorly explained by a single Gaussian (e.g. multimodal).
    pub high_residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub rel_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 200, rel_tolerance: 1e-8, initial_damping: 1e-3 }
    }
}

// Parameters: [A, μx, μy, a, b, c] with Σ = L Lᵀ, L = [[a, 0], [b, c]].
fn params_of(g: &HeatmapGaussian) -> Option<[f64; 6]> {
    let (a, b, c) = g.cov.cholesky()?;
    Some([g.amplitude, g.mean[0], g.mean[1], a, b, c])
}

fn gaussian_of(p: &[f64; 6]) -> HeatmapGaussian {
    HeatmapGaussian { amplitude: p[0], mean: [p[1], p[2]], cov: Cov2::from_cholesky(p[3], p[4], p[5]) }
}

fn cost(hm: &Heatmap, p: &[f64; 6]) -> f64 {
    let [amp, mx, my, a, b, c] = *p;
    let mut s = 0.0;
    for row in 0..hm.height {
        let dy = row as f64 - my;
        for col in 0..hm.width {
            let dx = col as f64 - mx;
            let w1 = dx / a;
            let w2 = (dy - b * w1) / c;
            let r = amp * (-0.5 * (w1 * w1 + w2 * w2)).exp() - hm.values[row * hm.width + col];
            s += r * r;
        }
    }
    s
}

/// Normal equations `JᵀJ`, `Jᵀr` and the cost at `p`.
fn normal_equations(hm: &Heatmap, p: &[f64; 6]) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let [amp, mx, my, a, b, c] = *p;
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut total = 0.0;
    for row in 0..hm.height {
        let dy = row as f64 - my;
        for col in 0..hm.width {
            let dx = col as f64 - mx;
            let w1 = dx / a;
            let w2 = (dy - b * w1) / c;
            let e = (-0.5 * (w1 * w1 + w2 * w2)).exp();
            let model = amp * e;
            let r = model - hm.values[row * hm.width + col];
            total += r * r;
            // ∂q/∂θ for q = w1² + w2², then ∂model/∂θ = -½ A e ∂q/∂θ.
            let dq_dmx = -2.0 * w1 / a + 2.0 * w2 * b / (a * c);
            let dq_dmy = -2.0 * w2 / c;
            let dq_da = -2.0 * w1 * w1 / a + 2.0 * w2 * b * w1 / (a * c);
            let dq_db = -2.0 * w2 * w1 / c;
            let dq_dc = -2.0 * w2 * w2 / c;
            let k = -0.5 * model;
            let jrow = Vector6::new(e, k * dq_dmx, k * dq_dmy, k * dq_da, k * dq_db, k * dq_dc);
            jtj += jrow * jrow.transpose();
            jtr += jrow * r;
        }
    }
    (jtj, jtr, total)
}

/// Levenberg–Marquardt fit of one Gaussian to `hm`, starting from `init`.
///
/// Damping starts at `options.initial_damping`, is multiplied by 10 after a
/// rejected step and divided by 10 after an accepted one. The fit stops when
/// an accepted step lowers the cost by less than `rel_tolerance` (relative),
/// when no step can lower it further, or after `max_iterations`; in the last
/// case the best iterate is returned with `converged == false`.
pub fn fit_gaussian(hm: &Heatmap, init: &HeatmapGaussian) -> Result<GaussianFit> {
    fit_gaussian_with(hm, init, &FitOptions::default())
}

pub fn fit_gaussian_with(hm: &Heatmap, init: &HeatmapGaussian, options: &FitOptions) -> Result<GaussianFit> {
    if hm.values.len() != hm.width * hm.height || hm.values.is_empty() {
        return Err(Error::invalid("heatmap size does not match its dimensions"));
    }
    let energy: f64 = hm.values.iter().map(|v| v * v).sum();
    if !(hm.values.iter().any(|&v| v > 0.0)) || !energy.is_finite() {
        return Err(Error::invalid("heatmap has no positive response to fit"));
    }
    let mut p = params_of(init).ok_or_else(|| Error::invalid("initial covariance is not SPD"))?;
    let mut lambda = options.initial_damping;
    let mut current = cost(hm, &p);
    let mut converged = false;
    let mut iterations = 0;
    let (mut jtj, mut jtr, _) = normal_equations(hm, &p);
    while iterations < options.max_iterations {
        iterations += 1;
        if current <= 1e-28 * energy {
            converged = true;
            break;
        }
        let mut damped = jtj;
        for i in 0..6 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-jtr)),
            None => {
                lambda *= 10.0;
                continue;
            }
        };
        let mut trial = p;
        for i in 0..6 {
            trial[i] += step[i];
        }
        let valid = trial[3].abs() > 1e-9 && trial[5].abs() > 1e-9 && trial.iter().all(|v| v.is_finite());
        let trial_cost = if valid { cost(hm, &trial) } else { f64::INFINITY };
        if trial_cost < current {
            let decrease = (current - trial_cost) / current;
            p = trial;
            current = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if decrease < options.rel_tolerance {
                converged = true;
                break;
            }
            (jtj, jtr, _) = normal_equations(hm, &p);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // No direction lowers the cost: stationary point.
                converged = true;
                break;
            }
        }
    }
    let mut gaussian = gaussian_of(&p);
    gaussian.cov = gaussian.cov.project_spd(EIGEN_FLOOR);
    let residual = (current / energy).sqrt();
    if !converged {
        log::warn!("gaussian fit did not converge after {iterations} iterations (residual {residual:.3e})");
    }
    Ok(GaussianFit { gaussian, residual, iterations, converged, high_residual: residual > HIGH_RESIDUAL })
}

/// Fit a joint observed in a window whose pixel `(0, 0)` is at `origin`.
pub(crate) fn fit_window(hm: &Heatmap, origin: [f64; 2], init_mean: [f64; 2]) -> Result<GaussianFit> {
    let init = HeatmapGaussian::initial([init_mean[0] - origin[0], init_mean[1] - origin[1]]);
    let mut fit = fit_gaussian(hm, &init)?;
    fit.gaussian.mean[0] += origin[0];
    fit.gaussian.mean[1] += origin[1];
    Ok(fit)
}

/// Stacked `[A, μx, μy, Σ11, Σ12, Σ22]` of every non-hip joint, in joint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(pub Vec<f64>);

impl ConditionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn build_condition(gaussians: &[HeatmapGaussian], joint_count: usize, hips: &[usize]) -> Result<ConditionVector> {
    if gaussians.len() != joint_count {
        return Err(Error::invalid(format!("expected {joint_count} joint gaussians, got {}", gaussians.len())));
    }
    if let Some(h) = hips.iter().find(|&&h| h >= joint_count) {
        return Err(Error::invalid(format!("hip index {h} out of range")));
    }
    let mut out = Vec::with_capacity(6 * joint_count.saturating_sub(hips.len()));
    for (j, g) in gaussians.iter().enumerate() {
        if !hips.contains(&j) {
            out.extend_from_slice(&g.coefficients());
        }
    }
    Ok(ConditionVector(out))
}

/// Any joint with a fitted standard deviation strictly above `threshold` px.
pub fn is_ambiguous(gaussians: &[HeatmapGaussian], threshold: f64) -> bool {
    gaussians.iter().any(|g| g.cov.std_x() > threshold || g.cov.std_y() > threshold)
}

const HEATMAP_MAGIC: &str = "AMBIHMAP";

/// One image's worth of joint heatmaps, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFrame {
    pub joints: Vec<Heatmap>,
}

/// Heatmap file: magic, width, height and joint count (u32 LE), then the
/// float32 grids of each joint for each frame back to back.
pub fn write_heatmaps(path: &Path, frames: &[HeatmapFrame]) -> Result<()> {
    let first = frames.first().and_then(|f| f.joints.first());
    let (w, h) = first.map_or((0, 0), |m| (m.width, m.height));
    let j = frames.first().map_or(0, |f| f.joints.len());
    let mut wr = Writer::new();
    wr.bytes(HEATMAP_MAGIC.as_bytes());
    wr.u32(w as u32);
    wr.u32(h as u32);
    wr.u32(j as u32);
    for f in frames {
        if f.joints.len() != j {
            return Err(Error::invalid("all frames need the same joint count"));
        }
        for m in &f.joints {
            if (m.width, m.height) != (w, h) {
                return Err(Error::invalid("all heatmaps need the same size"));
            }
            for &v in &m.values {
                wr.f32(v as f32);
            }
        }
    }
    std::fs::write(path, wr.buf).map_err(|e| Error::io(path, e))
}

pub fn read_heatmaps(path: &Path) -> Result<Vec<HeatmapFrame>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_heatmaps(&bytes)
}

pub fn decode_heatmaps(bytes: &[u8]) -> Result<Vec<HeatmapFrame>> {
    let mut r = Reader::new(bytes);
    r.magic(HEATMAP_MAGIC)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let j = r.u32()? as usize;
    let frame_bytes = w * h * j * 4;
    if frame_bytes == 0 {
        return Ok(Vec::new());
    }
    if r.remaining() % frame_bytes != 0 {
        return Err(FormatError::Truncated.into());
    }
    let n = r.remaining() / frame_bytes;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut joints = Vec::with_capacity(j);
        for _ in 0..j {
            let values = (0..w * h).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
            joints.push(Heatmap { width: w, height: h, values });
        }
        frames.push(HeatmapFrame { joints });
    }
    Ok(frames)
}

/// CSV export of fitted Gaussians, one row per `(frame, joint)`.
pub fn write_fits_csv(mut out: impl std::io::Write, fits: &[Vec<GaussianFit>]) -> std::io::Result<()> {
    writeln!(out, "frame,joint,amplitude,mu_x,mu_y,cov_xx,cov_xy,cov_yy,residual,iterations,converged,high_residual")?;
    for (f, frame) in fits.iter().enumerate() {
        for (j, fit) in frame.iter().enumerate() {
            let c = fit.gaussian.coefficients();
            writeln!(
                out,
                "{f},{j},{},{},{},{},{},{},{},{},{},{}",
                c[0], c[1], c[2], c[3], c[4], c[5], fit.residual, fit.iterations, fit.converged, fit.high_residual
            )?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn peak_and_unit_mahalanobis() {
        let g = HeatmapGaussian { amplitude: 0.7, mean: [10.0, 12.0], cov: Cov2::isotropic(2.0) };
        let hm = synthesize_heatmap(&g, 32, 32).unwrap();
        assert_eq!(hm.get(10, 12), 0.7);
        assert!((hm.get(12, 12) - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((hm.get(10, 10) - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mass_matches_continuous_integral() {
        let g = HeatmapGaussian { amplitude: 1.3, mean: [40.2, 37.9], cov: Cov2::from_std(3.0, 4.5, 0.3) };
        let hm = synthesize_heatmap(&g, 80, 80).unwrap();
        let mass: f64 = hm.values.iter().sum();
        let expected = 1.3 * 2.0 * std::f64::consts::PI * g.cov.det().sqrt();
        assert!((mass / expected - 1.0).abs() < 0.01, "{mass} vs {expected}");
    }

    #[test]
    fn non_spd_rejected() {
        let g = HeatmapGaussian { amplitude: 1.0, mean: [5.0, 5.0], cov: Cov2 { xx: 1.0, xy: 2.0, yy: 1.0 } };
        assert!(synthesize_heatmap(&g, 10, 10).is_err());
    }

    #[test]
    fn recovers_axis_aligned_gaussian() {
        let truth = HeatmapGaussian { amplitude: 1.0, mean: [32.0, 20.0], cov: Cov2::from_std(3.0, 5.0, 0.0) };
        let hm = synthesize_heatmap(&truth, 64, 48).unwrap();
        let fit = fit_gaussian(&hm, &HeatmapGaussian::initial([31.0, 21.0])).unwrap();
        assert!(fit.converged);
        assert!(!fit.high_residual);
        let g = fit.gaussian;
        assert!((g.mean[0] - 32.0).abs() < 0.01 && (g.mean[1] - 20.0).abs() < 0.01);
        assert!((g.cov.xx - 9.0).abs() < 0.05 && (g.cov.yy - 25.0).abs() < 0.05 && g.cov.xy.abs() < 0.05);
    }

    #[test]
    fn initial_guess_uses_sigma_gt() {
        let g = HeatmapGaussian::initial([3.0, 4.0]);
        assert_eq!(g.amplitude, 1.0);
        assert_eq!((g.cov.xx, g.cov.xy, g.cov.yy), (4.0, 0.0, 4.0));
    }

    #[test]
    fn bimodal_map_is_flagged() {
        let a = HeatmapGaussian { amplitude: 1.0, mean: [15.0, 30.0], cov: Cov2::isotropic(2.5) };
        let b = HeatmapGaussian { amplitude: 1.0, mean: [48.0, 30.0], cov: Cov2::isotropic(2.5) };
        let mut hm = synthesize_heatmap(&a, 64, 64).unwrap();
        hm.add(&synthesize_heatmap(&b, 64, 64).unwrap());
        let fit = fit_gaussian(&hm, &HeatmapGaussian::initial([16.0, 29.0])).unwrap();
        // Settles on the nearby mode and leaves the other unexplained.
        assert!((fit.gaussian.mean[0] - 15.0).abs() < 0.5, "{:?}", fit.gaussian);
        assert!(fit.high_residual);
        assert!(fit.residual > HIGH_RESIDUAL);
    }

    #[test]
    fn all_zero_map_is_error() {
        let hm = Heatmap::zeros(8, 8);
        assert!(fit_gaussian(&hm, &HeatmapGaussian::initial([4.0, 4.0])).is_err());
    }

    #[test]
    fn random_spd_roundtrip() {
        let mut r = rng::stream(11, "fit", 0);
        for _ in 0..40 {
            let sx = r.random_range(1.0..8.0);
            let sy = r.random_range(1.0..8.0);
            let rho = r.random_range(-0.6..0.6);
            let truth = HeatmapGaussian {
                amplitude: r.random_range(0.3..1.5),
                mean: [r.random_range(28.0..36.0), r.random_range(28.0..36.0)],
                cov: Cov2::from_std(sx, sy, rho),
            };
            let hm = synthesize_heatmap(&truth, 64, 64).unwrap();
            let init = HeatmapGaussian::initial([truth.mean[0].round(), truth.mean[1].round()]);
            let g = fit_gaussian(&hm, &init).unwrap().gaussian;
            assert!((g.mean[0] - truth.mean[0]).abs() < 0.01);
            assert!((g.cov.xx - truth.cov.xx).abs() < 0.05, "{:?} vs {:?}", g.cov, truth.cov);
            assert!((g.cov.xy - truth.cov.xy).abs() < 0.05);
            assert!(g.cov.is_spd());
        }
    }

    #[test]
    fn projection_floors_eigenvalues() {
        let c = Cov2 { xx: 1.0, xy: 1.0, yy: 1.0 }.project_spd(1e-4);
        let (_, l2) = c.eigenvalues();
        assert!(l2 >= 1e-4 - 1e-12);
        assert!((c.xy - c.xy).abs() == 0.0 && c.is_spd());
    }

    #[test]
    fn condition_drops_hips() {
        let gs: Vec<HeatmapGaussian> = (0..16)
            .map(|j| HeatmapGaussian { amplitude: j as f64, mean: [j as f64, 0.0], cov: Cov2::isotropic(2.0) })
            .collect();
        let c = build_condition(&gs, 16, &[0, 1, 4]).unwrap();
        assert_eq!(c.len(), 78);
        for hip in [0.0, 1.0, 4.0] {
            assert!(!c.0.chunks(6).any(|ch| ch[0] == hip));
        }
        assert!(build_condition(&gs[..15], 16, &[0, 1, 4]).is_err());
    }

    #[test]
    fn condition_is_order_consistent() {
        let mut r = rng::stream(5, "perm", 0);
        let gs: Vec<HeatmapGaussian> = (0..16)
            .map(|_| HeatmapGaussian {
                amplitude: r.random(),
                mean: [r.random(), r.random()],
                cov: Cov2::isotropic(1.0 + r.random::<f64>()),
            })
            .collect();
        let perm: Vec<usize> = (0..16).rev().collect();
        let permuted: Vec<HeatmapGaussian> = perm.iter().map(|&i| gs[i]).collect();
        let mut unpermuted = permuted.clone();
        for (k, &i) in perm.iter().enumerate() {
            unpermuted[i] = permuted[k];
        }
        assert_eq!(build_condition(&unpermuted, 16, &[0, 1, 4]).unwrap(), build_condition(&gs, 16, &[0, 1, 4]).unwrap());
    }

    #[test]
    fn ambiguity_rule() {
        let mut gs = vec![HeatmapGaussian::initial([0.0, 0.0]); 16];
        assert!(!is_ambiguous(&gs, AMBIGUITY_THRESHOLD_PX));
        gs[7].cov = Cov2::from_std(5.0, 2.0, 0.0);
        assert!(!is_ambiguous(&gs, AMBIGUITY_THRESHOLD_PX));
        gs[7].cov = Cov2::from_std(5.1, 2.0, 0.0);
        assert!(is_ambiguous(&gs, AMBIGUITY_THRESHOLD_PX));
    }

    #[test]
    fn heatmap_file_roundtrip() {
        let g = HeatmapGaussian { amplitude: 1.0, mean: [5.0, 6.0], cov: Cov2::isotropic(2.0) };
        let hm = synthesize_heatmap(&g, 12, 10).unwrap();
        let frames = vec![HeatmapFrame { joints: vec![hm.clone(), hm.clone()] }; 3];
        let dir = std::env::temp_dir().join(format!("ambiflow-hm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("maps.bin");
        write_heatmaps(&path, &frames).unwrap();
        let back = read_heatmaps(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[2].joints[1].values.iter().zip(&hm.values).all(|(a, b)| (a - b).abs() < 1e-7));
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            decode_heatmaps(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated))
        ));
    }
}
