//! Pose error metrics and hypothesis-set statistics.
//!
//! All functions take joint-major 3D poses in millimetres.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapGaussian;
use crate::rng::{self, Rng};

/// PCK threshold (mm).
pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// Upper end of the CPS threshold range (mm).
pub const CPS_MAX_MM: f64 = 300.0;

/// Euclidean error of every joint.
pub fn joint_errors(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.chunks_exact(3)
        .zip(target.chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .collect()
}

pub fn mpjpe(pred: &[f64], target: &[f64]) -> f64 {
    let e = joint_errors(pred, target);
    e.iter().sum::<f64>() / e.len().max(1) as f64
}

fn to_points(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks_exact(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Similarity (or, without `with_scale`, rigid) transform of `pred` that best
/// matches `target` in the least-squares sense.
pub fn procrustes_align_with(pred: &[f64], target: &[f64], with_scale: bool) -> Result<Vec<f64>> {
    if pred.len() != target.len() || pred.len() % 3 != 0 {
        return Err(Error::invalid("poses must have the same joint-major length"));
    }
    let (a, b) = (to_points(pred), to_points(target));
    let (ca, cb) = (centroid(&a), centroid(&b));
    let a0: Vec<_> = a.iter().map(|p| p - ca).collect();
    let b0: Vec<_> = b.iter().map(|p| p - cb).collect();
    let spread = |pts: &[Vector3<f64>]| {
        let m: Matrix3<f64> = pts.iter().map(|p| p * p.transpose()).sum();
        let sv = m.symmetric_eigenvalues();
        let mut v = [sv[0], sv[1], sv[2]];
        v.sort_by(|x, y| y.total_cmp(x));
        v
    };
    for pts in [&a0, &b0] {
        let s = spread(pts);
        if !(s[1] > 1e-12 * s[0].max(1e-300)) {
            return Err(Error::invalid("Procrustes alignment needs non-collinear joints"));
        }
    }
    // Maximize tr(R H) with H = Σ a bᵀ.
    let h: Matrix3<f64> = a0.iter().zip(&b0).map(|(p, q)| p * q.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let scale = if with_scale {
        let norm_a: f64 = a0.iter().map(|p| p.norm_squared()).sum();
        (svd.singular_values.component_mul(&Vector3::new(d[(0, 0)], d[(1, 1)], d[(2, 2)]))).sum() / norm_a
    } else {
        1.0
    };
    Ok(a0.iter().flat_map(|p| {
        let q = r * p * scale + cb;
        [q.x, q.y, q.z]
    }).collect())
}

/// Similarity alignment (rotation, translation and scale).
pub fn procrustes_align(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    procrustes_align_with(pred, target, true)
}

pub fn pmpjpe_with(pred: &[f64], target: &[f64], with_scale: bool) -> Result<f64> {
    Ok(mpjpe(&procrustes_align_with(pred, target, with_scale)?, target))
}

/// MPJPE after similarity alignment.
pub fn pmpjpe(pred: &[f64], target: &[f64]) -> Result<f64> {
    pmpjpe_with(pred, target, true)
}

/// Percentage of joints with error strictly below `tau`.
pub fn pck(pred: &[f64], target: &[f64], tau: f64) -> f64 {
    let e = joint_errors(pred, target);
    100.0 * e.iter().filter(|&&v| v < tau).count() as f64 / e.len().max(1) as f64
}

/// Area under the all-joints-correct curve over `[0, 300]` mm.
pub fn cps(pred: &[f64], target: &[f64]) -> f64 {
    let worst = joint_errors(pred, target).into_iter().fold(0.0, f64::max);
    (CPS_MAX_MM - worst).max(0.0)
}

/// Index and value of the hypothesis minimizing `metric`; ties go to the
/// lowest index.
pub fn best_of(hyps: &[Vec<f64>], target: &[f64], metric: impl Fn(&[f64], &[f64]) -> f64) -> Result<(usize, f64)> {
    pick(hyps, target, metric, |a, b| a < b)
}

/// Index and value of the hypothesis maximizing `metric`.
pub fn worst_of(hyps: &[Vec<f64>], target: &[f64], metric: impl Fn(&[f64], &[f64]) -> f64) -> Result<(usize, f64)> {
    pick(hyps, target, metric, |a, b| a > b)
}

fn pick(
    hyps: &[Vec<f64>],
    target: &[f64],
    metric: impl Fn(&[f64], &[f64]) -> f64,
    better: impl Fn(f64, f64) -> bool,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in hyps.iter().enumerate() {
        let v = metric(h, target);
        if best.is_none_or(|(_, b)| better(v, b)) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::invalid("empty hypothesis set"))
}

/// Per-joint statistics of a hypothesis set.
#[derive(Debug, Clone, PartialEq)]
pub struct Spread {
    /// `[std_x, std_y, std_z]` per joint (n-1 estimator).
    pub std: Vec<[f64; 3]>,
    /// `[Σxx, Σxy, Σyy]` per joint.
    pub cov_xy: Vec<[f64; 3]>,
}

impl Spread {
    /// Mean over joints of each axis' standard deviation.
    pub fn mean_std(&self) -> [f64; 3] {
        let n = self.std.len().max(1) as f64;
        let mut out = [0.0; 3];
        for s in &self.std {
            for k in 0..3 {
                out[k] += s[k] / n;
            }
        }
        out
    }
}

pub fn hypothesis_spread(hyps: &[Vec<f64>]) -> Result<Spread> {
    let m = hyps.len();
    if m < 2 {
        return Err(Error::invalid("spread needs at least 2 hypotheses"));
    }
    let d = hyps[0].len();
    let mean: Vec<f64> = (0..d).map(|i| hyps.iter().map(|h| h[i]).sum::<f64>() / m as f64).collect();
    let cov = |i: usize, k: usize| hyps.iter().map(|h| (h[i] - mean[i]) * (h[k] - mean[k])).sum::<f64>() / (m - 1) as f64;
    let j = d / 3;
    Ok(Spread {
        std: (0..j).map(|jj| [cov(3 * jj, 3 * jj).sqrt(), cov(3 * jj + 1, 3 * jj + 1).sqrt(), cov(3 * jj + 2, 3 * jj + 2).sqrt()]).collect(),
        cov_xy: (0..j).map(|jj| [cov(3 * jj, 3 * jj), cov(3 * jj, 3 * jj + 1), cov(3 * jj + 1, 3 * jj + 1)]).collect(),
    })
}

/// `m` poses around `z0_pose` (mm): x/y noise from each joint's fitted
/// Gaussian at `mm_per_px`, depth noise `N(0, depth_sigma²)`.
pub fn noise_baseline(
    z0_pose: &[f64],
    gaussians: &[HeatmapGaussian],
    m: usize,
    depth_sigma: f64,
    mm_per_px: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    let j = z0_pose.len() / 3;
    if gaussians.len() != j {
        return Err(Error::invalid(format!("{} Gaussians for {j} joints", gaussians.len())));
    }
    // Cholesky factors in mm; a zero covariance gives zero noise.
    let factors: Vec<(f64, f64, f64)> = gaussians
        .iter()
        .map(|g| {
            let c = g.cov;
            let a = c.xx.max(0.0).sqrt();
            let b = if a > 0.0 { c.xy / a } else { 0.0 };
            let cc = (c.yy - b * b).max(0.0).sqrt();
            (a * mm_per_px, b * mm_per_px, cc * mm_per_px)
        })
        .collect();
    Ok((0..m)
        .map(|_| {
            let mut pose = z0_pose.to_vec();
            for (jj, &(a, b, c)) in factors.iter().enumerate() {
                let (n1, n2, n3) = (rng::normal(rng), rng::normal(rng), rng::normal(rng));
                pose[3 * jj] += a * n1;
                pose[3 * jj + 1] += b * n1 + c * n2;
                pose[3 * jj + 2] += depth_sigma * n3;
            }
            pose
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Cov2;
    use nalgebra::Rotation3;

    fn pose(seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "metrics", 0);
        rng::normals(&mut r, 48).iter().map(|v| v * 200.0).collect()
    }

    #[test]
    fn mpjpe_cases() {
        let x = pose(1);
        assert_eq!(mpjpe(&x, &x), 0.0);
        let shifted: Vec<f64> = x.chunks_exact(3).flat_map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect();
        assert!((mpjpe(&shifted, &x) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn procrustes_recovers_similarity() {
        let x = pose(2);
        let rot = Rotation3::from_euler_angles(0.4, -0.9, 1.3);
        let y: Vec<f64> = x
            .chunks_exact(3)
            .flat_map(|p| {
                let v = rot * Vector3::new(p[0], p[1], p[2]) * 2.0 + Vector3::new(10.0, -5.0, 3.0);
                [v.x, v.y, v.z]
            })
            .collect();
        assert!(pmpjpe(&y, &x).unwrap() < 1e-9);
        assert!(pmpjpe_with(&y, &x, false).unwrap() > 1.0);
        let line: Vec<f64> = (0..16).flat_map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(pmpjpe(&line, &x).is_err());
    }

    #[test]
    fn pck_and_cps() {
        let x = pose(3);
        assert_eq!(pck(&x, &x, 150.0), 100.0);
        let far: Vec<f64> = x.chunks_exact(3).flat_map(|p| [p[0] + 200.0, p[1], p[2]]).collect();
        assert_eq!(pck(&far, &x, 150.0), 0.0);
        let half: Vec<f64> = x
            .chunks_exact(3)
            .enumerate()
            .flat_map(|(i, p)| [p[0] + if i % 2 == 0 { 200.0 } else { 0.0 }, p[1], p[2]])
            .collect();
        assert_eq!(pck(&half, &x, 150.0), 50.0);
        assert_eq!(cps(&x, &x), 300.0);
        let off: Vec<f64> = x.chunks_exact(3).flat_map(|p| [p[0], p[1] + 100.0, p[2]]).collect();
        assert!((cps(&off, &x) - 200.0).abs() < 1e-9);
        let very: Vec<f64> = x.iter().map(|v| v + 400.0).collect();
        assert_eq!(cps(&very, &x), 0.0);
    }

    #[test]
    fn best_worst() {
        let x = pose(4);
        let h = vec![pose(5), x.clone(), pose(6)];
        assert_eq!(best_of(&h, &x, mpjpe).unwrap(), (1, 0.0));
        let (wi, wv) = worst_of(&h, &x, mpjpe).unwrap();
        assert!(wv >= mpjpe(&h[0], &x) && wv >= mpjpe(&h[2], &x) && wi != 1);
        let one = vec![pose(7)];
        assert_eq!(best_of(&one, &x, mpjpe).unwrap(), worst_of(&one, &x, mpjpe).unwrap());
        assert!(best_of(&[], &x, mpjpe).is_err());
    }

    #[test]
    fn spread_two_points() {
        let a = 7.0;
        let mut h1 = vec![0.0; 6];
        let mut h2 = vec![0.0; 6];
        h1[2] = a;
        h2[2] = -a;
        let s = hypothesis_spread(&[h1.clone(), h2]).unwrap();
        assert!((s.std[0][2] - a * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.std[1], [0.0; 3]);
        assert!(hypothesis_spread(&[h1]).is_err());
    }

    #[test]
    fn zero_noise_baseline_is_z0() {
        let x = pose(8);
        let g = vec![HeatmapGaussian { amplitude: 1.0, mean: [0.0, 0.0], cov: Cov2 { xx: 0.0, xy: 0.0, yy: 0.0 } }; 16];
        let mut r = rng::stream(1, "nb", 0);
        let h = noise_baseline(&x, &g, 5, 0.0, 10.0, &mut r).unwrap();
        assert!(h.iter().all(|p| *p == x));
    }
}
