//! Synthetic articulated-pose data: generation, projection, normalization
//! and the dataset file format.
//!
//! Each sample is a random articulation of the [`Skeleton`], projected by a
//! camera (orthographic by default, so depth is exactly unobservable). Joints
//! are either clean, with a `σ = 2 px` heatmap centred on the projection, or
//! occluded, with a wide heatmap centred on a detection that is itself drawn
//! from that wide Gaussian. The stored Gaussians are obtained by synthesizing
//! each heatmap and fitting it, exactly like a real detector's output would
//! be processed.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::heatmap::{self, Cov2, HeatmapGaussian, SIGMA_GT};
use crate::rng::{self, normal};
use crate::skeleton::Skeleton;

/// Orthographic scale of the toy camera. At 100 px per metre one pixel is
/// exactly 10 mm, the conversion used between heatmap and pose covariances.
pub const ORTHO_PX_PER_M: f64 = 100.0;
/// Millimetres per pixel when relating heatmap and hypothesis covariances.
pub const MM_PER_PX: f64 = 10.0;
/// Fixed pixel scale applied to heatmap means in the condition features.
pub const CONDITION_PX_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Camera {
    /// `u = scale * x + cx`, `v = scale * y + cy`.
    Orthographic { scale: f64, cx: f64, cy: f64 },
    /// Pinhole: `u = f * x / z + cx`, `v = f * y / z + cy`.
    Perspective { focal: f64, cx: f64, cy: f64 },
}

impl Camera {
    pub fn default_orthographic(image_size: usize) -> Self {
        let c = image_size as f64 / 2.0;
        Camera::Orthographic { scale: ORTHO_PX_PER_M, cx: c, cy: c }
    }

    fn encode(&self) -> (u8, [f64; 3]) {
        match *self {
            Camera::Orthographic { scale, cx, cy } => (0, [scale, cx, cy]),
            Camera::Perspective { focal, cx, cy } => (1, [focal, cx, cy]),
        }
    }

    fn decode(kind: u8, p: [f64; 3]) -> Result<Self> {
        match kind {
            0 => Ok(Camera::Orthographic { scale: p[0], cx: p[1], cy: p[2] }),
            1 => Ok(Camera::Perspective { focal: p[0], cx: p[1], cy: p[2] }),
            k => Err(crate::FormatError::Malformed(format!("unknown camera kind {k}")).into()),
        }
    }
}

/// Project a joint-major 3D pose to a joint-major 2D pose in px.
pub fn project(pose: &[f64], cam: &Camera) -> Result<Vec<f64>> {
    if pose.len() % 3 != 0 {
        return Err(Error::invalid(format!("3D pose length {} is not a multiple of 3", pose.len())));
    }
    let mut out = Vec::with_capacity(pose.len() / 3 * 2);
    for p in pose.chunks_exact(3) {
        match *cam {
            Camera::Orthographic { scale, cx, cy } => {
                out.push(scale * p[0] + cx);
                out.push(scale * p[1] + cy);
            }
            Camera::Perspective { focal, cx, cy } => {
                if p[2] <= 0.0 {
                    return Err(Error::invalid(format!("joint at depth {} is not in front of the camera", p[2])));
                }
                out.push(focal * p[0] / p[2] + cx);
                out.push(focal * p[1] / p[2] + cy);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Camera-frame joint positions in metres.
    pub pose3d: Vec<f64>,
    /// Detected joint positions in px.
    pub pose2d: Vec<f64>,
    /// Fitted heatmap Gaussian of every joint.
    pub gaussians: Vec<HeatmapGaussian>,
    pub camera: Camera,
    pub occluded: Vec<bool>,
}

impl Sample {
    pub fn joint_count(&self) -> usize {
        self.occluded.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub skeleton: Skeleton,
    pub samples: usize,
    /// Fraction of samples that contain occluded joints.
    pub occlusion_rate: f64,
    /// Each occluded sample hides between 1 and this many non-hip joints.
    pub max_occluded_joints: usize,
    /// Range of the per-axis heatmap σ of an occluded joint (px).
    pub occluded_sigma: (f64, f64),
    pub seed: u64,
    pub camera: Camera,
    /// Root depth for perspective cameras (m).
    pub depth: f64,
    pub image_size: usize,
    /// Side of the window a joint heatmap is synthesized and fitted on.
    pub window: usize,
    /// Synthesize and fit heatmaps; otherwise store the generating Gaussians.
    pub fit_heatmaps: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            skeleton: Skeleton::human16(),
            samples: 5000,
            occlusion_rate: 0.3,
            max_occluded_joints: 3,
            occluded_sigma: (4.0, 10.0),
            seed: 0,
            camera: Camera::default_orthographic(256),
            depth: 5.0,
            image_size: 256,
            window: 64,
            fit_heatmaps: true,
        }
    }
}

/// Ground-truth pose, clean projection and the Gaussian each joint's heatmap
/// is rendered from, before any fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub pose3d: Vec<f64>,
    pub projection: Vec<f64>,
    pub detection: Vec<f64>,
    pub truth: Vec<HeatmapGaussian>,
    pub occluded: Vec<bool>,
}

fn raw_sample(cfg: &DataConfig, index: usize) -> Result<RawSample> {
    let skel = &cfg.skeleton;
    let j = skel.joint_count();
    let mut r = rng::stream(cfg.seed, "dataset-sample", index as u64);
    let mut pose = skel.sample_pose(&mut r);
    if let Camera::Perspective { .. } = cfg.camera {
        for p in pose.chunks_exact_mut(3) {
            p[2] += cfg.depth;
        }
    }
    let projection = project(&pose, &cfg.camera)?;
    let mut occluded = vec![false; j];
    if cfg.occlusion_rate > 0.0 && r.random_bool(cfg.occlusion_rate.min(1.0)) {
        let candidates: Vec<usize> = (0..j).filter(|i| !skel.hips.contains(i)).collect();
        let k = r.random_range(1..=cfg.max_occluded_joints.clamp(1, candidates.len()));
        for pick in sample_indices(&mut r, candidates.len(), k) {
            occluded[candidates[pick]] = true;
        }
    }
    let mut detection = projection.clone();
    let mut truth = Vec::with_capacity(j);
    for jj in 0..j {
        let (lo, hi) = cfg.occluded_sigma;
        let g = if occluded[jj] {
            let sx = r.random_range(lo..hi);
            let sy = r.random_range(lo..hi);
            let rho = r.random_range(-0.3..0.3);
            let amplitude = r.random_range(0.3..0.8);
            let cov = Cov2::from_std(sx, sy, rho);
            let (a, b, c) = cov.cholesky().expect("spd by construction");
            let (n1, n2) = (normal(&mut r), normal(&mut r));
            detection[2 * jj] += a * n1;
            detection[2 * jj + 1] += b * n1 + c * n2;
            HeatmapGaussian { amplitude, mean: [detection[2 * jj], detection[2 * jj + 1]], cov }
        } else {
            HeatmapGaussian { amplitude: 1.0, mean: [projection[2 * jj], projection[2 * jj + 1]], cov: Cov2::isotropic(SIGMA_GT) }
        };
        truth.push(g);
    }
    Ok(RawSample { pose3d: pose, projection, detection, truth, occluded })
}

/// Heatmap window of side `size` containing `g`, with its origin.
pub fn joint_window(g: &HeatmapGaussian, size: usize) -> Result<(heatmap::Heatmap, [f64; 2])> {
    let half = (size / 2) as f64;
    let origin = [g.mean[0].round() - half, g.mean[1].round() - half];
    Ok((heatmap::synthesize_window(g, size, size, origin, false)?, origin))
}

fn build_sample(cfg: &DataConfig, index: usize) -> Result<Sample> {
    let raw = raw_sample(cfg, index)?;
    let gaussians = if cfg.fit_heatmaps {
        raw.truth
            .iter()
            .enumerate()
            .map(|(jj, g)| {
                let (hm, origin) = joint_window(g, cfg.window)?;
                let detected = [raw.detection[2 * jj], raw.detection[2 * jj + 1]];
                Ok(heatmap::fit_window(&hm, origin, detected)?.gaussian)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        raw.truth.clone()
    };
    Ok(Sample { pose3d: raw.pose3d, pose2d: raw.detection, gaussians, camera: cfg.camera, occluded: raw.occluded })
}

/// Unfitted generator output for sample `index`; used by heatmap export.
pub fn generate_raw(cfg: &DataConfig, index: usize) -> Result<RawSample> {
    raw_sample(cfg, index)
}

/// Generate `cfg.samples` samples. Sample `i` only depends on `(seed, i)`.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Vec<Sample>> {
    cfg.skeleton.validate()?;
    if !(0.0..=1.0).contains(&cfg.occlusion_rate) {
        return Err(Error::invalid(format!("occlusion rate {} outside [0, 1]", cfg.occlusion_rate)));
    }
    (0..cfg.samples).into_par_iter().map(|i| build_sample(cfg, i)).collect()
}

/// Per-pose 2D normalization: mean point and scalar standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 2],
    pub std: f64,
}

/// Center a 2D pose on its mean point and divide by its standard deviation.
pub fn normalize_2d(y: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    let n = y.len() / 2;
    if n == 0 || y.len() % 2 != 0 {
        return Err(Error::invalid("2D pose must have an even, non-zero length"));
    }
    let mx = y.iter().step_by(2).sum::<f64>() / n as f64;
    let my = y.iter().skip(1).step_by(2).sum::<f64>() / n as f64;
    let var = y
        .chunks_exact(2)
        .map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Err(Error::invalid("degenerate 2D pose has zero spread"));
    }
    let stats = NormStats { mean: [mx, my], std };
    let out = y.chunks_exact(2).flat_map(|p| [(p[0] - mx) / std, (p[1] - my) / std]).collect();
    Ok((out, stats))
}

pub fn denormalize_2d(y: &[f64], stats: &NormStats) -> Vec<f64> {
    y.chunks_exact(2)
        .flat_map(|p| [p[0] * stats.std + stats.mean[0], p[1] * stats.std + stats.mean[1]])
        .collect()
}

/// Subtract the mean joint position.
pub fn normalize_3d(x: &[f64]) -> Vec<f64> {
    let n = (x.len() / 3).max(1) as f64;
    let mut mean = [0.0; 3];
    for p in x.chunks_exact(3) {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    x.chunks_exact(3).flat_map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect()
}

/// Translate so joint `hip` sits at the origin.
pub fn hip_center(x: &[f64], hip: usize) -> Vec<f64> {
    let h = [x[3 * hip], x[3 * hip + 1], x[3 * hip + 2]];
    x.chunks_exact(3).flat_map(|p| [p[0] - h[0], p[1] - h[1], p[2] - h[2]]).collect()
}

/// Network-ready condition features: per non-hip joint the amplitude, the
/// mean relative to the pose's mean point in units of
/// [`CONDITION_PX_SCALE`], and the covariance in units of `σ_gt²`.
pub fn condition_features(gaussians: &[HeatmapGaussian], stats: &NormStats, hips: &[usize]) -> Result<Vec<f64>> {
    let chat = heatmap::build_condition(gaussians, gaussians.len(), hips)?;
    let var_gt = SIGMA_GT * SIGMA_GT;
    Ok(chat
        .as_slice()
        .chunks_exact(6)
        .flat_map(|c| {
            [
                c[0],
                (c[1] - stats.mean[0]) / CONDITION_PX_SCALE,
                (c[2] - stats.mean[1]) / CONDITION_PX_SCALE,
                c[3] / var_gt,
                c[4] / var_gt,
                c[5] / var_gt,
            ]
        })
        .collect())
}

const DATASET_MAGIC: &str = "AMBIDSET";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>> {
    let j = samples.first().map_or(0, Sample::joint_count);
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC.as_bytes());
    w.u32(DATASET_VERSION);
    w.u32(j as u32);
    w.u64(samples.len() as u64);
    for s in samples {
        if s.joint_count() != j || s.pose3d.len() != 3 * j || s.pose2d.len() != 2 * j || s.gaussians.len() != j {
            return Err(Error::invalid("samples disagree on joint count"));
        }
        w.f64s(&s.pose3d);
        w.f64s(&s.pose2d);
        let (kind, params) = s.camera.encode();
        w.u8(kind);
        w.f64s(&params);
        for g in &s.gaussians {
            w.f64s(&g.coefficients());
        }
        let mut mask = vec![0u8; j.div_ceil(8)];
        for (i, &o) in s.occluded.iter().enumerate() {
            if o {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        w.bytes(&mask);
    }
    Ok(w.finish_crc())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    // Check the header before the checksum so version errors are reported as such.
    let mut head = Reader::new(bytes);
    head.magic(DATASET_MAGIC)?;
    head.version(DATASET_VERSION)?;
    let mut r = Reader::with_crc(bytes)?;
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let j = r.u32()? as usize;
    let n = r.u64()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let pose3d = r.f64s(3 * j)?;
        let pose2d = r.f64s(2 * j)?;
        let kind = r.u8()?;
        let params = [r.f64()?, r.f64()?, r.f64()?];
        let camera = Camera::decode(kind, params)?;
        let gaussians = (0..j)
            .map(|_| r.f64s(6).map(|c| HeatmapGaussian::from_coefficients(&c)))
            .collect::<Result<Vec<_>, _>>()?;
        let mask = r.take(j.div_ceil(8))?;
        let occluded = (0..j).map(|i| mask[i / 8] & (1 << (i % 8)) != 0).collect();
        samples.push(Sample { pose3d, pose2d, gaussians, camera, occluded });
    }
    r.expect_end()?;
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::FormatError;

    fn small(samples: usize, occlusion_rate: f64) -> DataConfig {
        DataConfig { samples, occlusion_rate, seed: 42, ..DataConfig::default() }
    }

    #[test]
    fn orthographic_drops_depth() {
        let cam = Camera::Orthographic { scale: 1.0, cx: 0.0, cy: 0.0 };
        assert_eq!(project(&[1.0, 2.0, 5.0], &cam).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn pinhole_on_axis_and_depth_scaling() {
        let cam = Camera::Perspective { focal: 1000.0, cx: 500.0, cy: 500.0 };
        assert_eq!(project(&[0.0, 0.0, 2.0], &cam).unwrap(), vec![500.0, 500.0]);
        let near = project(&[0.3, -0.2, 2.0], &cam).unwrap();
        let far = project(&[0.3, -0.2, 4.0], &cam).unwrap();
        assert!(((near[0] - 500.0) / (far[0] - 500.0) - 2.0).abs() < 1e-12);
        assert!(((near[1] - 500.0) / (far[1] - 500.0) - 2.0).abs() < 1e-12);
        assert!(project(&[0.0, 0.0, 0.0], &cam).is_err());
        assert!(project(&[0.0, 0.0, -1.0], &cam).is_err());
    }

    #[test]
    fn clean_dataset_has_gt_sigma_and_exact_projection() {
        let cfg = small(20, 0.0);
        let data = generate_dataset(&cfg).unwrap();
        for (i, s) in data.iter().enumerate() {
            assert!(s.occluded.iter().all(|&o| !o));
            let raw = generate_raw(&cfg, i).unwrap();
            let proj = project(&s.pose3d, &s.camera).unwrap();
            for (a, b) in proj.iter().zip(&s.pose2d) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(raw.projection, proj);
            for (jj, g) in s.gaussians.iter().enumerate() {
                assert!((g.cov.std_x() - 2.0).abs() < 1e-3 && (g.cov.std_y() - 2.0).abs() < 1e-3);
                // Fitting the synthesized heatmap recovers the projected point.
                assert!((g.mean[0] - proj[2 * jj]).abs() < 0.05 && (g.mean[1] - proj[2 * jj + 1]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn occluded_joints_are_wide_and_never_hips() {
        let data = generate_dataset(&small(200, 0.5)).unwrap();
        let occluded: usize = data.iter().filter(|s| s.occluded.iter().any(|&o| o)).count();
        assert!(occluded > 60 && occluded < 140, "{occluded}");
        for s in &data {
            for (jj, &o) in s.occluded.iter().enumerate() {
                if o {
                    assert!(![0, 1, 4].contains(&jj));
                    assert!(s.gaussians[jj].cov.std_x() > 3.9 && s.gaussians[jj].cov.std_x() < 10.1);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = encode_dataset(&generate_dataset(&small(30, 0.3)).unwrap()).unwrap();
        let b = encode_dataset(&generate_dataset(&small(30, 0.3)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bone_lengths_constant() {
        let cfg = small(50, 0.3);
        let data = generate_dataset(&cfg).unwrap();
        let first = cfg.skeleton.measure_bones(&data[0].pose3d);
        for s in &data {
            for (a, b) in cfg.skeleton.measure_bones(&s.pose3d).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_bone_length_rejected() {
        let mut cfg = small(2, 0.0);
        cfg.skeleton.bone_lengths[5] = -0.1;
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn normalize_2d_roundtrip() {
        let y = vec![10.0, 20.0, 13.0, 24.0, 7.0, 30.0, 12.5, 19.0];
        let (n, st) = normalize_2d(&y).unwrap();
        assert!(n.iter().sum::<f64>().abs() < 1e-12);
        let std = (n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 1e-12);
        for (a, b) in denormalize_2d(&n, &st).iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(normalize_2d(&[3.0, 3.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn centering() {
        let x = vec![1.0, 2.0, 3.0, 2.0, 2.0, 2.0, 0.0, -1.0, 4.0];
        let n = normalize_3d(&x);
        for k in 0..3 {
            assert!(n.iter().skip(k).step_by(3).sum::<f64>().abs() < 1e-12);
        }
        let h = hip_center(&x, 0);
        assert_eq!(&h[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(hip_center(&h, 0), h);
    }

    #[test]
    fn dataset_file_roundtrip_and_errors() {
        let data = generate_dataset(&small(5, 0.5)).unwrap();
        let bytes = encode_dataset(&data).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), data);
        assert!(decode_dataset(&encode_dataset(&[]).unwrap()).unwrap().is_empty());

        let mut corrupt = bytes.clone();
        corrupt[100] ^= 0x01;
        assert!(matches!(decode_dataset(&corrupt), Err(Error::Format(FormatError::Checksum { .. }))));

        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(decode_dataset(&wrong_version), Err(Error::Format(FormatError::VersionMismatch { .. }))));

        assert!(matches!(decode_dataset(&bytes[..2]), Err(Error::Format(FormatError::BadMagic { .. }))));
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_dataset(truncated),
            Err(Error::Format(FormatError::Checksum { .. } | FormatError::Truncated))
        ));
    }

    #[test]
    fn condition_features_length() {
        let data = generate_dataset(&small(1, 0.0)).unwrap();
        let (_, st) = normalize_2d(&data[0].pose2d).unwrap();
        let f = condition_features(&data[0].gaussians, &st, &[0, 1, 4]).unwrap();
        assert_eq!(f.len(), 78);
        assert!((f[3] - 1.0).abs() < 1e-3);
    }
}
