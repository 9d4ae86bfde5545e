//! Hypothesis sampling over a dataset, the hypothesis file, and the
//! evaluation report.
//!
//! Flow outputs are mean-centred poses in metres. Accuracy metrics compare
//! root-centred poses in mm; spreads are taken in the flow's own frame, in
//! mm.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::data::{Camera, Sample};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, HypothesisSet};
use crate::heatmap::{self, AMBIGUITY_THRESHOLD_PX};
use crate::metrics::{self, PCK_THRESHOLD_MM};
use crate::rng;
use crate::trainer::TrainingSet;

/// Default hypothesis count.
pub const DEFAULT_HYPOTHESES: usize = 200;
/// Default error-vs-M grid.
pub const M_GRID: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 200];

/// `m` hypotheses and the z₀ pose for every sample of `set`. Sample `i` draws
/// its latents from its own stream, so the result does not depend on thread
/// count. With `z0_only` every hypothesis uses the zero latent.
pub fn sample_dataset(model: &FlowModel, set: &TrainingSet, m: usize, seed: u64, z0_only: bool) -> Result<Vec<HypothesisSet>> {
    if m == 0 {
        return Err(Error::invalid("number of hypotheses must be at least 1"));
    }
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            if z0_only {
                let mut poses = model.hypotheses_from(&set.y[i], &set.chat[i], &vec![vec![0.0; set.joints]; m + 1])?;
                let z0 = poses.pop();
                return Ok(HypothesisSet { poses, z0 });
            }
            let mut r = rng::stream(seed, "sample", i as u64);
            model.sample_hypotheses(&set.y[i], &set.chat[i], m, &mut r, true)
        })
        .collect()
}

/// CSV with one row per pose: `sample,hypothesis,kind,` then `x,y,z` of every
/// joint in metres. The z₀ pose is hypothesis 0 of kind `z0`.
pub fn write_hypotheses(mut out: impl Write, sets: &[HypothesisSet]) -> std::io::Result<()> {
    let j = sets.iter().find_map(|s| s.poses.first().or(s.z0.as_ref())).map_or(0, |p| p.len() / 3);
    write!(out, "sample,hypothesis,kind")?;
    for jj in 0..j {
        write!(out, ",j{jj}_x,j{jj}_y,j{jj}_z")?;
    }
    writeln!(out)?;
    for (i, s) in sets.iter().enumerate() {
        let rows = s.z0.iter().map(|p| ("z0", p)).chain(s.poses.iter().map(|p| ("sample", p)));
        for (h, (kind, pose)) in rows.enumerate() {
            write!(out, "{i},{h},{kind}")?;
            for v in pose {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_hypotheses(input: impl BufRead) -> Result<Vec<HypothesisSet>> {
    let bad = |line: usize, what: &str| Error::invalid(format!("hypothesis file line {line}: {what}"));
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?.map_err(|e| Error::io("<hypotheses>", e))?;
    let cols = header.split(',').count();
    if cols < 6 || (cols - 3) % 3 != 0 || !header.starts_with("sample,hypothesis,kind") {
        return Err(bad(1, "unexpected header"));
    }
    let mut sets: Vec<HypothesisSet> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<hypotheses>", e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(bad(n + 2, "wrong column count"));
        }
        let sample: usize = f[0].parse().map_err(|_| bad(n + 2, "sample index"))?;
        let pose = f[3..].iter().map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad(n + 2, "coordinate"))?;
        if sample == sets.len() {
            sets.push(HypothesisSet { poses: vec![], z0: None });
        } else if sample + 1 != sets.len() {
            return Err(bad(n + 2, "samples out of order"));
        }
        let s = sets.last_mut().expect("pushed");
        match f[2] {
            "z0" if s.z0.is_none() && s.poses.is_empty() => s.z0 = Some(pose),
            "sample" => s.poses.push(pose),
            _ => return Err(bad(n + 2, "unexpected kind")),
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Keep only samples with a fitted σ above `ambiguity_threshold` px.
    pub ambiguous_only: bool,
    pub ambiguity_threshold: f64,
    /// Compare against z₀ plus heatmap noise.
    pub noise_baseline: bool,
    /// Depth σ of the baseline in mm; `None` uses the flow's mean depth std.
    pub baseline_depth_sigma: Option<f64>,
    pub m_grid: Vec<usize>,
    /// Root joint for centring.
    pub root: usize,
    pub procrustes_scale: bool,
    pub mm_per_px: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ambiguous_only: false,
            ambiguity_threshold: AMBIGUITY_THRESHOLD_PX,
            noise_baseline: false,
            baseline_depth_sigma: None,
            m_grid: M_GRID.to_vec(),
            root: 0,
            procrustes_scale: true,
            mm_per_px: crate::data::MM_PER_PX,
            seed: 0,
        }
    }
}

/// Metrics of one sample (mm unless noted).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub index: usize,
    pub ambiguous: bool,
    pub z0_mpjpe: f64,
    pub z0_pmpjpe: f64,
    pub z0_pck: f64,
    pub z0_cps: f64,
    pub best_mpjpe: f64,
    pub best_pmpjpe: f64,
    pub best_pck: f64,
    pub best_cps: f64,
    pub worst_mpjpe: f64,
    /// Mean over joints of the hypothesis std per axis.
    pub spread: [f64; 3],
    /// Per-joint hypothesis std per axis.
    pub joint_std: Vec<[f64; 3]>,
    /// L1 distance between the normalized observation and the reprojected z₀
    /// pose; orthographic cameras only.
    pub z0_reprojection: Option<f64>,
    /// Median over hypotheses of the same distance.
    pub median_reprojection: Option<f64>,
    /// Best-of-m MPJPE for every `m` of the grid.
    pub best_by_m: Vec<f64>,
    pub baseline_by_m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hypotheses: usize,
    pub m_grid: Vec<usize>,
    pub samples: Vec<SampleEval>,
    pub baseline_depth_sigma: Option<f64>,
    pub warnings: Vec<String>,
}

/// Orthographic reprojection of a pose, normalized like the observation.
fn reproject_normalized(pose: &[f64], cam: &Camera) -> Option<Vec<f64>> {
    let Camera::Orthographic { scale, .. } = *cam else { return None };
    let xy: Vec<f64> = pose.chunks_exact(3).flat_map(|p| [scale * p[0], scale * p[1]]).collect();
    crate::data::normalize_2d(&xy).ok().map(|(y, _)| y)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn to_mm_rooted(pose: &[f64], root: usize) -> Vec<f64> {
    crate::data::hip_center(pose, root).into_iter().map(|v| v * 1000.0).collect()
}

fn prefix_best(errors: &[f64], grid: &[usize]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    let mut running = Vec::with_capacity(errors.len());
    for &e in errors {
        best = best.min(e);
        running.push(best);
    }
    grid.iter().map(|&m| running[m.min(errors.len()) - 1]).collect()
}

pub fn evaluate(samples: &[Sample], hyps: &[HypothesisSet], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.len() != hyps.len() {
        return Err(Error::invalid(format!("{} samples but {} hypothesis sets", samples.len(), hyps.len())));
    }
    let m = hyps.first().map_or(0, |h| h.poses.len());
    if hyps.iter().any(|h| h.poses.len() != m || h.z0.is_none()) {
        return Err(Error::invalid("every sample needs the same number of hypotheses and a z0 pose"));
    }
    if m < 2 {
        return Err(Error::invalid("evaluation needs at least 2 hypotheses per sample"));
    }
    let grid: Vec<usize> = opts.m_grid.iter().copied().filter(|&g| g >= 1 && g <= m).collect();
    let mut warnings = Vec::new();
    let keep: Vec<usize> = (0..samples.len())
        .filter(|&i| !opts.ambiguous_only || heatmap::is_ambiguous(&samples[i].gaussians, opts.ambiguity_threshold))
        .collect();
    if keep.is_empty() {
        warnings.push("no sample passed the ambiguity filter; the evaluated subset is empty".to_string());
    }
    let with_scale = opts.procrustes_scale;
    let mut rows = keep
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let h = &hyps[i];
            let z0 = h.z0.as_ref().expect("checked");
            if z0.len() != s.pose3d.len() {
                return Err(Error::invalid(format!("sample {i}: pose length mismatch")));
            }
            let target = to_mm_rooted(&s.pose3d, opts.root);
            let z0_mm = to_mm_rooted(z0, opts.root);
            let preds: Vec<Vec<f64>> = h.poses.iter().map(|p| to_mm_rooted(p, opts.root)).collect();
            let errors: Vec<f64> = preds.iter().map(|p| metrics::mpjpe(p, &target)).collect();
            let pm: Vec<f64> = preds.iter().map(|p| metrics::pmpjpe_with(p, &target, with_scale)).collect::<Result<_>>()?;
            let centred_mm: Vec<Vec<f64>> = h.poses.iter().map(|p| p.iter().map(|v| v * 1000.0).collect()).collect();
            let spread = metrics::hypothesis_spread(&centred_mm)?;
            let y = crate::data::normalize_2d(&s.pose2d)?.0;
            let z0_reprojection = reproject_normalized(z0, &s.camera).map(|r| l1(&r, &y));
            let median_reprojection = match s.camera {
                Camera::Orthographic { .. } => {
                    Some(median(h.poses.iter().filter_map(|p| reproject_normalized(p, &s.camera)).map(|r| l1(&r, &y)).collect()))
                }
                Camera::Perspective { .. } => None,
            };
            Ok(SampleEval {
                index: i,
                ambiguous: heatmap::is_ambiguous(&s.gaussians, opts.ambiguity_threshold),
                z0_mpjpe: metrics::mpjpe(&z0_mm, &target),
                z0_pmpjpe: metrics::pmpjpe_with(&z0_mm, &target, with_scale)?,
                z0_pck: metrics::pck(&z0_mm, &target, PCK_THRESHOLD_MM),
                z0_cps: metrics::cps(&z0_mm, &target),
                best_mpjpe: errors.iter().copied().fold(f64::INFINITY, f64::min),
                best_pmpjpe: pm.iter().copied().fold(f64::INFINITY, f64::min),
                best_pck: preds.iter().map(|p| metrics::pck(p, &target, PCK_THRESHOLD_MM)).fold(0.0, f64::max),
                best_cps: preds.iter().map(|p| metrics::cps(p, &target)).fold(0.0, f64::max),
                worst_mpjpe: errors.iter().copied().fold(0.0, f64::max),
                spread: spread.mean_std(),
                joint_std: spread.std,
                z0_reprojection,
                median_reprojection,
                best_by_m: prefix_best(&errors, &grid),
                baseline_by_m: Vec::new(),
            })
        })
        .collect::<Result<Vec<SampleEval>>>()?;

    let mut depth_sigma = None;
    if opts.noise_baseline && !rows.is_empty() {
        let sigma = opts.baseline_depth_sigma.unwrap_or_else(|| rows.iter().map(|r| r.spread[2]).sum::<f64>() / rows.len() as f64);
        depth_sigma = Some(sigma);
        rows.par_iter_mut().try_for_each(|row| -> Result<()> {
            let s = &samples[row.index];
            let target = to_mm_rooted(&s.pose3d, opts.root);
            let z0_mm = to_mm_rooted(hyps[row.index].z0.as_ref().expect("checked"), opts.root);
            let mut r = rng::stream(opts.seed, "noise-baseline", row.index as u64);
            let base = metrics::noise_baseline(&z0_mm, &s.gaussians, m, sigma, opts.mm_per_px, &mut r)?;
            let errors: Vec<f64> = base.iter().map(|p| metrics::mpjpe(p, &target)).collect();
            row.baseline_by_m = prefix_best(&errors, &grid);
            Ok(())
        })?;
    }
    Ok(EvalReport { hypotheses: m, m_grid: grid, samples: rows, baseline_depth_sigma: depth_sigma, warnings })
}

/// Dataset-level means of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub samples: usize,
    pub ambiguous: usize,
    pub z0_mpjpe: f64,
    pub z0_pmpjpe: f64,
    pub z0_pck: f64,
    pub z0_cps: f64,
    pub best_mpjpe: f64,
    pub best_pmpjpe: f64,
    pub best_pck: f64,
    pub best_cps: f64,
    pub worst_mpjpe: f64,
    pub spread: [f64; 3],
    pub best_by_m: Vec<f64>,
    pub baseline_by_m: Vec<f64>,
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        let n = self.samples.len();
        let mean = |f: &dyn Fn(&SampleEval) -> f64| if n == 0 { f64::NAN } else { self.samples.iter().map(f).sum::<f64>() / n as f64 };
        let by_m = |f: &dyn Fn(&SampleEval) -> &Vec<f64>| -> Vec<f64> {
            if self.samples.first().is_none_or(|s| f(s).is_empty()) {
                return Vec::new();
            }
            (0..self.m_grid.len()).map(|k| mean(&|s| f(s)[k])).collect()
        };
        Summary {
            samples: n,
            ambiguous: self.samples.iter().filter(|s| s.ambiguous).count(),
            z0_mpjpe: mean(&|s| s.z0_mpjpe),
            z0_pmpjpe: mean(&|s| s.z0_pmpjpe),
            z0_pck: mean(&|s| s.z0_pck),
            z0_cps: mean(&|s| s.z0_cps),
            best_mpjpe: mean(&|s| s.best_mpjpe),
            best_pmpjpe: mean(&|s| s.best_pmpjpe),
            best_pck: mean(&|s| s.best_pck),
            best_cps: mean(&|s| s.best_cps),
            worst_mpjpe: mean(&|s| s.worst_mpjpe),
            spread: [mean(&|s| s.spread[0]), mean(&|s| s.spread[1]), mean(&|s| s.spread[2])],
            best_by_m: by_m(&|s| &s.best_by_m),
            baseline_by_m: by_m(&|s| &s.baseline_by_m),
        }
    }

    /// Mean hypothesis std per joint and axis over the evaluated samples.
    pub fn joint_spread(&self) -> Vec<[f64; 3]> {
        let n = self.samples.len().max(1) as f64;
        let j = self.samples.first().map_or(0, |s| s.joint_std.len());
        (0..j)
            .map(|jj| {
                let mut acc = [0.0; 3];
                for s in &self.samples {
                    for k in 0..3 {
                        acc[k] += s.joint_std[jj][k] / n;
                    }
                }
                acc
            })
            .collect()
    }

    /// Per-sample CSV.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "sample,ambiguous,z0_mpjpe,z0_pmpjpe,z0_pck,z0_cps,best_mpjpe,best_pmpjpe,best_pck,best_cps,worst_mpjpe,std_x,std_y,std_z,z0_reprojection,median_reprojection"
        )?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                s.index,
                u8::from(s.ambiguous),
                s.z0_mpjpe,
                s.z0_pmpjpe,
                s.z0_pck,
                s.z0_cps,
                s.best_mpjpe,
                s.best_pmpjpe,
                s.best_pck,
                s.best_cps,
                s.worst_mpjpe,
                s.spread[0],
                s.spread[1],
                s.spread[2],
                opt(s.z0_reprojection),
                opt(s.median_reprojection)
            )?;
        }
        Ok(())
    }

    /// Error-vs-M CSV: one row per grid entry.
    pub fn write_m_curve(&self, mut out: impl Write) -> std::io::Result<()> {
        let s = self.summary();
        writeln!(out, "m,flow_best_mpjpe,baseline_best_mpjpe")?;
        for (k, m) in self.m_grid.iter().enumerate() {
            let base = s.baseline_by_m.get(k).map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(out, "{m},{:.6},{base}", s.best_by_m.get(k).copied().unwrap_or(f64::NAN))?;
        }
        Ok(())
    }

    /// Per-joint spread CSV.
    pub fn write_joint_spread(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "joint,std_x,std_y,std_z")?;
        for (j, s) in self.joint_spread().iter().enumerate() {
            writeln!(out, "{j},{:.6},{:.6},{:.6}", s[0], s[1], s[2])?;
        }
        Ok(())
    }

    /// Human-readable summary block.
    pub fn write_summary(&self, mut out: impl Write) -> std::io::Result<()> {
        let s = self.summary();
        writeln!(out, "samples            {}", s.samples)?;
        writeln!(out, "ambiguous          {}", s.ambiguous)?;
        writeln!(out, "hypotheses         {}", self.hypotheses)?;
        writeln!(out, "z0 MPJPE (mm)      {:.3}", s.z0_mpjpe)?;
        writeln!(out, "z0 PMPJPE (mm)     {:.3}", s.z0_pmpjpe)?;
        writeln!(out, "z0 PCK (%)         {:.3}", s.z0_pck)?;
        writeln!(out, "z0 CPS (mm)        {:.3}", s.z0_cps)?;
        writeln!(out, "best MPJPE (mm)    {:.3}", s.best_mpjpe)?;
        writeln!(out, "best PMPJPE (mm)   {:.3}", s.best_pmpjpe)?;
        writeln!(out, "best PCK (%)       {:.3}", s.best_pck)?;
        writeln!(out, "best CPS (mm)      {:.3}", s.best_cps)?;
        writeln!(out, "worst MPJPE (mm)   {:.3}", s.worst_mpjpe)?;
        writeln!(out, "spread x/y/depth   {:.3} {:.3} {:.3}", s.spread[0], s.spread[1], s.spread[2])?;
        if let Some(d) = self.baseline_depth_sigma {
            writeln!(out, "baseline depth σ   {d:.3}")?;
        }
        for w in &self.warnings {
            writeln!(out, "warning: {w}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DataConfig};

    fn samples(n: usize, occlusion_rate: f64) -> Vec<Sample> {
        data::generate_dataset(&DataConfig { samples: n, occlusion_rate, fit_heatmaps: false, seed: 2, ..DataConfig::default() }).unwrap()
    }

    fn truth_sets(s: &[Sample], m: usize) -> Vec<HypothesisSet> {
        s.iter()
            .map(|s| {
                let x = data::normalize_3d(&s.pose3d);
                HypothesisSet { poses: vec![x.clone(); m], z0: Some(x) }
            })
            .collect()
    }

    #[test]
    fn ground_truth_hypotheses_are_perfect() {
        let s = samples(5, 0.3);
        let r = evaluate(&s, &truth_sets(&s, 3), &EvalOptions::default()).unwrap();
        let sum = r.summary();
        assert!(sum.best_mpjpe.abs() < 1e-9 && sum.z0_mpjpe.abs() < 1e-9);
        assert!((sum.best_cps - 300.0).abs() < 1e-9);
        assert_eq!(sum.best_pck, 100.0);
        assert_eq!(r.m_grid, vec![1, 2]);
    }

    #[test]
    fn ambiguity_filter_warns_on_empty_subset() {
        let s = samples(4, 0.0);
        let opts = EvalOptions { ambiguous_only: true, ..EvalOptions::default() };
        let r = evaluate(&s, &truth_sets(&s, 2), &opts).unwrap();
        assert!(r.samples.is_empty());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn mismatched_counts_fail() {
        let s = samples(3, 0.0);
        assert!(evaluate(&s, &truth_sets(&s[..2], 2), &EvalOptions::default()).is_err());
    }

    #[test]
    fn prefix_best_is_monotone() {
        let v = prefix_best(&[5.0, 7.0, 3.0, 4.0, 1.0], &[1, 2, 3, 5, 9]);
        assert_eq!(v, vec![5.0, 5.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn hypothesis_file_roundtrip() {
        let sets = vec![
            HypothesisSet { poses: vec![vec![0.1, -0.2, 1.0 / 3.0], vec![1e-17, 2.0, 3.0]], z0: Some(vec![0.0, 0.5, -0.5]) },
            HypothesisSet { poses: vec![vec![7.0, 8.0, 9.0], vec![1.0, 1.0, 1.0]], z0: Some(vec![0.3, 0.2, 0.1]) },
        ];
        let mut buf = Vec::new();
        write_hypotheses(&mut buf, &sets).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 1 + 2 * 3);
        assert_eq!(read_hypotheses(buf.as_slice()).unwrap(), sets);
    }
}
