//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. `include <path>` reads another file
//! (relative to the including file) in place. Later assignments win, and
//! `--set key=value` overrides are applied after all files. Unknown keys are
//! an error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ambiflow::data::{Camera, DataConfig};
use ambiflow::eval::EvalOptions;
use ambiflow::flow::FlowConfig;
use ambiflow::posedisc::DiscConfig;
use ambiflow::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value `{value}` for `{key}`")]
    BadValue { origin: String, key: String, value: String },
    #[error("{origin}: expected `key = value`, got `{line}`")]
    Syntax { origin: String, line: String },
    #[error("include depth exceeded at {0}")]
    IncludeDepth(PathBuf),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a subcommand can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
    /// Rewrite the checkpoint after this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Frames written by `gen --heatmaps`.
    pub heatmap_frames: usize,
    pub sample_m: usize,
    pub sample_z0_only: bool,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            seed: 0,
            flow: FlowConfig::new(data.skeleton.joint_count()),
            data,
            disc: DiscConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 10,
            heatmap_frames: 64,
            sample_m: ambiflow::eval::DEFAULT_HYPOTHESES,
            sample_z0_only: false,
            eval: EvalOptions::default(),
        }
    }
}

fn parse<T: FromStr>(origin: &str, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { origin: origin.into(), key: key.into(), value: value.into() })
}

fn parse_bool(origin: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { origin: origin.into(), key: key.into(), value: value.into() }),
    }
}

impl RunConfig {
    /// Assign one key.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let f = |v: &str| parse::<f64>(origin, key, v);
        let u = |v: &str| parse::<usize>(origin, key, v);
        let b = |v: &str| parse_bool(origin, key, v);
        match key {
            "seed" => self.seed = parse(origin, key, value)?,
            "data.samples" => self.data.samples = u(value)?,
            "data.occlusion" => self.data.occlusion_rate = f(value)?,
            "data.max_occluded_joints" => self.data.max_occluded_joints = u(value)?,
            "data.occluded_sigma_min" => self.data.occluded_sigma.0 = f(value)?,
            "data.occluded_sigma_max" => self.data.occluded_sigma.1 = f(value)?,
            "data.image_size" => {
                self.data.image_size = u(value)?;
                if let Camera::Orthographic { scale, .. } = self.data.camera {
                    let c = self.data.image_size as f64 / 2.0;
                    self.data.camera = Camera::Orthographic { scale, cx: c, cy: c };
                }
            }
            "data.window" => self.data.window = u(value)?,
            "data.fit_heatmaps" => self.data.fit_heatmaps = b(value)?,
            "data.depth" => self.data.depth = f(value)?,
            "data.camera" => {
                let c = self.data.image_size as f64 / 2.0;
                self.data.camera = match value {
                    "orthographic" => Camera::Orthographic { scale: ambiflow::data::ORTHO_PX_PER_M, cx: c, cy: c },
                    "perspective" => Camera::Perspective { focal: 1000.0, cx: c, cy: c },
                    _ => return Err(ConfigError::BadValue { origin: origin.into(), key: key.into(), value: value.into() }),
                }
            }
            "data.camera_scale" => match &mut self.data.camera {
                Camera::Orthographic { scale, .. } => *scale = f(value)?,
                Camera::Perspective { focal, .. } => *focal = f(value)?,
            },
            "data.heatmap_frames" => self.heatmap_frames = u(value)?,
            "flow.blocks" => self.flow.blocks = u(value)?,
            "flow.hidden" => self.flow.hidden = u(value)?,
            "flow.cond_hidden" => self.flow.cond_hidden = u(value)?,
            "flow.cond_out" => self.flow.cond_out = u(value)?,
            "flow.alpha" => self.flow.alpha = f(value)?,
            "flow.last_layer_scale" => self.flow.last_layer_scale = f(value)?,
            "disc.hidden" => self.disc.hidden = u(value)?,
            "disc.slope" => self.disc.slope = f(value)?,
            "train.epochs" => self.train.epochs = u(value)?,
            "train.batch" => self.train.batch = u(value)?,
            "train.lr" => self.train.lr = f(value)?,
            "train.lr_halve_after" => self.train.lr_halve_after = u(value)?,
            "train.beta1" => self.train.beta1 = f(value)?,
            "train.beta2" => self.train.beta2 = f(value)?,
            "train.hypotheses" => self.train.hypotheses = u(value)?,
            "train.clip" => self.train.clip = f(value)?,
            "train.gp_weight" => self.train.gp_weight = f(value)?,
            "train.checkpoint_every" => self.checkpoint_every = u(value)?,
            "loss.gen" => self.train.weights.gen = f(value)?,
            "loss.mmd" => self.train.weights.mmd = f(value)?,
            "loss.det" => self.train.weights.det = f(value)?,
            "loss.mb" => self.train.weights.mb = f(value)?,
            "loss.hm" => self.train.weights.hm = f(value)?,
            "loss.k" => self.train.weights.k = u(value)?,
            "loss.sigma_t" => self.train.weights.sigma_t = f(value)?,
            "loss.mm_per_px" => self.train.weights.mm_per_px = f(value)?,
            "loss.hm_unit" => self.train.weights.hm_unit = f(value)?,
            "sample.m" => self.sample_m = u(value)?,
            "sample.z0_only" => self.sample_z0_only = b(value)?,
            "eval.ambiguous_only" => self.eval.ambiguous_only = b(value)?,
            "eval.ambiguity_threshold" => self.eval.ambiguity_threshold = f(value)?,
            "eval.noise_baseline" => self.eval.noise_baseline = b(value)?,
            "eval.baseline_depth_sigma" => {
                self.eval.baseline_depth_sigma = if value == "auto" { None } else { Some(f(value)?) }
            }
            "eval.m_grid" => {
                self.eval.m_grid = value.split(',').map(|v| u(v.trim())).collect::<Result<_, _>>()?;
            }
            "eval.procrustes_scale" => self.eval.procrustes_scale = b(value)?,
            "eval.root" => self.eval.root = u(value)?,
            _ => return Err(ConfigError::UnknownKey { origin: origin.into(), key: key.into() }),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order. Feeding the
    /// output back through [`RunConfig::parse_str`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let (camera, camera_scale) = match d.camera {
            Camera::Orthographic { scale, .. } => ("orthographic", scale),
            Camera::Perspective { focal, .. } => ("perspective", focal),
        };
        let w = &self.train.weights;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("seed", self.seed.to_string()),
            ("data.samples", d.samples.to_string()),
            ("data.occlusion", d.occlusion_rate.to_string()),
            ("data.max_occluded_joints", d.max_occluded_joints.to_string()),
            ("data.occluded_sigma_min", d.occluded_sigma.0.to_string()),
            ("data.occluded_sigma_max", d.occluded_sigma.1.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.camera", camera.to_string()),
            ("data.camera_scale", camera_scale.to_string()),
            ("data.depth", d.depth.to_string()),
            ("data.window", d.window.to_string()),
            ("data.fit_heatmaps", d.fit_heatmaps.to_string()),
            ("data.heatmap_frames", self.heatmap_frames.to_string()),
            ("flow.blocks", self.flow.blocks.to_string()),
            ("flow.hidden", self.flow.hidden.to_string()),
            ("flow.cond_hidden", self.flow.cond_hidden.to_string()),
            ("flow.cond_out", self.flow.cond_out.to_string()),
            ("flow.alpha", self.flow.alpha.to_string()),
            ("flow.last_layer_scale", self.flow.last_layer_scale.to_string()),
            ("disc.hidden", self.disc.hidden.to_string()),
            ("disc.slope", self.disc.slope.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_halve_after", t.lr_halve_after.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.hypotheses", t.hypotheses.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.gp_weight", t.gp_weight.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("loss.gen", w.gen.to_string()),
            ("loss.mmd", w.mmd.to_string()),
            ("loss.det", w.det.to_string()),
            ("loss.mb", w.mb.to_string()),
            ("loss.hm", w.hm.to_string()),
            ("loss.k", w.k.to_string()),
            ("loss.sigma_t", w.sigma_t.to_string()),
            ("loss.mm_per_px", w.mm_per_px.to_string()),
            ("loss.hm_unit", w.hm_unit.to_string()),
            ("sample.m", self.sample_m.to_string()),
            ("sample.z0_only", self.sample_z0_only.to_string()),
            ("eval.ambiguous_only", e.ambiguous_only.to_string()),
            ("eval.ambiguity_threshold", e.ambiguity_threshold.to_string()),
            ("eval.noise_baseline", e.noise_baseline.to_string()),
            ("eval.baseline_depth_sigma", e.baseline_depth_sigma.map_or("auto".into(), |v| v.to_string())),
            ("eval.m_grid", e.m_grid.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            ("eval.procrustes_scale", e.procrustes_scale.to_string()),
            ("eval.root", e.root.to_string()),
        ]
    }

    /// The effective configuration as a config file.
    pub fn render(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Apply the lines of `text`; `dir` resolves includes.
    pub fn parse_str(&mut self, text: &str, origin: &str, dir: Option<&Path>) -> Result<(), ConfigError> {
        self.parse_inner(text, origin, dir, 0)
    }

    fn parse_inner(&mut self, text: &str, origin: &str, dir: Option<&Path>, depth: usize) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let here = format!("{origin}:{}", n + 1);
            if let Some(rest) = line.strip_prefix("include ") {
                let path = dir.map_or_else(|| PathBuf::from(rest.trim()), |d| d.join(rest.trim()));
                self.load_inner(&path, depth + 1)?;
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { origin: here.clone(), line: line.into() })?;
            self.set(k.trim(), v.trim(), &here)?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), ConfigError> {
        self.load_inner(path, 0)
    }

    fn load_inner(&mut self, path: &Path, depth: usize) -> Result<(), ConfigError> {
        if depth > 16 {
            return Err(ConfigError::IncludeDepth(path.into()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        self.parse_inner(&text, &path.display().to_string(), path.parent(), depth)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax { origin: "--set".into(), line: kv.into() })?;
        self.set(k.trim(), v.trim(), "--set")
    }

    /// Propagate the seed and joint count, then check every section.
    pub fn finish(&mut self) -> Result<(), ConfigError> {
        let joints = self.data.skeleton.joint_count();
        let hips = self.data.skeleton.hips.len();
        self.data.seed = self.seed;
        self.flow.joints = joints;
        self.flow.cond_in = 6 * joints.saturating_sub(hips);
        self.flow.seed = self.seed;
        self.disc.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        let invalid = |e: ambiflow::Error| ConfigError::Invalid(e.to_string());
        self.flow.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if !(0.0..=1.0).contains(&self.data.occlusion_rate) {
            return Err(ConfigError::Invalid(format!("data.occlusion {} outside [0, 1]", self.data.occlusion_rate)));
        }
        let (lo, hi) = self.data.occluded_sigma;
        if !(lo > 0.0 && lo < hi) {
            return Err(ConfigError::Invalid("occluded σ range must satisfy 0 < min < max".into()));
        }
        if self.sample_m == 0 {
            return Err(ConfigError::Invalid("sample.m must be at least 1".into()));
        }
        if self.disc.hidden == 0 || self.data.window < 8 {
            return Err(ConfigError::Invalid("disc.hidden must be positive and data.window at least 8".into()));
        }
        if self.eval.root >= joints {
            return Err(ConfigError::Invalid(format!("eval.root {} out of range", self.eval.root)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_roundtrips() {
        let mut a = RunConfig::default();
        a.apply_override("train.lr=0.0004").unwrap();
        a.apply_override("eval.m_grid=1,3,7").unwrap();
        a.apply_override("data.camera=perspective").unwrap();
        let mut b = RunConfig::default();
        b.parse_str(&a.render(), "echo", None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("train.epoch=3"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(c.parse_str("seed 3", "x", None), Err(ConfigError::Syntax { .. })));
        assert!(matches!(c.apply_override("train.batch=-1"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn includes_resolve_relative_to_the_file() {
        let dir = std::env::temp_dir().join(format!("ambiflow-config-{}", std::process::id()));
        std::fs::create_dir_all(dir.join("sub")).unwrap();
        std::fs::write(dir.join("sub/base.conf"), "train.epochs = 3\nseed = 9 # comment\n").unwrap();
        std::fs::write(dir.join("main.conf"), "include sub/base.conf\ntrain.epochs = 4\n").unwrap();
        let mut c = RunConfig::default();
        c.load(&dir.join("main.conf")).unwrap();
        assert_eq!((c.train.epochs, c.seed), (4, 9));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
