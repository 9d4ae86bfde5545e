//! Bidirectional training of the flow with the pose critic.
//!
//! One step runs, in order: the forward path (`L_2D`, `L_MMD`), `L` inverse
//! passes from random latents (`L_gen`, `L_MB`, `L_HM`), the inverse pass
//! from the forward latents (`L_det`), one clipped Adam update of the flow
//! and encoder, and one WGAN-GP update of the critic on fresh samples.
//! All gradients of the flow objective are accumulated on one tape before
//! the update.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::binio::{Reader, Writer};
use crate::data::{self, NormStats, Sample};
use crate::error::{Error, Result};
use crate::heatmap::Cov2;
use crate::losses::{self, LossParts, LossWeights, BANDWIDTHS};
use crate::model::{read_model, write_model, Model};
use crate::ndcore::{clip_gradients, Adam, Graph, Tensor, TensorError};
use crate::posedisc::{self, DEFAULT_GP_WEIGHT};
use crate::rng::{self, Rng};

/// Network-ready training arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub joints: usize,
    /// Mean-centred 3D poses (m).
    pub x: Vec<Vec<f64>>,
    /// Normalized 2D detections.
    pub y: Vec<Vec<f64>>,
    /// Condition features.
    pub chat: Vec<Vec<f64>>,
    /// Fitted heatmap covariance of every joint (px²).
    pub sigma: Vec<Vec<Cov2>>,
    pub stats: Vec<NormStats>,
}

impl TrainingSet {
    pub fn from_samples(samples: &[Sample], hips: &[usize]) -> Result<Self> {
        let joints = samples.first().map_or(0, Sample::joint_count);
        let mut set = Self { joints, x: vec![], y: vec![], chat: vec![], sigma: vec![], stats: vec![] };
        for s in samples {
            if s.joint_count() != joints {
                return Err(Error::invalid("samples disagree on joint count"));
            }
            let (y, stats) = data::normalize_2d(&s.pose2d)?;
            set.chat.push(data::condition_features(&s.gaussians, &stats, hips)?);
            set.x.push(data::normalize_3d(&s.pose3d));
            set.y.push(y);
            set.sigma.push(s.gaussians.iter().map(|g| g.cov).collect());
            set.stats.push(stats);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<f64>>| idx.iter().map(|&i| v[i].clone()).collect();
        Self {
            joints: self.joints,
            x: pick(&self.x),
            y: pick(&self.y),
            chat: pick(&self.chat),
            sigma: idx.iter().map(|&i| self.sigma[i].clone()).collect(),
            stats: idx.iter().map(|&i| self.stats[i]).collect(),
        }
    }

    fn rows(v: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_rows(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// The learning rate is halved for every epoch after this one.
    pub lr_halve_after: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Latent samples per training pose (`L`).
    pub hypotheses: usize,
    /// Gradients are clamped to `[-clip, clip]`.
    pub clip: f64,
    pub weights: LossWeights,
    pub gp_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 155,
            batch: 64,
            lr: 1e-4,
            lr_halve_after: 150,
            beta1: 0.5,
            beta2: 0.9,
            hypotheses: 200,
            clip: 15.0,
            weights: LossWeights::default(),
            gp_weight: DEFAULT_GP_WEIGHT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch < 2 || self.hypotheses < 2 || !(self.lr > 0.0) || !(self.clip > 0.0) || self.gp_weight < 0.0 {
            return Err(Error::invalid("batch and hypotheses must be ≥ 2; lr and clip positive"));
        }
        if self.weights.k > self.hypotheses {
            return Err(Error::invalid(format!("k = {} exceeds L = {}", self.weights.k, self.hypotheses)));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_halve_after {
            self.lr * 0.5
        } else {
            self.lr
        }
    }

    fn needs_inverse_samples(&self) -> bool {
        let w = &self.weights;
        w.gen > 0.0 || w.mb > 0.0 || w.hm > 0.0
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub l2d: f64,
    pub gen: f64,
    pub mmd: f64,
    pub det: f64,
    pub mb: f64,
    pub hm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub batch: usize,
    pub lr: f64,
    pub losses: LossValues,
    pub disc_wasserstein: f64,
    pub disc_penalty: f64,
    /// Largest absolute per-coordinate mean of the step's sampled latents.
    pub z_mean_max: f64,
    /// Number of latent vectors that mean was taken over.
    pub z_count: usize,
}

/// Flow gradients of one batch before any update.
#[derive(Debug, Clone)]
pub struct FlowGradients {
    pub losses: LossValues,
    pub grads: Vec<Tensor>,
    pub z_mean_max: f64,
    pub z_count: usize,
}

fn numeric(term: &'static str) -> impl Fn(TensorError) -> Error {
    move |e| Error::Numeric(format!("{term}: {e}"))
}

fn with_term<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => Error::Numeric(format!("{term}: {t}")),
        other => other,
    })
}

fn check_finite(values: &LossValues) -> Result<()> {
    let named = [
        ("L_2D", values.l2d),
        ("L_gen", values.gen),
        ("L_MMD", values.mmd),
        ("L_det", values.det),
        ("L_MB", values.mb),
        ("L_HM", values.hm),
        ("total", values.total),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    Ok(())
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub flow_opt: Adam,
    pub disc_opt: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let flow_opt = Adam::new(&model.flow.tensors(), config.lr, config.beta1, config.beta2);
        let disc_opt = Adam::new(&model.disc.tensors(), config.lr, config.beta1, config.beta2);
        Ok(Self { model, config, flow_opt, disc_opt, epoch: 0, step: 0 })
    }

    /// Gradients of the weighted flow objective on the samples `idx`.
    pub fn flow_gradients(&self, set: &TrainingSet, idx: &[usize], r: &mut Rng) -> Result<FlowGradients> {
        let cfg = &self.config;
        let w = &cfg.weights;
        let n = idx.len();
        let j = set.joints;
        let l = cfg.hypotheses;
        let mut g = Graph::new();
        let flow = self.model.flow.bind(&mut g, true);
        let critic = self.model.disc.bind(&mut g, false);

        let chat = g.constant(TrainingSet::rows(&set.chat, idx)?);
        let x_t = TrainingSet::rows(&set.x, idx)?;
        let y_t = TrainingSet::rows(&set.y, idx)?;
        let x = g.constant(x_t.clone());
        let y = g.constant(y_t.clone());
        let c = flow.encode(&mut g, chat).map_err(numeric("condition encoder"))?;

        // (1) Forward path.
        let (yz, _) = flow.forward(&mut g, x, c).map_err(numeric("forward path"))?;
        let (y_hat, z_det) = g.split(yz, 2 * j)?;
        let l2d = losses::l2d(&mut g, y, y_hat).map_err(numeric("L_2D"))?;
        let z_mmd = rng::normals(r, n * j);
        let mut z_all = z_mmd.clone();
        let mut target = Vec::with_capacity(n * 3 * j);
        for (i, yi) in y_t.to_rows().iter().enumerate() {
            target.extend_from_slice(yi);
            target.extend_from_slice(&z_mmd[i * j..(i + 1) * j]);
        }
        let v = g.constant(Tensor::new(vec![n, 3 * j], target)?);
        let y_blocked = g.stop_grad(y_hat)?;
        let v_hat = g.concat(&[y_blocked, z_det])?;
        let mmd = with_term("L_MMD", losses::mmd_unbiased(&mut g, v, v_hat, &BANDWIDTHS))?;

        // (2) Inverse passes from random latents.
        let zero = g.scalar(0.0);
        let (gen, mb, hm) = if cfg.needs_inverse_samples() {
            let z_inv = rng::normals(r, n * l * j);
            let mut yz_rows = Vec::with_capacity(n * l * 3 * j);
            for (i, yi) in y_t.to_rows().iter().enumerate() {
                for h in 0..l {
                    yz_rows.extend_from_slice(yi);
                    let k = (i * l + h) * j;
                    yz_rows.extend_from_slice(&z_inv[k..k + j]);
                }
            }
            z_all.extend_from_slice(&z_inv);
            let yz_inv = g.constant(Tensor::new(vec![n * l, 3 * j], yz_rows)?);
            let rep: Vec<usize> = (0..n * l).map(|i| i / l).collect();
            let c_rep = g.gather_rows(c, &rep)?;
            let hyps = flow.inverse(&mut g, yz_inv, c_rep).map_err(numeric("inverse path"))?;
            let gen = posedisc::gen_loss(&mut g, &critic, hyps).map_err(numeric("L_gen"))?;
            let mb = with_term("L_MB", losses::l_mb(&mut g, hyps, &x_t, l, w.k))?;
            let hat = with_term("L_HM", losses::hypothesis_cov_px(&mut g, hyps, n, l, w.px2_per_m2()))?;
            let sigma: Vec<Cov2> = idx.iter().flat_map(|&i| set.sigma[i].iter().copied()).collect();
            let hm = with_term("L_HM", losses::l_hm(&mut g, &sigma, hat, w.sigma_t))?;
            let hm = g.scale(hm, w.hm_unit)?;
            (gen, mb, hm)
        } else {
            (zero, zero, zero)
        };

        // (3) Inverse pass from the forward latents.
        let yz_det = g.concat(&[y, z_det])?;
        let x_det = flow.inverse(&mut g, yz_det, c).map_err(numeric("deterministic inverse"))?;
        let det = losses::l_det(&mut g, x, x_det).map_err(numeric("L_det"))?;

        let parts = LossParts { l2d, gen, mmd, det, mb, hm };
        let total = losses::total_nf_loss(&mut g, &parts, w).map_err(numeric("total"))?;
        let item = |g: &Graph, v| g.value(v).item();
        let values = LossValues {
            l2d: item(&g, l2d),
            gen: item(&g, gen),
            mmd: item(&g, mmd),
            det: item(&g, det),
            mb: item(&g, mb),
            hm: item(&g, hm),
            total: item(&g, total),
        };
        check_finite(&values)?;
        let mut grads = g.backward(total).map_err(numeric("flow backward"))?;
        let grads = flow.vars().into_iter().map(|v| grads.take(v)).collect();
        let count = z_all.len() / j;
        let z_mean_max = (0..j)
            .map(|k| (z_all.iter().skip(k).step_by(j).sum::<f64>() / count as f64).abs())
            .fold(0.0, f64::max);
        Ok(FlowGradients { losses: values, grads, z_mean_max, z_count: count })
    }

    /// One critic update on fresh samples; returns `(wasserstein, penalty)`.
    fn disc_step(&mut self, set: &TrainingSet, idx: &[usize], r: &mut Rng, lr: f64) -> Result<(f64, f64)> {
        let n = idx.len();
        let j = set.joints;
        let mut yz = Vec::with_capacity(n * 3 * j);
        for &i in idx {
            yz.extend_from_slice(&set.y[i]);
            yz.extend(rng::normals(r, j));
        }
        let chat = TrainingSet::rows(&set.chat, idx)?;
        let fake = self.model.flow.inverse_batch(&Tensor::new(vec![n, 3 * j], yz)?, &chat)?;
        let real = TrainingSet::rows(&set.x, idx)?;
        let eps: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut g = Graph::new();
        let critic = self.model.disc.bind(&mut g, true);
        let loss = with_term("critic", posedisc::disc_loss(&mut g, &critic, &real, &fake, &eps, self.config.gp_weight))?;
        let (wd, gp) = (g.value(loss.wasserstein).item(), g.value(loss.penalty).item());
        if !(wd.is_finite() && gp.is_finite()) {
            return Err(Error::Numeric(format!("critic loss is not finite ({wd}, {gp})")));
        }
        let mut grads = g.backward(loss.total).map_err(numeric("critic backward"))?;
        let mut grads: Vec<Tensor> = critic.vars().into_iter().map(|v| grads.take(v)).collect();
        clip_gradients(&mut grads, -self.config.clip, self.config.clip)?;
        self.disc_opt.lr = lr;
        self.disc_opt.step(&mut self.model.disc.tensors_mut(), &grads)?;
        Ok((wd, gp))
    }

    /// Run one full training step on the samples `idx` of `set`.
    pub fn train_step(&mut self, set: &TrainingSet, idx: &[usize]) -> Result<StepReport> {
        let epoch = self.epoch + 1;
        let lr = self.config.lr_at(epoch);
        let mut r = rng::stream(self.config.seed, "train-step", self.step);
        let fg = self.flow_gradients(set, idx, &mut r)?;
        let mut grads = fg.grads;
        clip_gradients(&mut grads, -self.config.clip, self.config.clip)?;
        self.flow_opt.lr = lr;
        self.flow_opt.step(&mut self.model.flow.tensors_mut(), &grads)?;
        let (wd, gp) = self.disc_step(set, idx, &mut r, lr)?;
        self.step += 1;
        Ok(StepReport {
            epoch,
            step: self.step,
            batch: idx.len(),
            lr,
            losses: fg.losses,
            disc_wasserstein: wd,
            disc_penalty: gp,
            z_mean_max: fg.z_mean_max,
            z_count: fg.z_count,
        })
    }

    /// Sample order of `epoch` (1-based), split into batches. A trailing batch
    /// smaller than 2 is dropped.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "shuffle", epoch as u64));
        order.chunks(self.config.batch).filter(|b| b.len() >= 2).map(<[usize]>::to_vec).collect()
    }

    pub fn train_epoch(&mut self, set: &TrainingSet) -> Result<Vec<StepReport>> {
        let batches = self.batches(set.len(), self.epoch + 1);
        let mut out = Vec::with_capacity(batches.len());
        for b in &batches {
            out.push(self.train_step(set, b)?);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Train until `config.epochs` epochs are complete. If `checkpoint` is
    /// given, it is rewritten after every `every` epochs and at the end.
    pub fn train(
        &mut self,
        set: &TrainingSet,
        checkpoint: Option<(&Path, usize)>,
        mut on_epoch: impl FnMut(&Trainer, &[StepReport]),
    ) -> Result<Vec<StepReport>> {
        if set.len() < 2 {
            return Err(Error::invalid("training needs at least 2 samples"));
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let steps = self.train_epoch(set)?;
            on_epoch(self, &steps);
            history.extend(steps);
            if let Some((path, every)) = checkpoint {
                if self.epoch == self.config.epochs || (every > 0 && self.epoch % every == 0) {
                    self.save_checkpoint(path)?;
                }
            }
        }
        Ok(history)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CKPT_MAGIC.as_bytes());
        w.u32(CKPT_VERSION);
        write_model(&mut w, &self.model);
        w.u64(self.epoch as u64);
        w.u64(self.step);
        let next = rng::save_state(&rng::stream(self.config.seed, "train-step", self.step));
        w.bytes(&next.seed);
        w.u64(next.stream);
        w.u128(next.word_pos);
        for opt in [&self.flow_opt, &self.disc_opt] {
            w.f64(opt.lr);
            w.u64(opt.state.step);
            for t in opt.state.m.iter().chain(&opt.state.v) {
                w.f64s(t.data());
            }
        }
        w.finish_crc()
    }

    /// Resume from a checkpoint written by a run with the same `config`.
    pub fn load_checkpoint(path: &Path, config: TrainConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes, config)
    }

    pub fn decode_checkpoint(bytes: &[u8], config: TrainConfig) -> Result<Self> {
        let mut head = Reader::new(bytes);
        head.magic(CKPT_MAGIC)?;
        head.version(CKPT_VERSION)?;
        let mut r = Reader::with_crc(bytes)?;
        r.take(CKPT_MAGIC.len() + 4)?;
        let model = read_model(&mut r)?;
        let mut t = Trainer::new(model, config)?;
        t.epoch = r.u64()? as usize;
        t.step = r.u64()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let state = rng::RngState { seed, stream: r.u64()?, word_pos: r.u128()? };
        if rng::save_state(&rng::stream(t.config.seed, "train-step", t.step)) != state {
            return Err(Error::invalid("checkpoint was written with a different seed"));
        }
        for opt in [&mut t.flow_opt, &mut t.disc_opt] {
            opt.lr = r.f64()?;
            opt.state.step = r.u64()?;
            for m in opt.state.m.iter_mut().chain(opt.state.v.iter_mut()) {
                let vals = r.f64s(m.len())?;
                m.data_mut().copy_from_slice(&vals);
            }
        }
        r.expect_end()?;
        Ok(t)
    }
}

const CKPT_MAGIC: &str = "AMBICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CKPT_VERSION: u32 = CHECKPOINT_VERSION;

pub const HISTORY_HEADER: &str = "epoch,step,batch,lr,l2d,gen,mmd,det,mb,hm,total,disc_wasserstein,disc_penalty,z_mean_max";

/// One CSV row per step.
pub fn write_history(mut out: impl Write, history: &[StepReport], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "{HISTORY_HEADER}")?;
    }
    for s in history {
        let l = &s.losses;
        writeln!(
            out,
            "{},{},{},{:e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            s.epoch, s.step, s.batch, s.lr, l.l2d, l.gen, l.mmd, l.det, l.mb, l.hm, l.total, s.disc_wasserstein, s.disc_penalty, s.z_mean_max
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::flow::{FlowConfig, FlowModel};
    use crate::posedisc::{DiscConfig, Discriminator};
    use crate::skeleton::Skeleton;

    fn setup(samples: usize) -> (TrainingSet, Model) {
        let cfg = DataConfig { samples, fit_heatmaps: false, seed: 11, ..DataConfig::default() };
        let set = TrainingSet::from_samples(&data::generate_dataset(&cfg).unwrap(), &cfg.skeleton.hips).unwrap();
        let fc = FlowConfig { hidden: 16, cond_hidden: 8, cond_out: 4, blocks: 2, seed: 1, ..FlowConfig::new(16) };
        let model = Model {
            flow: FlowModel::new(fc).unwrap(),
            disc: Discriminator::new(&Skeleton::human16(), &DiscConfig { hidden: 8, ..DiscConfig::default() }),
        };
        (set, model)
    }

    fn small_config() -> TrainConfig {
        TrainConfig { batch: 4, hypotheses: 6, epochs: 2, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(150), 1e-4);
        assert_eq!(c.lr_at(151), 0.5e-4);
    }

    #[test]
    fn steps_are_deterministic_and_isolated() {
        let (set, model) = setup(10);
        let mut a = Trainer::new(model.clone(), small_config()).unwrap();
        let mut b = Trainer::new(model.clone(), small_config()).unwrap();
        let ra = a.train_step(&set, &[0, 1, 2, 3]).unwrap();
        let rb = b.train_step(&set, &[0, 1, 2, 3]).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model, b.model);
        // The flow update leaves the critic alone: gradients w.r.t. the
        // critic do not exist in the flow objective.
        let mut r = rng::stream(0, "x", 0);
        let fg = a.flow_gradients(&set, &[4, 5, 6], &mut r).unwrap();
        assert_eq!(fg.grads.len(), a.model.flow.tensors().len());
    }

    #[test]
    fn only_l2d_matches_supervised_regression() {
        let (set, model) = setup(6);
        let mut cfg = small_config();
        cfg.weights = LossWeights { mmd: 0.0, det: 0.0, mb: 0.0, hm: 0.0, gen: 0.0, ..LossWeights::default() };
        let t = Trainer::new(model.clone(), cfg).unwrap();
        let idx = [0, 2, 4];
        let fg = t.flow_gradients(&set, &idx, &mut rng::stream(1, "x", 0)).unwrap();
        let mut g = Graph::new();
        let flow = model.flow.bind(&mut g, true);
        let chat = g.constant(TrainingSet::rows(&set.chat, &idx).unwrap());
        let x = g.constant(TrainingSet::rows(&set.x, &idx).unwrap());
        let y = g.constant(TrainingSet::rows(&set.y, &idx).unwrap());
        let c = flow.encode(&mut g, chat).unwrap();
        let (yz, _) = flow.forward(&mut g, x, c).unwrap();
        let (yh, _) = g.split(yz, 32).unwrap();
        let l = losses::l2d(&mut g, y, yh).unwrap();
        let grads = g.backward(l).unwrap();
        for (v, got) in flow.vars().into_iter().zip(&fg.grads) {
            assert!(grads.get(v).max_abs_diff(got) < 1e-12);
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (set, model) = setup(9);
        let mut full = Trainer::new(model.clone(), small_config()).unwrap();
        let hist_full = full.train(&set, None, |_, _| {}).unwrap();
        let mut first = Trainer::new(model, TrainConfig { epochs: 1, ..small_config() }).unwrap();
        let mut hist = first.train(&set, None, |_, _| {}).unwrap();
        let bytes = first.encode_checkpoint();
        let mut resumed = Trainer::decode_checkpoint(&bytes, small_config()).unwrap();
        hist.extend(resumed.train(&set, None, |_, _| {}).unwrap());
        assert_eq!(hist, hist_full);
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.encode_checkpoint(), full.encode_checkpoint());
    }

    #[test]
    fn batches_keep_partial_of_two() {
        let (_, model) = setup(2);
        let t = Trainer::new(model, small_config()).unwrap();
        let b = t.batches(10, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(t.batches(9, 1).len(), 2);
    }
}
