//! Conditional affine-coupling flow between a 3D pose `x ∈ ℝ^{3J}` and its
//! 2D observation plus latent code `[y | z] ∈ ℝ^{2J} × ℝ^J`.
//!
//! Every coupling block splits its input `u = [u1 | u2]` and computes
//!
//! ```text
//! v2 = u2 ⊙ exp(s1(u1, c)) + t1(u1, c)
//! v1 = u1 ⊙ exp(s2(v2, c)) + t2(v2, c)
//! ```
//!
//! where each subnetwork predicts `[s | t]` jointly and the scales pass
//! through the soft clamp `σ_α(r) = (2α/π)·atan(r/α)`. A fixed permutation
//! follows every block. The encoded condition `c = h(ĉ)` is concatenated to
//! the input of every subnetwork.
//!
//! ```
//! use ambiflow::flow::{FlowConfig, FlowModel};
//!
//! let cfg = FlowConfig { hidden: 32, cond_hidden: 16, cond_out: 8, ..FlowConfig::new(16) };
//! let model = FlowModel::new(cfg).unwrap();
//! let x = vec![0.1; 48];
//! let chat = vec![0.0; 78];
//! let (y, z) = model.flow_forward(&x, &chat).unwrap();
//! assert_eq!((y.len(), z.len()), (32, 16));
//! let back = model.flow_inverse(&y, &z, &chat).unwrap();
//! assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
//! ```

use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor, TensorError, Var};
use crate::nn::{Activation, BoundMlp, Mlp};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub joints: usize,
    pub blocks: usize,
    /// Width of the hidden layer of every coupling subnetwork.
    pub hidden: usize,
    /// Length of the raw condition `ĉ`.
    pub cond_in: usize,
    pub cond_hidden: usize,
    pub cond_out: usize,
    /// Soft-clamp bound of the coupling scales.
    pub alpha: f64,
    pub seed: u64,
    /// Factor applied to the He-initialized last layer of every coupling
    /// subnetwork. `0` makes a fresh flow the identity up to the permutations.
    pub last_layer_scale: f64,
}

impl FlowConfig {
    /// Defaults for `joints` joints with three hip joints removed from `ĉ`.
    pub fn new(joints: usize) -> Self {
        Self {
            joints,
            blocks: 8,
            hidden: 1024,
            cond_in: 6 * joints.saturating_sub(3),
            cond_hidden: 256,
            cond_out: 56,
            alpha: 2.0,
            seed: 0,
            last_layer_scale: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        3 * self.joints
    }

    /// Width of the first half of a block's input.
    pub fn split(&self) -> usize {
        self.dim() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints < 1 || self.blocks < 1 || self.hidden < 1 || self.cond_hidden < 1 {
            return Err(Error::invalid("flow sizes must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("clamp α must be positive, got {}", self.alpha)));
        }
        if !(self.last_layer_scale >= 0.0 && self.last_layer_scale.is_finite()) {
            return Err(Error::invalid("last-layer scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `σ_α(r) = (2α/π)·atan(r/α)`.
pub fn soft_clamp(r: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("clamp α must be positive, got {alpha}")));
    }
    Ok(2.0 * alpha / PI * (r / alpha).atan())
}

fn clamp_var(g: &mut Graph, r: Var, alpha: f64) -> std::result::Result<Var, TensorError> {
    let a = g.scale(r, 1.0 / alpha)?;
    let a = g.atan(a)?;
    g.scale(a, 2.0 * alpha / PI)
}

fn clamp_tensor(r: &Tensor, alpha: f64) -> Tensor {
    r.map(|v| 2.0 * alpha / PI * (v / alpha).atan())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    /// `[u1 | c] -> [s1 | t1]`, each half of width `dim - split`.
    pub subnet1: Mlp,
    /// `[v2 | c] -> [s2 | t2]`, each half of width `split`.
    pub subnet2: Mlp,
    pub split: usize,
    pub alpha: f64,
}

impl CouplingBlock {
    pub fn new(dim: usize, split: usize, cond: usize, hidden: usize, alpha: f64, last_scale: f64, rng: &mut Rng) -> Self {
        let d2 = dim - split;
        let mut subnet1 = Mlp::new(&[split + cond, hidden, 2 * d2], Activation::Relu, rng);
        let mut subnet2 = Mlp::new(&[d2 + cond, hidden, 2 * split], Activation::Relu, rng);
        subnet1.scale_last(last_scale);
        subnet2.scale_last(last_scale);
        Self { subnet1, subnet2, split, alpha }
    }

    /// Tape-free forward pass; returns the output and per-row `Σs`.
    pub fn forward(&self, u: &Tensor, c: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let d1 = self.split;
        let (u1, u2) = split_cols(u, d1);
        let d2 = u2.cols();
        let (s1, t1) = split_cols(&self.subnet1.apply(&concat_cols(&u1, c))?, d2);
        let s1 = clamp_tensor(&s1, self.alpha);
        let v2 = affine(&u2, &s1, &t1, 1.0);
        let (s2, t2) = split_cols(&self.subnet2.apply(&concat_cols(&v2, c))?, d1);
        let s2 = clamp_tensor(&s2, self.alpha);
        let v1 = affine(&u1, &s2, &t2, 1.0);
        let logdet = (0..u.rows()).map(|r| s1.row_slice(r).iter().chain(s2.row_slice(r)).sum()).collect();
        Ok((concat_cols(&v1, &v2), logdet))
    }

    /// Tape-free exact inverse of [`CouplingBlock::forward`].
    pub fn inverse(&self, v: &Tensor, c: &Tensor) -> Result<Tensor> {
        let d1 = self.split;
        let (v1, v2) = split_cols(v, d1);
        let d2 = v2.cols();
        let (s2, t2) = split_cols(&self.subnet2.apply(&concat_cols(&v2, c))?, d1);
        let s2 = clamp_tensor(&s2, self.alpha);
        let u1 = affine(&v1, &s2, &t2, -1.0);
        let (s1, t1) = split_cols(&self.subnet1.apply(&concat_cols(&u1, c))?, d2);
        let s1 = clamp_tensor(&s1, self.alpha);
        let u2 = affine(&v2, &s1, &t1, -1.0);
        Ok(concat_cols(&u1, &u2))
    }
}

/// Forward `u ⊙ exp(s) + t` (`dir = 1`) or inverse `(u - t) ⊙ exp(-s)`.
fn affine(u: &Tensor, s: &Tensor, t: &Tensor, dir: f64) -> Tensor {
    let data = u
        .data()
        .iter()
        .zip(s.data())
        .zip(t.data())
        .map(|((&u, &s), &t)| if dir > 0.0 { u * s.exp() + t } else { (u - t) * (-s).exp() })
        .collect();
    Tensor::new(u.shape().to_vec(), data).expect("same shape")
}

fn split_cols(x: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (rows, cols) = x.dims2();
    let mut a = Vec::with_capacity(rows * at);
    let mut b = Vec::with_capacity(rows * (cols - at));
    for r in 0..rows {
        let row = x.row_slice(r);
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    (Tensor::new(vec![rows, at], a).expect("sized"), Tensor::new(vec![rows, cols - at], b).expect("sized"))
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let rows = a.rows();
    let mut out = Vec::with_capacity(rows * (a.cols() + b.cols()));
    for r in 0..rows {
        out.extend_from_slice(a.row_slice(r));
        out.extend_from_slice(b.row_slice(r));
    }
    Tensor::new(vec![rows, a.cols() + b.cols()], out).expect("sized")
}

fn gather_cols(x: &Tensor, idx: &[usize]) -> Tensor {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * idx.len());
    for r in 0..rows {
        let row = x.row_slice(r);
        out.extend(idx.iter().map(|&i| row[i]));
    }
    Tensor::new(vec![rows, idx.len()], out).expect("sized")
}

fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Coupling blocks, their permutations and the condition encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub encoder: Mlp,
    pub blocks: Vec<CouplingBlock>,
    /// `permutations[b][i]` is the block output column that becomes column `i`.
    pub permutations: Vec<Vec<usize>>,
}

/// 3D pose hypotheses generated for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    /// Joint-major poses from `z ~ N(0, I)`.
    pub poses: Vec<Vec<f64>>,
    /// Pose from the all-zero latent, when requested.
    pub z0: Option<Vec<f64>>,
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.dim();
        let mut r = rng::stream(config.seed, "flow-init", 0);
        let encoder = Mlp::new(&[config.cond_in, config.cond_hidden, config.cond_out], Activation::Relu, &mut r);
        let blocks = (0..config.blocks)
            .map(|_| {
                CouplingBlock::new(dim, config.split(), config.cond_out, config.hidden, config.alpha, config.last_layer_scale, &mut r)
            })
            .collect();
        let permutations = (0..config.blocks)
            .map(|b| {
                let mut p: Vec<usize> = (0..dim).collect();
                p.shuffle(&mut rng::stream(config.seed, "flow-permutation", b as u64));
                p
            })
            .collect();
        Ok(Self { config, encoder, blocks, permutations })
    }

    /// Check that deserialized parts are consistent with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let dim = self.config.dim();
        if self.blocks.len() != self.config.blocks || self.permutations.len() != self.config.blocks {
            return Err(Error::invalid("block count does not match the config"));
        }
        if self.permutations.iter().any(|p| !is_permutation(p, dim)) {
            return Err(Error::invalid("stored permutation is not a bijection"));
        }
        if self.encoder.input_dim() != self.config.cond_in || self.encoder.output_dim() != self.config.cond_out {
            return Err(Error::invalid("condition encoder dimensions do not match the config"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        for b in &self.blocks {
            out.extend(b.subnet1.tensors());
            out.extend(b.subnet2.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        for b in &mut self.blocks {
            out.extend(b.subnet1.tensors_mut());
            out.extend(b.subnet2.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFlow {
        BoundFlow {
            encoder: self.encoder.bind(g, trainable),
            blocks: self.blocks.iter().map(|b| (b.subnet1.bind(g, trainable), b.subnet2.bind(g, trainable))).collect(),
            permutations: self.permutations.clone(),
            inverse_permutations: self.permutations.iter().map(|p| invert_permutation(p)).collect(),
            split: self.config.split(),
            alpha: self.config.alpha,
        }
    }

    fn check_rows(&self, what: &str, t: &Tensor, cols: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != cols {
            return Err(Error::invalid(format!("{what} has shape {:?}, expected [n, {cols}]", t.shape())));
        }
        Ok(())
    }

    /// `c = h(ĉ)` for a `[n, cond_in]` batch.
    pub fn encode(&self, chat: &Tensor) -> Result<Tensor> {
        self.check_rows("condition", chat, self.config.cond_in)?;
        Ok(self.encoder.apply(chat)?)
    }

    /// `x -> [y | z]` for a batch, with the per-row log-determinant.
    pub fn forward_batch(&self, x: &Tensor, chat: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_rows("pose batch", x, self.dim())?;
        let c = self.encode(chat)?;
        self.forward_encoded(x, &c)
    }

    fn forward_encoded(&self, x: &Tensor, c: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if x.rows() != c.rows() {
            return Err(Error::invalid(format!("{} poses but {} conditions", x.rows(), c.rows())));
        }
        let mut u = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for (block, perm) in self.blocks.iter().zip(&self.permutations) {
            let (v, ld) = block.forward(&u, c)?;
            for (a, b) in logdet.iter_mut().zip(ld) {
                *a += b;
            }
            u = gather_cols(&v, perm);
        }
        if !u.all_finite() {
            return Err(Error::Numeric("flow forward produced a non-finite value".into()));
        }
        Ok((u, logdet))
    }

    /// `[y | z] -> x` for a batch.
    pub fn inverse_batch(&self, yz: &Tensor, chat: &Tensor) -> Result<Tensor> {
        self.check_rows("latent batch", yz, self.dim())?;
        let c = self.encode(chat)?;
        self.inverse_encoded(yz, &c)
    }

    fn inverse_encoded(&self, yz: &Tensor, c: &Tensor) -> Result<Tensor> {
        if yz.rows() != c.rows() {
            return Err(Error::invalid(format!("{} inputs but {} conditions", yz.rows(), c.rows())));
        }
        let mut v = yz.clone();
        for (block, perm) in self.blocks.iter().zip(&self.permutations).rev() {
            let u = gather_cols(&v, &invert_permutation(perm));
            v = block.inverse(&u, c)?;
        }
        if !v.all_finite() {
            return Err(Error::Numeric("flow inverse produced a non-finite value".into()));
        }
        Ok(v)
    }

    /// Predicted 2D pose and latent code for one pose.
    pub fn flow_forward(&self, x: &[f64], chat: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (out, _) = self.forward_batch(&Tensor::row(x.to_vec()), &Tensor::row(chat.to_vec()))?;
        let y2 = 2 * self.config.joints;
        let d = out.into_data();
        Ok((d[..y2].to_vec(), d[y2..].to_vec()))
    }

    /// 3D pose for a 2D pose and latent code.
    pub fn flow_inverse(&self, y: &[f64], z: &[f64], chat: &[f64]) -> Result<Vec<f64>> {
        let j = self.config.joints;
        if y.len() != 2 * j || z.len() != j {
            return Err(Error::invalid(format!("expected |y| = {} and |z| = {j}, got {} and {}", 2 * j, y.len(), z.len())));
        }
        let yz = Tensor::row(y.iter().chain(z).copied().collect());
        Ok(self.inverse_batch(&yz, &Tensor::row(chat.to_vec()))?.into_data())
    }

    /// `log |det ∂[y|z]/∂x|`, the sum of every clamped scale.
    pub fn log_abs_det_jacobian(&self, x: &[f64], chat: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(&Tensor::row(x.to_vec()), &Tensor::row(chat.to_vec()))?.1[0])
    }

    /// One pose per latent row of `zs` (each of length `J`), all for the same `y`.
    pub fn hypotheses_from(&self, y: &[f64], chat: &[f64], zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let j = self.config.joints;
        if y.len() != 2 * j || chat.len() != self.config.cond_in {
            return Err(Error::invalid("observation or condition has the wrong length"));
        }
        if zs.iter().any(|z| z.len() != j) {
            return Err(Error::invalid(format!("latent vectors must have length {j}")));
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let c = self.encode(&Tensor::row(chat.to_vec()))?;
        let c = Tensor::new(vec![zs.len(), c.cols()], c.data().repeat(zs.len()))?;
        let yz: Vec<f64> = zs.iter().flat_map(|z| y.iter().chain(z).copied()).collect();
        let x = self.inverse_encoded(&Tensor::new(vec![zs.len(), 3 * j], yz)?, &c)?;
        Ok(x.to_rows())
    }

    /// `m` hypotheses from i.i.d. standard-normal latents, plus the z₀ pose if
    /// `with_z0`.
    pub fn sample_hypotheses(&self, y: &[f64], chat: &[f64], m: usize, rng: &mut Rng, with_z0: bool) -> Result<HypothesisSet> {
        if m == 0 {
            return Err(Error::invalid("number of hypotheses must be at least 1"));
        }
        let j = self.config.joints;
        let mut zs: Vec<Vec<f64>> = (0..m).map(|_| rng::normals(rng, j)).collect();
        if with_z0 {
            zs.push(vec![0.0; j]);
        }
        let mut poses = self.hypotheses_from(y, chat, &zs)?;
        let z0 = if with_z0 { poses.pop() } else { None };
        Ok(HypothesisSet { poses, z0 })
    }
}

/// A [`FlowModel`] whose weights are nodes of a graph.
#[derive(Debug, Clone)]
pub struct BoundFlow {
    pub encoder: BoundMlp,
    pub blocks: Vec<(BoundMlp, BoundMlp)>,
    permutations: Vec<Vec<usize>>,
    inverse_permutations: Vec<Vec<usize>>,
    split: usize,
    alpha: f64,
}

type GResult<T> = std::result::Result<T, TensorError>;

impl BoundFlow {
    pub fn encode(&self, g: &mut Graph, chat: Var) -> GResult<Var> {
        self.encoder.forward(g, chat)
    }

    fn st(&self, g: &mut Graph, net: &BoundMlp, h: Var, c: Var, width: usize) -> GResult<(Var, Var)> {
        let input = g.concat(&[h, c])?;
        let o = net.forward(g, input)?;
        let (s, t) = g.split(o, width)?;
        Ok((clamp_var(g, s, self.alpha)?, t))
    }

    /// `x -> [y | z]` and the `[n, 1]` log-determinant, on the tape.
    pub fn forward(&self, g: &mut Graph, x: Var, c: Var) -> GResult<(Var, Var)> {
        let mut u = x;
        let mut logdet: Option<Var> = None;
        for ((n1, n2), perm) in self.blocks.iter().zip(&self.permutations) {
            let (u1, u2) = g.split(u, self.split)?;
            let d2 = g.shape(u2)[1];
            let (s1, t1) = self.st(g, n1, u1, c, d2)?;
            let e1 = g.exp(s1)?;
            let m = g.mul(u2, e1)?;
            let v2 = g.add(m, t1)?;
            let (s2, t2) = self.st(g, n2, v2, c, self.split)?;
            let e2 = g.exp(s2)?;
            let m = g.mul(u1, e2)?;
            let v1 = g.add(m, t2)?;
            let v = g.concat(&[v1, v2])?;
            u = g.gather_cols(v, perm)?;
            let r1 = g.row_sums(s1)?;
            let r2 = g.row_sums(s2)?;
            let ld = g.add(r1, r2)?;
            logdet = Some(match logdet {
                Some(prev) => g.add(prev, ld)?,
                None => ld,
            });
        }
        Ok((u, logdet.expect("at least one block")))
    }

    /// `[y | z] -> x` on the tape.
    pub fn inverse(&self, g: &mut Graph, yz: Var, c: Var) -> GResult<Var> {
        let mut v = yz;
        for ((n1, n2), inv) in self.blocks.iter().zip(&self.inverse_permutations).rev() {
            let w = g.gather_cols(v, inv)?;
            let (v1, v2) = g.split(w, self.split)?;
            let d2 = g.shape(v2)[1];
            let (s2, t2) = self.st(g, n2, v2, c, self.split)?;
            let ns2 = g.neg(s2)?;
            let e2 = g.exp(ns2)?;
            let d = g.sub(v1, t2)?;
            let u1 = g.mul(d, e2)?;
            let (s1, t1) = self.st(g, n1, u1, c, d2)?;
            let ns1 = g.neg(s1)?;
            let e1 = g.exp(ns1)?;
            let d = g.sub(v2, t1)?;
            let u2 = g.mul(d, e1)?;
            v = g.concat(&[u1, u2])?;
        }
        Ok(v)
    }

    /// Leaf nodes in the order of [`FlowModel::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        for (a, b) in &self.blocks {
            out.extend(a.vars());
            out.extend(b.vars());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, zero_init: bool) -> FlowModel {
        let last_layer_scale = if zero_init { 0.0 } else { 0.2 };
        let cfg = FlowConfig { hidden: 24, cond_hidden: 12, cond_out: 6, seed, last_layer_scale, ..FlowConfig::new(16) };
        FlowModel::new(cfg).unwrap()
    }

    #[test]
    fn clamp_values() {
        assert_eq!(soft_clamp(0.0, 2.0).unwrap(), 0.0);
        assert!((soft_clamp(2.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(soft_clamp(1e6, 2.0).unwrap() < 2.0);
        assert!(soft_clamp(1.0, 0.0).is_err());
        assert!(soft_clamp(3.0, 2.0).unwrap() > soft_clamp(2.9, 2.0).unwrap());
    }

    #[test]
    fn zero_subnets_are_identity_and_zero_logdet() {
        let m = small(1, true);
        let mut r = rng::stream(1, "t", 0);
        let u = Tensor::new(vec![3, 48], rng::normals(&mut r, 144)).unwrap();
        let c = Tensor::new(vec![3, 6], rng::normals(&mut r, 18)).unwrap();
        let (v, ld) = m.blocks[0].forward(&u, &c).unwrap();
        assert_eq!(v, u);
        assert!(ld.iter().all(|&l| l == 0.0));
        let x = rng::normals(&mut r, 48);
        assert_eq!(m.log_abs_det_jacobian(&x, &[0.3; 78]).unwrap(), 0.0);
    }

    #[test]
    fn block_roundtrip() {
        let m = small(2, false);
        let mut r = rng::stream(2, "t", 0);
        let u = Tensor::new(vec![5, 48], rng::normals(&mut r, 240)).unwrap();
        let c = Tensor::new(vec![5, 6], rng::normals(&mut r, 30)).unwrap();
        for b in &m.blocks {
            let (v, _) = b.forward(&u, &c).unwrap();
            assert!(b.inverse(&v, &c).unwrap().max_abs_diff(&u) < 1e-9);
        }
    }

    #[test]
    fn clamped_scales_bounded() {
        let m = small(3, false);
        let mut r = rng::stream(3, "t", 0);
        let u = Tensor::new(vec![20, 48], rng::normals(&mut r, 960).iter().map(|v| v * 50.0).collect()).unwrap();
        let c = Tensor::new(vec![20, 6], rng::normals(&mut r, 120)).unwrap();
        let b = &m.blocks[0];
        let (u1, _) = split_cols(&u, 24);
        let raw = b.subnet1.apply(&concat_cols(&u1, &c)).unwrap();
        let (s, _) = split_cols(&raw, 24);
        let s = clamp_tensor(&s, 2.0);
        assert!(s.data().iter().all(|v| v.abs() < 2.0 && v.exp() > (-2.0f64).exp() && v.exp() < 2.0f64.exp()));
    }

    #[test]
    fn graph_matches_tape_free() {
        let m = small(4, false);
        let mut r = rng::stream(4, "t", 0);
        let x = Tensor::new(vec![3, 48], rng::normals(&mut r, 144)).unwrap();
        let chat = Tensor::new(vec![3, 78], rng::normals(&mut r, 234)).unwrap();
        let (yz, ld) = m.forward_batch(&x, &chat).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let cv = g.constant(chat.clone());
        let c = b.encode(&mut g, cv).unwrap();
        let xv = g.constant(x.clone());
        let (out, logdet) = b.forward(&mut g, xv, c).unwrap();
        assert!(g.value(out).max_abs_diff(&yz) < 1e-10);
        for (i, l) in ld.iter().enumerate() {
            assert!((g.value(logdet).data()[i] - l).abs() < 1e-10);
        }
        let back = b.inverse(&mut g, out, c).unwrap();
        assert!(g.value(back).max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn logdet_matches_brute_force_jacobian() {
        // Tiny flow over 2 joints (6 dims).
        let cfg = FlowConfig { joints: 2, hidden: 8, cond_in: 4, cond_hidden: 5, cond_out: 3, seed: 9, last_layer_scale: 1.0, ..FlowConfig::new(2) };
        let m = FlowModel::new(cfg).unwrap();
        let x = vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
        let chat = vec![0.2, -0.1, 0.4, 0.3];
        let f = |x: &[f64]| {
            let (y, z) = m.flow_forward(x, &chat).unwrap();
            [y, z].concat()
        };
        let eps = 1e-6;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(6, 6);
        for k in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += eps;
            xm[k] -= eps;
            let (fp, fm) = (f(&xp), f(&xm));
            for r in 0..6 {
                jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * eps);
            }
        }
        let brute = jac.determinant().abs().ln();
        assert!((brute - m.log_abs_det_jacobian(&x, &chat).unwrap()).abs() < 1e-3);
    }

    #[test]
    fn z0_hypothesis_equals_inverse() {
        let m = small(5, false);
        let mut r = rng::stream(5, "t", 0);
        let y = rng::normals(&mut r, 32);
        let chat = rng::normals(&mut r, 78);
        let direct = m.flow_inverse(&y, &[0.0; 16], &chat).unwrap();
        let via = m.hypotheses_from(&y, &chat, &[vec![0.0; 16]]).unwrap();
        assert_eq!(via[0], direct);
        let set = m.sample_hypotheses(&y, &chat, 3, &mut r, true).unwrap();
        assert_eq!(set.poses.len(), 3);
        assert_eq!(set.z0.unwrap(), direct);
        assert!(m.sample_hypotheses(&y, &chat, 0, &mut r, false).is_err());
    }

    #[test]
    fn dimension_errors() {
        let m = small(6, false);
        assert!(m.flow_inverse(&[0.0; 31], &[0.0; 16], &[0.0; 78]).is_err());
        assert!(m.flow_forward(&[0.0; 47], &[0.0; 78]).is_err());
    }

    #[test]
    fn permutations_are_bijections() {
        let m = small(7, true);
        for p in &m.permutations {
            assert!(is_permutation(p, 48));
        }
        assert_ne!(m.permutations[0], m.permutations[1]);
        m.validate().unwrap();
    }
}
