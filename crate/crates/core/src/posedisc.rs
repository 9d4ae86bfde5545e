//! Pose critic with a Kinematic Chain Space layer, trained with WGAN-GP.
//!
//! The KCS layer turns a pose into the Gram matrix `Ψ = BᵀB` of its bone
//! vectors: the diagonal holds squared bone lengths and the off-diagonal
//! entries inner products between bones. The critic scores a pose from two
//! branches, one on the flattened `Ψ` and one on the raw coordinates, merged
//! into a single real output.

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Tensor, TensorError, Var};
use crate::nn::{Activation, BoundMlp, Mlp};
use crate::rng;
use crate::skeleton::Skeleton;

type GResult<T> = std::result::Result<T, TensorError>;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_GP_WEIGHT: f64 = 10.0;

/// `Ψ = BᵀB` for one joint-major pose, as a `(J-1) x (J-1)` row-major matrix.
pub fn kcs(x: &[f64], bones: &[(usize, usize)]) -> Vec<f64> {
    let b: Vec<[f64; 3]> = bones
        .iter()
        .map(|&(p, c)| [x[3 * c] - x[3 * p], x[3 * c + 1] - x[3 * p + 1], x[3 * c + 2] - x[3 * p + 2]])
        .collect();
    let n = b.len();
    let mut psi = vec![0.0; n * n];
    for k in 0..n {
        for l in 0..n {
            psi[k * n + l] = (0..3).map(|a| b[k][a] * b[l][a]).sum();
        }
    }
    psi
}

/// Graph version of [`kcs`] on a `[n, 3J]` batch; returns `[n, (J-1)²]`.
pub fn kcs_var(g: &mut Graph, x: Var, bones: &[(usize, usize)]) -> GResult<Var> {
    let nb = bones.len();
    let left: Vec<usize> = (0..nb * nb).map(|i| i / nb).collect();
    let right: Vec<usize> = (0..nb * nb).map(|i| i % nb).collect();
    let mut psi: Option<Var> = None;
    for axis in 0..3 {
        let child: Vec<usize> = bones.iter().map(|&(_, c)| 3 * c + axis).collect();
        let parent: Vec<usize> = bones.iter().map(|&(p, _)| 3 * p + axis).collect();
        let xc = g.gather_cols(x, &child)?;
        let xp = g.gather_cols(x, &parent)?;
        let b = g.sub(xc, xp)?;
        let bl = g.gather_cols(b, &left)?;
        let br = g.gather_cols(b, &right)?;
        let prod = g.mul(bl, br)?;
        psi = Some(match psi {
            Some(prev) => g.add(prev, prod)?,
            None => prod,
        });
    }
    Ok(psi.expect("three axes"))
}

/// Anything that scores a `[n, d]` batch of poses with a `[n, 1]` output.
pub trait Critic {
    fn score(&self, g: &mut Graph, x: Var) -> GResult<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscConfig {
    pub hidden: usize,
    pub slope: f64,
    pub seed: u64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { hidden: 100, slope: LEAKY_SLOPE, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub bones: Vec<(usize, usize)>,
    /// Flattened `Ψ -> hidden -> hidden`.
    pub kcs_branch: Mlp,
    /// `3J -> hidden -> hidden`.
    pub pose_branch: Mlp,
    /// `2·hidden -> hidden -> 1`.
    pub merge: Mlp,
    pub slope: f64,
}

impl Discriminator {
    pub fn new(skeleton: &Skeleton, cfg: &DiscConfig) -> Self {
        Self::from_bones(skeleton.bones(), skeleton.joint_count(), cfg)
    }

    pub fn from_bones(bones: Vec<(usize, usize)>, j: usize, cfg: &DiscConfig) -> Self {
        let nb = bones.len();
        let act = Activation::LeakyRelu(cfg.slope);
        let mut r = rng::stream(cfg.seed, "disc-init", 0);
        let h = cfg.hidden;
        Self {
            kcs_branch: Mlp::new(&[nb * nb, h, h], act, &mut r),
            pose_branch: Mlp::new(&[3 * j, h, h], act, &mut r),
            merge: Mlp::new(&[2 * h, h, 1], act, &mut r),
            bones,
            slope: cfg.slope,
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let nb = self.bones.len();
        if self.kcs_branch.input_dim() != nb * nb || self.pose_branch.input_dim() != 3 * joints || self.merge.output_dim() != 1 {
            return Err(Error::invalid("critic dimensions do not match the skeleton"));
        }
        if self.bones.iter().any(|&(p, c)| p >= joints || c >= joints) {
            return Err(Error::invalid("critic bone index out of range"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.kcs_branch.tensors();
        out.extend(self.pose_branch.tensors());
        out.extend(self.merge.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.kcs_branch.tensors_mut();
        out.extend(self.pose_branch.tensors_mut());
        out.extend(self.merge.tensors_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDisc {
        BoundDisc {
            bones: self.bones.clone(),
            kcs_branch: self.kcs_branch.bind(g, trainable),
            pose_branch: self.pose_branch.bind(g, trainable),
            merge: self.merge.bind(g, trainable),
            slope: self.slope,
        }
    }

    /// Scores of a `[n, 3J]` batch.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let d = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = d.score(&mut g, xv)?;
        Ok(g.value(s).data().to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct BoundDisc {
    bones: Vec<(usize, usize)>,
    pub kcs_branch: BoundMlp,
    pub pose_branch: BoundMlp,
    pub merge: BoundMlp,
    slope: f64,
}

impl BoundDisc {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.kcs_branch.vars();
        out.extend(self.pose_branch.vars());
        out.extend(self.merge.vars());
        out
    }
}

impl Critic for BoundDisc {
    fn score(&self, g: &mut Graph, x: Var) -> GResult<Var> {
        let psi = kcs_var(g, x, &self.bones)?;
        let a = self.kcs_branch.forward(g, psi)?;
        let a = g.leaky_relu(a, self.slope)?;
        let b = self.pose_branch.forward(g, x)?;
        let b = g.leaky_relu(b, self.slope)?;
        let h = g.concat(&[a, b])?;
        self.merge.forward(g, h)
    }
}

fn check_batches(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::invalid(format!("real batch {:?} and fake batch {:?} differ", real.shape(), fake.shape())));
    }
    if real.shape().len() != 2 || real.rows() == 0 {
        return Err(Error::invalid("gradient penalty needs a non-empty batch"));
    }
    Ok(())
}

/// `λ · mean_i (‖∇D(x̃_i)‖₂ - 1)²` on `x̃_i = ε_i real_i + (1 - ε_i) fake_i`.
///
/// The result stays differentiable with respect to the critic weights.
pub fn gradient_penalty<C: Critic>(
    g: &mut Graph,
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<Var> {
    check_batches(real, fake)?;
    let (n, d) = real.dims2();
    if eps.len() != n {
        return Err(Error::invalid(format!("{} interpolation weights for {n} samples", eps.len())));
    }
    let mixed: Vec<f64> = (0..n * d)
        .map(|i| {
            let e = eps[i / d];
            e * real.data()[i] + (1.0 - e) * fake.data()[i]
        })
        .collect();
    let xt = g.param(Tensor::new(vec![n, d], mixed)?);
    let s = critic.score(g, xt)?;
    let total = g.sum(s)?;
    let grad = g.grad(total, &[xt])?[0];
    let sq = g.square(grad)?;
    let norm2 = g.row_sums(sq)?;
    let norm = g.sqrt(norm2)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let dev2 = g.square(dev)?;
    let m = g.mean(dev2)?;
    Ok(g.scale(m, lambda)?)
}

/// Parts of the critic objective.
#[derive(Debug, Clone, Copy)]
pub struct DiscLoss {
    pub total: Var,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: Var,
    pub penalty: Var,
}

/// `mean D(fake) - mean D(real) + gradient_penalty`.
pub fn disc_loss<C: Critic>(
    g: &mut Graph,
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<DiscLoss> {
    check_batches(real, fake)?;
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let sr = critic.score(g, rv)?;
    let sf = critic.score(g, fv)?;
    let mr = g.mean(sr)?;
    let mf = g.mean(sf)?;
    let wasserstein = g.sub(mf, mr)?;
    let penalty = gradient_penalty(g, critic, real, fake, eps, lambda)?;
    let total = g.add(wasserstein, penalty)?;
    Ok(DiscLoss { total, wasserstein, penalty })
}

/// `L_gen = -mean D(fake)`.
pub fn gen_loss<C: Critic>(g: &mut Graph, critic: &C, fake: Var) -> GResult<Var> {
    let s = critic.score(g, fake)?;
    let m = g.mean(s)?;
    g.neg(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    struct Linear(Vec<f64>);

    impl Critic for Linear {
        fn score(&self, g: &mut Graph, x: Var) -> GResult<Var> {
            let w = g.param(Tensor::new(vec![self.0.len(), 1], self.0.clone()).unwrap());
            g.matmul(x, w)
        }
    }

    struct Constant;

    impl Critic for Constant {
        fn score(&self, g: &mut Graph, x: Var) -> GResult<Var> {
            let z = g.scale(x, 0.0)?;
            let s = g.row_sums(z)?;
            g.add_scalar(s, 0.0)
        }
    }

    #[test]
    fn single_bone_kcs() {
        let x = [0.0, 0.0, 0.0, 0.0, 0.5, 0.0];
        assert_eq!(kcs(&x, &[(0, 1)]), vec![0.25]);
    }

    #[test]
    fn kcs_rotation_invariant_and_symmetric() {
        let s = Skeleton::human16();
        let mut r = rng::stream(1, "kcs", 0);
        let pose = s.sample_pose(&mut r);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rotated: Vec<f64> = pose
            .chunks_exact(3)
            .flat_map(|p| {
                let v = rot * nalgebra::Vector3::new(p[0], p[1], p[2]);
                [v.x, v.y, v.z]
            })
            .collect();
        let bones = s.bones();
        let (a, b) = (kcs(&pose, &bones), kcs(&rotated, &bones));
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-10));
        let n = bones.len();
        for k in 0..n {
            assert!((a[k * n + k] - s.bone_lengths[bones[k].1].powi(2)).abs() < 1e-12);
            for l in 0..n {
                assert_eq!(a[k * n + l], a[l * n + k]);
            }
        }
    }

    #[test]
    fn kcs_var_matches() {
        let s = Skeleton::human16();
        let mut r = rng::stream(2, "kcs", 0);
        let p1 = s.sample_pose(&mut r);
        let p2 = s.sample_pose(&mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[p1.clone(), p2.clone()]).unwrap());
        let psi = kcs_var(&mut g, x, &s.bones()).unwrap();
        assert_eq!(g.value(psi).row_slice(0), kcs(&p1, &s.bones()).as_slice());
        assert_eq!(g.value(psi).row_slice(1), kcs(&p2, &s.bones()).as_slice());
    }

    #[test]
    fn unit_linear_critic_has_zero_penalty() {
        let w = vec![0.6, 0.0, 0.8];
        let real = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let fake = Tensor::from_rows(&[vec![0.5, 0.2, 0.1], vec![3.0, 1.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let p = gradient_penalty(&mut g, &Linear(w), &real, &fake, &[0.3, 0.9], 10.0).unwrap();
        assert!(g.value(p).item().abs() < 1e-20);
    }

    #[test]
    fn constant_critic_penalty_and_losses() {
        let real = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let fake = Tensor::from_rows(&[vec![0.5, 0.2], vec![3.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let l = disc_loss(&mut g, &Constant, &real, &fake, &[0.5, 0.5], 10.0).unwrap();
        assert_eq!(g.value(l.penalty).item(), 10.0);
        assert_eq!(g.value(l.total).item(), 10.0);
        let f = g.constant(fake.clone());
        let gl = gen_loss(&mut g, &Constant, f).unwrap();
        assert_eq!(g.value(gl).item(), 0.0);
    }

    #[test]
    fn batch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        let mut g = Graph::new();
        assert!(gradient_penalty(&mut g, &Constant, &a, &b, &[0.5, 0.5], 10.0).is_err());
        let e = Tensor::zeros(&[0, 3]);
        assert!(gradient_penalty(&mut g, &Constant, &e, &e, &[], 10.0).is_err());
    }

    #[test]
    fn swapping_real_and_fake_negates_wasserstein() {
        let s = Skeleton::human16();
        let d = Discriminator::new(&s, &DiscConfig { hidden: 16, ..DiscConfig::default() });
        let mut r = rng::stream(3, "disc", 0);
        let real = Tensor::from_rows(&[s.sample_pose(&mut r), s.sample_pose(&mut r)]).unwrap();
        let fake = Tensor::new(vec![2, 48], rng::normals(&mut r, 96)).unwrap();
        let mut g = Graph::new();
        let bd = d.bind(&mut g, true);
        let a = disc_loss(&mut g, &bd, &real, &fake, &[0.1, 0.7], 10.0).unwrap();
        let b = disc_loss(&mut g, &bd, &fake, &real, &[0.1, 0.7], 10.0).unwrap();
        assert!((g.value(a.wasserstein).item() + g.value(b.wasserstein).item()).abs() < 1e-12);
        assert!(g.value(a.penalty).item() >= 0.0);
        let scores = d.scores(&real).unwrap();
        assert!(scores.iter().all(|v| v.is_finite()));
        assert_eq!(scores, d.scores(&real).unwrap());
    }
}
