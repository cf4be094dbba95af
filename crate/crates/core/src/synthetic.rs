//! Backbone-free synthetic task.
//!
//! Targets are sampled from simple priors, flattened, and pushed through a
//! fixed random linear map to produce `n_patches × c_in` feature grids, plus
//! optional Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{LiftError, Result};
use crate::head::{HeadConfig, PoseOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Sample;

pub const KEYPOINT_STD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGen {
    pub seed: u64,
    pub noise_sigma: f64,
    n_patches: usize,
    c_in: usize,
    n_joints: usize,
    n_twists: usize,
    beta_dim: usize,
    /// Row-major `target_dim × feature_dim`.
    mixing: Vec<f64>,
}

impl SyntheticGen {
    pub fn new(cfg: &HeadConfig, seed: u64, noise_sigma: f64) -> Result<Self> {
        cfg.validate()?;
        if !noise_sigma.is_finite() || noise_sigma < 0.0 {
            return Err(LiftError::config("noise_sigma", "must be finite and non-negative"));
        }
        let target_dim = cfg.n_joints * 3 + cfg.n_twists * 2 + cfg.beta_dim;
        let feature_dim = cfg.n_patches * cfg.c_in;
        if feature_dim < target_dim {
            return Err(LiftError::config(
                "c_in",
                format!("n_patches·c_in = {feature_dim} cannot carry {target_dim} target values"),
            ));
        }
        let mut rng = stream(seed, 0);
        let dist = Normal::new(0.0, 1.0 / (target_dim as f64).sqrt()).expect("valid std");
        let mixing = (0..target_dim * feature_dim).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self {
            seed,
            noise_sigma,
            n_patches: cfg.n_patches,
            c_in: cfg.c_in,
            n_joints: cfg.n_joints,
            n_twists: cfg.n_twists,
            beta_dim: cfg.beta_dim,
            mixing,
        })
    }

    pub fn target_dim(&self) -> usize {
        self.n_joints * 3 + self.n_twists * 2 + self.beta_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.n_patches * self.c_in
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> PoseOutput<f64> {
        let kp = Normal::new(0.0, KEYPOINT_STD).expect("valid std");
        let angle = Uniform::new(-std::f64::consts::PI, std::f64::consts::PI);
        let beta = Normal::new(0.0, 1.0).expect("valid std");
        let mut flat = Vec::with_capacity(self.target_dim());
        flat.extend((0..self.n_joints * 3).map(|_| kp.sample(rng)));
        for _ in 0..self.n_twists {
            let phi: f64 = angle.sample(rng);
            flat.extend([phi.cos(), phi.sin()]);
        }
        flat.extend((0..self.beta_dim).map(|_| beta.sample(rng)));
        PoseOutput::from_flat(&flat, self.n_joints, self.n_twists, self.beta_dim).expect("sizes match")
    }

    /// `flatten(target) · mixing + noise`, reshaped to `n_patches × c_in`.
    pub fn features_for<R: Rng + ?Sized>(&self, target: &PoseOutput<f64>, rng: &mut R) -> Tensor<f64> {
        let flat = target.flatten();
        let fd = self.feature_dim();
        let mut out = vec![0.0; fd];
        for (i, &t) in flat.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.mixing[i * fd..(i + 1) * fd]) {
                *o += t * w;
            }
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            out.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        Tensor::from_vec(&[self.n_patches, self.c_in], out).expect("feature shape")
    }

    /// The training split.
    pub fn generate<T: Scalar>(&self, n: usize) -> Vec<Sample<T>> {
        self.generate_split(n, 0)
    }

    /// Independent split `split`; split 0 is the training set.
    pub fn generate_split<T: Scalar>(&self, n: usize, split: u64) -> Vec<Sample<T>> {
        let mut rng = stream(self.seed, split + 1);
        (0..n)
            .map(|_| {
                let target = self.sample_target(&mut rng);
                let features = self.features_for(&target, &mut rng);
                let target = renormalize_twists(target);
                Sample {
                    features: features.cast(),
                    target: target.cast(),
                }
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn renormalize_twists(mut pose: PoseOutput<f64>) -> PoseOutput<f64> {
    for pair in pose.twists.data_mut().chunks_mut(2) {
        let norm = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        pair.iter_mut().for_each(|v| *v /= norm);
    }
    pose
}
