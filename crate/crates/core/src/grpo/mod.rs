//! Group-relative policy optimization over the toy model.
//!
//! Each step samples a group of responses from the frozen step-start policy,
//! scores them with the composite reward, standardizes the rewards within
//! the group into advantages, and ascends a clipped importance-ratio
//! surrogate with a KL penalty toward a frozen reference policy.

pub mod objective;
pub mod optim;
pub mod trainer;

use crate::data::DataSample;
use crate::error::{Error, Result};
use crate::model::SegmentedSequence;
use crate::reward::RewardBreakdown;
use serde::{Deserialize, Serialize};

pub use objective::{grpo_objective, grpo_objective_value, objective_with_grads, GrpoObjective};
pub use optim::Adam;
pub use trainer::{
    sample_group, train, warmup, PolicyState, RolloutRecord, StepRecord, TrainSinks, WarmupConfig,
};

/// Whether importance ratios are formed per token (with the sequence
/// advantage broadcast) or once per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioLevel {
    Token,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Rollouts per group (G).
    pub group_size: usize,
    /// Clip half-width for the importance ratio.
    pub eps_clip: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    pub lr: f64,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    pub steps: usize,
    pub seed: u64,
    /// Generation budget per rollout.
    pub max_new: usize,
    pub ratio_level: RatioLevel,
    /// Checkpoint cadence in steps; 0 writes no intermediate checkpoints.
    pub ckpt_every: usize,
    /// When false, the reward drops its saliency component (accuracy +
    /// format only) for ablation runs.
    pub use_saliency_reward: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps_clip: 0.2,
            beta: 0.001,
            lr: 1e-3,
            temperature: 1.0,
            steps: 300,
            seed: 0,
            max_new: 16,
            ratio_level: RatioLevel::Token,
            ckpt_every: 0,
            use_saliency_reward: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::Config(format!("eps_clip {} outside (0, 1)", self.eps_clip)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        // lr = 0 is allowed so a zero-step/no-op run stays expressible.
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if self.max_new == 0 {
            return Err(Error::Config("max_new must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled response with everything the objective needs.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Full sequence: visual block + prompt + generated tokens.
    pub seq: SegmentedSequence,
    /// Per generated token, under the policy that sampled it.
    pub logp_old: Vec<f64>,
    /// Under the frozen reference policy.
    pub logp_ref: Vec<f64>,
    /// Under the current policy at group-creation time.
    pub logp_theta: Vec<f64>,
    pub reward: RewardBreakdown,
}

/// A question plus its sampled group, rewards, and standardized advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sample: DataSample,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> RewardBreakdown {
        let n = self.rollouts.len() as f64;
        let mut acc = RewardBreakdown { accuracy: 0.0, format: 0.0, saliency: 0.0, overall: 0.0 };
        for r in &self.rollouts {
            acc.accuracy += r.reward.accuracy;
            acc.format += r.reward.format;
            acc.saliency += r.reward.saliency;
            acc.overall += r.reward.overall;
        }
        acc.accuracy /= n;
        acc.format /= n;
        acc.saliency /= n;
        acc.overall /= n;
        acc
    }
}

/// `(r_i − mean) / max(population std, 1e-8)`; an all-equal group comes out
/// as all zeros.
pub fn standardize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Usage("advantage standardization needs at least two rewards".into()));
    }
    // Exact zeros for an all-equal group: the guarded formula alone would
    // divide summation roundoff by the 1e-8 floor.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1e-8);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Non-negative KL estimator `r − ln r − 1` with `r = exp(logp_ref − logp_theta)`.
pub fn kl_penalty(logp_theta: f64, logp_ref: f64) -> f64 {
    let diff = logp_ref - logp_theta;
    diff.exp() - diff - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_degenerate_group_is_zero() {
        assert_eq!(standardize_advantages(&[1.0, 1.0, 1.0, 1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn advantages_two_point_case() {
        // mean 0.5, population std 0.5 -> [-1, 1]
        let a = standardize_advantages(&[0.0, 1.0]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-12);
        assert!((a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_need_two_entries() {
        assert!(matches!(standardize_advantages(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(clipped_surrogate(1.0, 2.5, 0.2), 2.5);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_penalty(-1.3, -1.3), 0.0);
        // r = 2 -> 2 − ln 2 − 1
        let v = kl_penalty(-2.0f64.ln() - 0.7, -0.7);
        assert!((v - (2.0 - 2.0f64.ln() - 1.0)).abs() < 1e-12);
        assert!((v - 0.3069).abs() < 1e-4);
    }

    #[test]
    fn hyperparam_validation() {
        let mut hp = Hyperparams::default();
        hp.validate().unwrap();
        hp.group_size = 1;
        assert!(hp.validate().is_err());
        hp.group_size = 4;
        hp.eps_clip = 1.0;
        assert!(hp.validate().is_err());
        hp.eps_clip = 0.2;
        hp.beta = -0.1;
        assert!(hp.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(0.0f64..3.0, 2..16)) {
            let adv = standardize_advantages(&rewards).unwrap();
            let n = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / n;
            proptest::prop_assert!(mean.abs() < 1e-9);
            let max = rewards.iter().cloned().fold(f64::MIN, f64::max);
            let min = rewards.iter().cloned().fold(f64::MAX, f64::min);
            if max - min > 1e-7 {
                let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
                proptest::prop_assert!((std - 1.0).abs() < 1e-6);
            } else {
                proptest::prop_assert!(adv.iter().all(|a| a.abs() < 1e-3));
            }
        }

        #[test]
        fn kl_estimator_is_non_negative(lp in -20.0f64..0.0, lref in -20.0f64..0.0) {
            proptest::prop_assert!(kl_penalty(lp, lref) >= 0.0);
        }

        #[test]
        fn surrogate_at_unit_ratio_is_the_advantage(a in -5.0f64..5.0, eps in 0.01f64..0.9) {
            proptest::prop_assert_eq!(clipped_surrogate(1.0, a, eps), a);
        }
    }
}
