//! The training loop: group sampling, reward scoring, the policy update,
//! and the supervised warm-up that precedes it.

use super::objective::objective_with_grads;
use super::optim::Adam;
use super::{standardize_advantages, Hyperparams, Rollout, RolloutGroup};
use crate::data::{derive_seed, DataSample};
use crate::error::{Error, Result};
use crate::model::{
    forward_with_trace, generate_with_logprobs, save_checkpoint, sequence_logprob, ModelParams,
    TapedModel,
};
use crate::reward::{accuracy_reward, alignment_score, format_reward, overall_reward};
use crate::saliency::holistic_saliency_map;
use crate::tape::Tape;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

/// Current policy, its step-start snapshot, the frozen reference, and the
/// optimizer state.
pub struct PolicyState {
    pub theta: ModelParams,
    pub theta_old: ModelParams,
    pub reference: ModelParams,
    pub opt: Adam,
}

impl PolicyState {
    /// Starts from a (typically warm-up) checkpoint; the reference policy is
    /// frozen at that checkpoint for the whole run.
    pub fn new(start: ModelParams, lr: f64) -> Self {
        let opt = Adam::new(lr, &start);
        Self { theta: start.clone(), theta_old: start.clone(), reference: start, opt }
    }
}

/// One training-log line; the pinned per-step schema plus the drawn sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub mean_format: f64,
    pub mean_saliency: f64,
    pub objective: f64,
    pub kl: f64,
    pub seed: u64,
    pub sample_id: u64,
}

/// One reward breakdown per rollout, streamed alongside the step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub rollout: usize,
    pub sample_id: u64,
    pub accuracy: f64,
    pub format: f64,
    pub saliency: f64,
    pub overall: f64,
}

/// Optional output streams for the trainer.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub step_log: Option<&'a mut dyn Write>,
    pub rollout_log: Option<&'a mut dyn Write>,
    pub ckpt_dir: Option<PathBuf>,
}

impl TrainSinks<'_> {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Samples `G` seeded rollouts from the step-start policy and scores each
/// with its own holistic-map reward.
pub fn sample_group(
    state: &PolicyState,
    sample: &DataSample,
    hp: &Hyperparams,
    group_seed: u64,
) -> Result<RolloutGroup> {
    hp.validate()?;
    let cfg = &state.theta_old.config;
    let prompt = sample.prompt_sequence(cfg);
    if prompt.len() + hp.max_new > cfg.max_len {
        return Err(Error::Capacity(format!(
            "prompt of {} plus {} new tokens exceeds max_len {}",
            prompt.len(),
            hp.max_new,
            cfg.max_len
        )));
    }
    let on_policy = state.theta == state.theta_old;

    let mut rollouts = Vec::with_capacity(hp.group_size);
    for i in 0..hp.group_size {
        let seed = derive_seed(group_seed, i as u64);
        let (seq, logp_old) = generate_with_logprobs(
            &state.theta_old,
            &sample.image,
            &prompt,
            hp.temperature,
            hp.max_new,
            seed,
        )?;

        let logp_ref = if seq.response_positions().is_empty() {
            Vec::new()
        } else {
            sequence_logprob(&state.reference, &sample.image, &seq)?.1
        };
        // At the step snapshot the current policy equals the sampler, so the
        // sampling-time logprobs are exact; otherwise recompute.
        let logp_theta = if on_policy {
            logp_old.clone()
        } else if seq.response_positions().is_empty() {
            Vec::new()
        } else {
            sequence_logprob(&state.theta, &sample.image, &seq)?.1
        };

        let format = format_reward(&seq);
        let accuracy = accuracy_reward(&seq.answer_tokens(), &sample.gold)?;
        let saliency = if hp.use_saliency_reward && format == 1.0 {
            let (_, trace) = forward_with_trace(&state.theta_old, &sample.image, &seq)?;
            let map = holistic_saliency_map(&state.theta_old, &trace, &seq)?;
            alignment_score(&map, &sample.boxes, cfg.image_width(), cfg.image_height())?
        } else {
            0.0
        };
        let reward = overall_reward(accuracy, format, saliency)?;
        rollouts.push(Rollout { seq, logp_old, logp_ref, logp_theta, reward });
    }

    let advantages = standardize_advantages(&rollouts.iter().map(|r| r.reward.overall).collect::<Vec<_>>())?;
    Ok(RolloutGroup { sample: sample.clone(), rollouts, advantages })
}

/// Runs GRPO: per step, snapshot the policy, sample a group, ascend the
/// objective, and log. Aborts with a diagnostic record on non-finite loss.
pub fn train(
    state: &mut PolicyState,
    train_samples: &[DataSample],
    hp: &Hyperparams,
    sinks: &mut TrainSinks,
) -> Result<Vec<StepRecord>> {
    hp.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Usage("training needs a non-empty dataset".into()));
    }
    let mut records = Vec::with_capacity(hp.steps);
    for step in 0..hp.steps {
        state.theta_old = state.theta.clone();
        let step_seed = derive_seed(hp.seed, step as u64);
        let idx = (derive_seed(step_seed, 0xDA7A) % train_samples.len() as u64) as usize;
        let sample = &train_samples[idx];
        let group = sample_group(state, sample, hp, derive_seed(step_seed, 0x6071))?;

        let (obj, grads) = objective_with_grads(&state.theta, &group, hp)?;
        if !obj.value.is_finite() {
            let diag = serde_json::json!({
                "step": step,
                "error": "non-finite objective",
                "sample_id": sample.id,
                "seed": hp.seed,
            });
            if let Some(w) = sinks.step_log.as_mut() {
                writeln!(w, "{}", diag)?;
            }
            return Err(Error::Diverged(format!("non-finite objective at step {}", step)));
        }
        state.opt.ascend(&mut state.theta, &grads)?;

        let mean = group.mean_reward();
        let record = StepRecord {
            step,
            mean_reward: mean.overall,
            mean_accuracy: mean.accuracy,
            mean_format: mean.format,
            mean_saliency: mean.saliency,
            objective: obj.value,
            kl: obj.mean_kl,
            seed: hp.seed,
            sample_id: sample.id,
        };
        if let Some(w) = sinks.step_log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        if let Some(w) = sinks.rollout_log.as_mut() {
            for (i, r) in group.rollouts.iter().enumerate() {
                let rr = RolloutRecord {
                    step,
                    rollout: i,
                    sample_id: sample.id,
                    accuracy: r.reward.accuracy,
                    format: r.reward.format,
                    saliency: r.reward.saliency,
                    overall: r.reward.overall,
                };
                writeln!(w, "{}", serde_json::to_string(&rr)?)?;
            }
        }
        if hp.ckpt_every > 0 && (step + 1) % hp.ckpt_every == 0 {
            if let Some(dir) = &sinks.ckpt_dir {
                save_checkpoint(&state.theta, &dir.join(format!("step_{:06}.json", step + 1)))?;
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 600, batch: 8, lr: 1e-3, seed: 0 }
    }
}

/// Supervised next-token warm-up on the scripted responses. Maximizes the
/// mean per-token log-probability; returns the cross-entropy per step.
pub fn warmup(params: &mut ModelParams, samples: &[DataSample], cfg: &WarmupConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Usage("warm-up needs a non-empty dataset".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.lr, params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let model = TapedModel::insert(&mut tape, params);
        let mut acc = None;
        let mut total_tokens = 0usize;
        for b in 0..cfg.batch {
            let idx =
                (derive_seed(cfg.seed, (step * cfg.batch + b) as u64) % samples.len() as u64) as usize;
            let sample = &samples[idx];
            let seq = sample.warmup_sequence(&params.config);
            let lp = model.response_logprobs(&mut tape, &sample.image, &seq)?;
            total_tokens += tape.value(lp).numel();
            let s = tape.sum(lp);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        let objective = tape.scale(acc.expect("non-empty batch"), 1.0 / total_tokens as f64);
        let value = tape.value(objective).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite warm-up loss at step {}", step)));
        }
        let grads = tape.backward(objective)?;
        let grad_vec: Vec<_> = model
            .param_ids
            .iter()
            .map(|id| grads.get(*id).expect("parameter gradient").clone())
            .collect();
        opt.ascend(params, &grad_vec)?;
        losses.push(-value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, TaskConfig};
    use crate::grpo::{grpo_objective_value, RatioLevel};
    use crate::model::{init_model, ModelConfig};

    fn small_setup() -> (ModelConfig, Vec<DataSample>) {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            width: 16,
            vocab: 64,
            grid_rows: 2,
            grid_cols: 2,
            patch_px: 2,
            max_len: 40,
            eps: 1e-6,
        };
        let task = TaskConfig { min_objects: 1, max_objects: 2, object_span: 1, family_weights: [1.0, 1.0, 0.5] };
        let samples: Vec<DataSample> =
            (0..6).map(|id| generate_sample(&cfg, &task, id, 5).unwrap()).collect();
        (cfg, samples)
    }

    fn small_hp() -> Hyperparams {
        Hyperparams {
            group_size: 3,
            steps: 2,
            max_new: 8,
            temperature: 1.0,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn groups_are_deterministic_and_sized() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 1).unwrap();
        let state = PolicyState::new(params, 1e-3);
        let hp = Hyperparams { group_size: 8, max_new: 8, ..Default::default() };
        let a = sample_group(&state, &samples[0], &hp, 99).unwrap();
        let b = sample_group(&state, &samples[0], &hp, 99).unwrap();
        assert_eq!(a.rollouts.len(), 8);
        assert_eq!(a.advantages, b.advantages);
        for (ra, rb) in a.rollouts.iter().zip(&b.rollouts) {
            assert_eq!(ra.seq, rb.seq);
            assert_eq!(ra.reward, rb.reward);
        }
    }

    #[test]
    fn stored_rewards_match_recomputation() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 2).unwrap();
        let state = PolicyState::new(params, 1e-3);
        let group = sample_group(&state, &samples[1], &small_hp(), 7).unwrap();
        for r in &group.rollouts {
            let format = format_reward(&r.seq);
            let accuracy = accuracy_reward(&r.seq.answer_tokens(), &samples[1].gold).unwrap();
            let saliency = if format == 1.0 {
                let (_, trace) = forward_with_trace(&state.theta_old, &samples[1].image, &r.seq).unwrap();
                let map = holistic_saliency_map(&state.theta_old, &trace, &r.seq).unwrap();
                alignment_score(&map, &samples[1].boxes, cfg.image_width(), cfg.image_height()).unwrap()
            } else {
                0.0
            };
            let expect = overall_reward(accuracy, format, saliency).unwrap();
            assert_eq!(r.reward, expect);
        }
    }

    #[test]
    fn on_policy_identity_objective() {
        // theta == theta_old == reference and equal advantages: ratios are 1,
        // advantages 0, KL 0 -> objective exactly 0.
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 3).unwrap();
        let state = PolicyState::new(params, 1e-3);
        let hp = small_hp();
        let mut group = sample_group(&state, &samples[0], &hp, 3).unwrap();
        for a in group.advantages.iter_mut() {
            *a = 0.0;
        }
        let v = grpo_objective_value(&state.theta, &group, &hp).unwrap();
        assert_eq!(v, 0.0);

        // With beta = 0 the objective equals the mean clipped surrogate,
        // which at ratio 1 is the mean advantage.
        let group2 = sample_group(&state, &samples[0], &hp, 3).unwrap();
        let hp0 = Hyperparams { beta: 0.0, ..hp.clone() };
        let v2 = grpo_objective_value(&state.theta, &group2, &hp0).unwrap();
        let mean_adv: f64 = group2.advantages.iter().sum::<f64>() / group2.advantages.len() as f64;
        assert!((v2 - mean_adv).abs() < 1e-9);
    }

    #[test]
    fn sequence_level_matches_token_level_on_policy() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 4).unwrap();
        let state = PolicyState::new(params, 1e-3);
        let hp = small_hp();
        let group = sample_group(&state, &samples[2], &hp, 11).unwrap();
        // At ratio exactly 1 the surrogate is the advantage under both
        // granularities, and the KL is 0 under both.
        let tok = grpo_objective_value(&state.theta, &group, &hp).unwrap();
        let hp_seq = Hyperparams { ratio_level: RatioLevel::Sequence, ..hp };
        let seq = grpo_objective_value(&state.theta, &group, &hp_seq).unwrap();
        assert!((tok - seq).abs() < 1e-9);
    }

    #[test]
    fn reference_logprobs_never_change_across_steps() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 5).unwrap();
        let mut state = PolicyState::new(params, 1e-2);
        let hp = small_hp();

        let probe = sample_group(&state, &samples[0], &hp, 1).unwrap();
        let before: Vec<Vec<f64>> = probe
            .rollouts
            .iter()
            .map(|r| sequence_logprob(&state.reference, &samples[0].image, &r.seq).unwrap().1)
            .collect();

        train(&mut state, &samples, &hp, &mut TrainSinks::none()).unwrap();

        for (r, b) in probe.rollouts.iter().zip(&before) {
            let after = sequence_logprob(&state.reference, &samples[0].image, &r.seq).unwrap().1;
            assert_eq!(&after, b);
        }
    }

    #[test]
    fn nonzero_advantages_move_the_policy() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 9).unwrap();
        let mut state = PolicyState::new(params.clone(), 1e-3);
        let hp = small_hp();
        let mut group = sample_group(&state, &samples[0], &hp, 21).unwrap();
        // Force a reward spread: the surrogate gradient must be nonzero.
        group.advantages = vec![1.0, -1.0, 0.0];
        let (obj, grads) = objective_with_grads(&state.theta, &group, &hp).unwrap();
        assert!(obj.value.is_finite());
        assert!(grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
        state.opt.ascend(&mut state.theta, &grads).unwrap();
        assert_ne!(state.theta, params);
    }

    #[test]
    fn zero_lr_training_keeps_parameters() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 6).unwrap();
        let mut state = PolicyState::new(params.clone(), 0.0);
        let hp = Hyperparams { lr: 0.0, ..small_hp() };
        train(&mut state, &samples, &hp, &mut TrainSinks::none()).unwrap();
        assert_eq!(state.theta, params);
    }

    #[test]
    fn training_log_is_deterministic() {
        let (cfg, samples) = small_setup();
        let params = init_model(&cfg, 7).unwrap();
        let hp = small_hp();
        let mut s1 = PolicyState::new(params.clone(), hp.lr);
        let mut s2 = PolicyState::new(params, hp.lr);
        let r1 = train(&mut s1, &samples, &hp, &mut TrainSinks::none()).unwrap();
        let r2 = train(&mut s2, &samples, &hp, &mut TrainSinks::none()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(s1.theta, s2.theta);
    }

    #[test]
    fn warmup_reduces_cross_entropy() {
        let (cfg, samples) = small_setup();
        let mut params = init_model(&cfg, 8).unwrap();
        let losses = warmup(
            &mut params,
            &samples,
            &WarmupConfig { steps: 30, batch: 4, lr: 3e-3, seed: 0 },
        )
        .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "cross-entropy did not drop: {} -> {}", head, tail);
    }
}
