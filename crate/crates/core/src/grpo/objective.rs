//! The differentiable group objective: clipped importance-ratio surrogate
//! minus a KL penalty toward the reference policy, averaged over the group.

use super::{Hyperparams, RatioLevel, RolloutGroup};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TapedModel};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// The objective node plus scalar diagnostics.
pub struct GrpoObjective {
    pub node: NodeId,
    pub value: f64,
    /// Mean KL estimator across kept rollouts (unscaled by beta).
    pub mean_kl: f64,
    /// Rollouts dropped for having no generated tokens.
    pub dropped: usize,
}

/// Builds the objective graph on `tape` against the policy registered in
/// `model`. Rollouts with an empty generated segment are dropped (with a
/// warning on stderr); a group with nothing left is an error.
pub fn grpo_objective(
    tape: &mut Tape,
    model: &TapedModel,
    group: &RolloutGroup,
    hp: &Hyperparams,
) -> Result<GrpoObjective> {
    let lo = 1.0 - hp.eps_clip;
    let hi = 1.0 + hp.eps_clip;
    let mut acc: Option<NodeId> = None;
    let mut kl_sum = 0.0;
    let mut kept = 0usize;
    let mut dropped = 0usize;

    for (i, rollout) in group.rollouts.iter().enumerate() {
        if rollout.seq.response_positions().is_empty() {
            eprintln!("warning: dropping rollout {} with empty generated segment", i);
            dropped += 1;
            continue;
        }
        let adv = group.advantages[i];
        let lp = model.response_logprobs(tape, &group.sample.image, &rollout.seq)?;
        if tape.value(lp).numel() != rollout.logp_old.len() {
            return Err(Error::Shape(format!(
                "rollout {}: {} stored logprobs vs {} response tokens",
                i,
                rollout.logp_old.len(),
                tape.value(lp).numel()
            )));
        }

        let obj_i = match hp.ratio_level {
            RatioLevel::Token => {
                let c_old = tape.constant(Tensor::from_vec(rollout.logp_old.clone()));
                let c_ref = tape.constant(Tensor::from_vec(rollout.logp_ref.clone()));
                let diff = tape.sub(lp, c_old)?;
                let ratio = tape.exp(diff);
                let unclipped = tape.scale(ratio, adv);
                let clamped = tape.clamp(ratio, lo, hi);
                let clipped = tape.scale(clamped, adv);
                let surr = tape.min(unclipped, clipped)?;
                let mean_surr = tape.mean(surr);

                let ref_diff = tape.sub(c_ref, lp)?;
                let r = tape.exp(ref_diff);
                let km = tape.sub(r, ref_diff)?;
                let kl = tape.add_scalar(km, -1.0);
                let mean_kl = tape.mean(kl);
                kl_sum += tape.value(mean_kl).item();

                let pen = tape.scale(mean_kl, hp.beta);
                tape.sub(mean_surr, pen)?
            }
            RatioLevel::Sequence => {
                let lp_sum = tape.sum(lp);
                let c_old = tape.constant(Tensor::scalar(rollout.logp_old.iter().sum()));
                let c_ref = tape.constant(Tensor::scalar(rollout.logp_ref.iter().sum()));
                let diff = tape.sub(lp_sum, c_old)?;
                let ratio = tape.exp(diff);
                let unclipped = tape.scale(ratio, adv);
                let clamped = tape.clamp(ratio, lo, hi);
                let clipped = tape.scale(clamped, adv);
                let surr = tape.min(unclipped, clipped)?;

                let ref_diff = tape.sub(c_ref, lp_sum)?;
                let r = tape.exp(ref_diff);
                let km = tape.sub(r, ref_diff)?;
                let kl = tape.add_scalar(km, -1.0);
                kl_sum += tape.value(kl).item();

                let pen = tape.scale(kl, hp.beta);
                tape.sub(surr, pen)?
            }
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, obj_i)?,
            None => obj_i,
        });
        kept += 1;
    }

    let acc = acc.ok_or_else(|| {
        Error::DegenerateGroup("every rollout in the group had an empty generated segment".into())
    })?;
    let node = tape.scale(acc, 1.0 / kept as f64);
    Ok(GrpoObjective { node, value: tape.value(node).item(), mean_kl: kl_sum / kept as f64, dropped })
}

/// Objective value under arbitrary parameters (forward only). This is the
/// function the finite-difference oracle probes.
pub fn grpo_objective_value(params: &ModelParams, group: &RolloutGroup, hp: &Hyperparams) -> Result<f64> {
    let mut tape = Tape::new();
    let model = TapedModel::insert(&mut tape, params);
    Ok(grpo_objective(&mut tape, &model, group, hp)?.value)
}

/// Value, mean KL, and parameter gradients in canonical order.
pub fn objective_with_grads(
    params: &ModelParams,
    group: &RolloutGroup,
    hp: &Hyperparams,
) -> Result<(GrpoObjective, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let model = TapedModel::insert(&mut tape, params);
    let obj = grpo_objective(&mut tape, &model, group, hp)?;
    let grads = tape.backward(obj.node)?;
    let out = model
        .param_ids
        .iter()
        .map(|id| grads.get(*id).expect("parameter gradient").clone())
        .collect();
    Ok((obj, out))
}
