//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! The heavyweight pipeline criteria share one lazily trained fixture.

use salign_core::data::{gen_dataset, generate_sample, DataSample, TaskConfig};
use salign_core::grpo::{
    grpo_objective_value, objective_with_grads, sample_group, standardize_advantages, train,
    warmup, Hyperparams, PolicyState, TrainSinks, WarmupConfig,
};
use salign_core::model::{
    forward_with_trace, generate_with_logprobs, init_model, special, ModelConfig, ModelParams,
    Segment, SegmentedSequence,
};
use salign_core::saliency::{bottleneck_rollout, direct_contributions};
use salign_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {0}: {1} ({2})",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "criterion {} failed: {}", criterion, detail);
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> salign_core::image::Image {
    let npx = cfg.image_width() * cfg.image_height() * 3;
    let data = (0..npx).map(|_| rng.random_range(0..=255u32) as f64 / 255.0).collect();
    salign_core::image::Image::new(cfg.image_width(), cfg.image_height(), data).unwrap()
}

/// Random visual+prompt+think+answer sequence for a config.
fn random_sequence(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> SegmentedSequence {
    let nv = cfg.num_patches();
    let mut tokens = vec![special::IMG; nv];
    let mut segments = vec![Segment::Visual; nv];
    let word = |rng: &mut ChaCha8Rng| rng.random_range(special::FIRST_WORD..64.min(0 + usize::MAX)) % 1;
    let _ = word;
    let mut push = |tokens: &mut Vec<usize>, segments: &mut Vec<Segment>, n: usize, seg: Segment, rng: &mut ChaCha8Rng| {
        for _ in 0..n {
            tokens.push(rng.random_range(special::FIRST_WORD..cfg.vocab));
            segments.push(seg);
        }
    };
    push(&mut tokens, &mut segments, rng.random_range(2..5), Segment::Prompt, rng);
    tokens.push(special::THINK_OPEN);
    segments.push(Segment::Think);
    push(&mut tokens, &mut segments, rng.random_range(1..4), Segment::Think, rng);
    tokens.push(special::THINK_CLOSE);
    segments.push(Segment::Think);
    push(&mut tokens, &mut segments, rng.random_range(1..3), Segment::Answer, rng);
    SegmentedSequence::new(tokens, segments).unwrap()
}

fn random_toy_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let width = heads * [4usize, 8][rng.random_range(0..2)];
    ModelConfig {
        layers: rng.random_range(1..4),
        heads,
        width,
        vocab: rng.random_range(8..24),
        grid_rows: rng.random_range(1..4),
        grid_cols: rng.random_range(1..4),
        patch_px: 2,
        max_len: 64,
        eps: 1e-6,
    }
}

/// Criterion 1: decomposition exactness on >= 100 random (model, sequence)
/// pairs, every target logit reproduced within 1e-6, in under 30 s.
#[test]
fn criterion_1_decomposition_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pairs = 0usize;
    let mut checked = 0usize;
    let mut max_err: f64 = 0.0;
    while pairs < 100 {
        let cfg = random_toy_config(&mut rng);
        let params = init_model(&cfg, rng.random()).unwrap();
        let image = random_image(&cfg, &mut rng);
        let seq = random_sequence(&cfg, &mut rng);
        let (logits, trace) = forward_with_trace(&params, &image, &seq).unwrap();
        for _ in 0..3 {
            let position = rng.random_range(0..seq.len());
            let target = rng.random_range(0..cfg.vocab);
            let cv = direct_contributions(&params, &trace, position, target).unwrap();
            let err = (cv.total() - logits.row(position)[target]).abs();
            max_err = max_err.max(err);
            checked += 1;
        }
        pairs += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1 (decomposition exactness)",
        max_err < 1e-6 && elapsed < 30.0,
        &format!("{} pairs / {} logits, max |error| = {:.2e}, {:.1} s", pairs, checked, max_err, elapsed),
    );
}

/// Builds a sub-200-parameter policy plus a rollout group for it.
fn tiny_policy_and_group(seed: u64) -> (ModelParams, salign_core::grpo::RolloutGroup, Hyperparams) {
    let cfg = ModelConfig {
        layers: 1,
        heads: 1,
        width: 2,
        vocab: 6,
        grid_rows: 1,
        grid_cols: 1,
        patch_px: 2,
        max_len: 16,
        eps: 1e-6,
    };
    let params = init_model(&cfg, seed).unwrap();
    assert!(params.num_params() <= 200, "policy has {} parameters", params.num_params());

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEED);
    let image = random_image(&cfg, &mut rng);
    let sample = DataSample {
        id: seed,
        image,
        question: vec![4, 5],
        gold: vec![4],
        boxes: vec![salign_core::reward::BoundingBox::new(0, 0, 2, 2)],
        warmup_response: vec![special::THINK_OPEN, 5, special::THINK_CLOSE, 4, special::EOS],
    };
    let hp = Hyperparams {
        group_size: 3,
        max_new: 5,
        temperature: 1.0,
        seed,
        ..Default::default()
    };
    let state = PolicyState::new(params.clone(), hp.lr);
    let group = sample_group(&state, &sample, &hp, seed ^ 0xB00).unwrap();
    (params, group, hp)
}

/// Criterion 2: GRPO objective gradient matches central finite differences
/// within 1e-4 relative on a <= 200-parameter policy, >= 20 configurations.
#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut configs = 0usize;
    let mut seed = 1000u64;
    while configs < 20 {
        seed += 1;
        let (params, mut group, hp) = tiny_policy_and_group(seed);
        // Fix a reward spread so the surrogate term is active, and nudge the
        // policy off the sampling snapshot so ratios are not exactly 1 (but
        // stay inside the clip band, where the objective is smooth).
        let g = group.advantages.len();
        group.advantages = (0..g).map(|i| (i as f64) - (g as f64 - 1.0) / 2.0).collect();
        let mut theta = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        theta.for_each_mut(&mut |t| {
            for v in t.data_mut() {
                *v += rng.random_range(-0.005..0.005);
            }
        });

        // Central differences are only a valid oracle away from kinks:
        // reject configurations with a relu input inside the probe window.
        {
            let mut tape = salign_core::tape::Tape::new();
            let model = salign_core::model::TapedModel::insert(&mut tape, &theta);
            salign_core::grpo::grpo_objective(&mut tape, &model, &group, &hp).unwrap();
            if tape.min_abs_relu_input().unwrap_or(1.0) < 2e-4 {
                continue;
            }
        }

        let (_, grads) = objective_with_grads(&theta, &group, &hp).unwrap();

        // Flatten, probe every coordinate with central differences.
        let step = 1e-5;
        let mut flat_idx = 0usize;
        let mut tensors: Vec<Tensor> = Vec::new();
        theta.for_each(&mut |t| tensors.push(t.clone()));
        for (ti, t) in tensors.iter().enumerate() {
            for i in 0..t.numel() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                let mut k = 0;
                up.for_each_mut(&mut |tt| {
                    if k == ti {
                        tt.data_mut()[i] += step;
                    }
                    k += 1;
                });
                k = 0;
                dn.for_each_mut(&mut |tt| {
                    if k == ti {
                        tt.data_mut()[i] -= step;
                    }
                    k += 1;
                });
                let fu = grpo_objective_value(&up, &group, &hp).unwrap();
                let fd = grpo_objective_value(&dn, &group, &hp).unwrap();
                let numeric = (fu - fd) / (2.0 * step);
                let analytic = grads[ti].data()[i];
                let diff = (analytic - numeric).abs();
                let denom = analytic.abs().max(numeric.abs());
                // Tiny gradients are compared absolutely; 1e-10 sits two
                // orders above the oracle's own roundoff and two below the
                // small-gradient scale, so no real discrepancy can hide.
                let rel = if denom < 1e-8 || diff <= 1e-10 { 0.0 } else { diff / denom };
                worst = worst.max(rel);
                flat_idx += 1;
            }
        }
        assert!(flat_idx <= 200);
        configs += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "2 (gradient fidelity)",
        worst < 1e-4 && elapsed < 60.0 && configs >= 20,
        &format!("{} configs, worst relative error {:.2e}, {:.1} s", configs, worst, elapsed),
    );
}

/// Criterion 3: reward/metric algebra: uniform-map box-fraction equality,
/// KL non-negativity on 1e6 ratios, advantage contracts on 1e4 groups.
#[test]
fn criterion_3_reward_metric_algebra() {
    use salign_core::grpo::kl_penalty;
    use salign_core::reward::{alignment_score, BoundingBox};
    use salign_core::saliency::SaliencyMap;

    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // Uniform maps: score equals the box-area fraction.
    let mut max_dev: f64 = 0.0;
    for _ in 0..200 {
        let rows = rng.random_range(1..7usize);
        let cols = rng.random_range(1..7usize);
        let patch = rng.random_range(1..5usize);
        let (w, h) = (cols * patch, rows * patch);
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let bx = BoundingBox::new(x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h));
        let level = rng.random_range(0.1..5.0);
        let map = SaliencyMap::new(rows, cols, vec![level; rows * cols]).unwrap();
        let score = alignment_score(&map, &[bx], w, h).unwrap();
        let frac = ((bx.x1 - bx.x0) * (bx.y1 - bx.y0)) as f64 / (w * h) as f64;
        assert!((0.0..=1.0).contains(&score));
        max_dev = max_dev.max((score - frac).abs());
    }

    // KL estimator non-negative over a million random ratios.
    let mut kl_ok = true;
    for _ in 0..1_000_000 {
        let lp = rng.random_range(-30.0..0.0);
        let lref = rng.random_range(-30.0..0.0);
        if kl_penalty(lp, lref) < 0.0 {
            kl_ok = false;
            break;
        }
    }

    // Advantage standardization contract over ten thousand random groups.
    let mut adv_ok = true;
    for _ in 0..10_000 {
        let n = rng.random_range(2..12usize);
        let all_equal = rng.random_bool(0.1);
        let base: f64 = rng.random_range(0.0..3.0);
        let rewards: Vec<f64> = (0..n)
            .map(|_| if all_equal { base } else { rng.random_range(0.0..3.0) })
            .collect();
        let adv = standardize_advantages(&rewards).unwrap();
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64).sqrt();
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
            - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if mean.abs() > 1e-9 {
            adv_ok = false;
        }
        if spread == 0.0 {
            if adv.iter().any(|a| *a != 0.0) {
                adv_ok = false;
            }
        } else if spread > 1e-7 && (std - 1.0).abs() > 1e-6 {
            adv_ok = false;
        }
    }

    report(
        "3 (reward/metric algebra)",
        max_dev < 1e-9 && kl_ok && adv_ok,
        &format!("uniform-map max deviation {:.2e}, kl >= 0: {}, advantage contract: {}", max_dev, kl_ok, adv_ok),
    );
}

/// Criterion 4: rollout column-mass bound over >= 100 random traces.
#[test]
fn criterion_4_rollout_mass_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = f64::MIN;
    for _ in 0..100 {
        let cfg = random_toy_config(&mut rng);
        let params = init_model(&cfg, rng.random()).unwrap();
        let image = random_image(&cfg, &mut rng);
        let seq = random_sequence(&cfg, &mut rng);
        let (_, trace) = forward_with_trace(&params, &image, &seq).unwrap();
        let rollout = bottleneck_rollout(&cfg, &trace, &seq).unwrap();
        for per_head in &rollout.via {
            for via in per_head {
                for a in 0..rollout.num_answer {
                    let col: f64 = (0..rollout.num_visual).map(|v| via.row(v)[a]).sum();
                    worst = worst.max(col);
                    assert!((0..rollout.num_visual).all(|v| via.row(v)[a] >= 0.0));
                }
            }
        }
    }
    report(
        "4 (rollout mass bound)",
        worst <= 1.0 + 1e-9,
        &format!("largest column sum {:.6}", worst),
    );
}
