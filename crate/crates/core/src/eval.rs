//! Faithfulness and interpretability evaluation: patch deletion/insertion
//! curves with normalized likelihood, the pointing game and its energy
//! variant, and counterfactual noise probes.

use crate::data::{derive_seed, DataSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{
    forward_with_trace, generate, sequence_logprob, ModelParams, Segment, SegmentedSequence,
};
use crate::reward::{accuracy_reward, alignment_score, union_mask, BoundingBox};
use crate::saliency::{holistic_saliency_map, SaliencyMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Delete,
    Insert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseRegion {
    Foreground,
    Background,
}

/// Normalized scores (0-100 scale) at increasing perturbation fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub fractions: Vec<f64>,
    pub normalized_scores: Vec<f64>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.05, 0.15, 0.30];

/// Patch indices sorted by saliency descending; ties break toward the
/// smaller row-major index.
pub fn ranked_patches(map: &SaliencyMap) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..map.values.len()).collect();
    idx.sort_by(|a, b| map.values[*b].partial_cmp(&map.values[*a]).unwrap().then(a.cmp(b)));
    idx
}

fn top_k(fraction: f64, num_patches: usize) -> usize {
    // round half up
    ((fraction * num_patches as f64) + 0.5).floor() as usize
}

/// Zeroes (delete) or restores onto a blank canvas (insert) the pixel blocks
/// of the `round(fraction · num_patches)` most salient patches.
pub fn perturb_topk(image: &Image, map: &SaliencyMap, fraction: f64, mode: PerturbMode) -> Result<Image> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Usage(format!("fraction {} outside [0, 1]", fraction)));
    }
    let patch_px = image.width() / map.grid_cols;
    let n = map.values.len();
    let k = top_k(fraction, n).min(n);
    let ranked = ranked_patches(map);
    let mut out = match mode {
        PerturbMode::Delete => image.clone(),
        PerturbMode::Insert => Image::blank(image.width(), image.height()),
    };
    for &cell in ranked.iter().take(k) {
        let (row, col) = (cell / map.grid_cols, cell % map.grid_cols);
        match mode {
            PerturbMode::Delete => out.zero_patch(row, col, patch_px),
            PerturbMode::Insert => out.copy_patch_from(image, row, col, patch_px),
        }
    }
    Ok(out)
}

/// Mean per-token log-probability of a teacher-forced response.
fn mean_logprob(params: &ModelParams, image: &Image, response: &SegmentedSequence) -> Result<f64> {
    let (total, per_token) = sequence_logprob(params, image, response)?;
    Ok(total / per_token.len() as f64)
}

/// Reference scores for the affine 0-100 normalization: the blank image
/// maps to 0, the unperturbed image to 100.
pub struct LikelihoodRefs {
    pub blank: f64,
    pub original: f64,
}

impl LikelihoodRefs {
    pub fn compute(params: &ModelParams, original_image: &Image, response: &SegmentedSequence) -> Result<Self> {
        let blank_img = Image::blank(original_image.width(), original_image.height());
        let blank = mean_logprob(params, &blank_img, response)?;
        let original = mean_logprob(params, original_image, response)?;
        if (blank - original).abs() < 1e-12 {
            return Err(Error::DegenerateReference(
                "blank and unperturbed likelihoods coincide".into(),
            ));
        }
        Ok(Self { blank, original })
    }

    pub fn score(&self, mean_lp: f64) -> f64 {
        100.0 * (mean_lp - self.blank) / (self.original - self.blank)
    }
}

/// Normalized likelihood of the original response on an image variant.
pub fn normalized_likelihood(
    params: &ModelParams,
    image_variant: &Image,
    original_image: &Image,
    response: &SegmentedSequence,
) -> Result<f64> {
    let refs = LikelihoodRefs::compute(params, original_image, response)?;
    Ok(refs.score(mean_logprob(params, image_variant, response)?))
}

fn perturbation_curve(
    params: &ModelParams,
    image: &Image,
    response: &SegmentedSequence,
    map: &SaliencyMap,
    fractions: &[f64],
    mode: PerturbMode,
) -> Result<PerturbationCurve> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Usage("fractions must be sorted ascending".into()));
    }
    let refs = LikelihoodRefs::compute(params, image, response)?;
    let mut scores = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let variant = perturb_topk(image, map, f, mode)?;
        scores.push(refs.score(mean_logprob(params, &variant, response)?));
    }
    Ok(PerturbationCurve { fractions: fractions.to_vec(), normalized_scores: scores })
}

pub fn deletion_curve(
    params: &ModelParams,
    image: &Image,
    response: &SegmentedSequence,
    map: &SaliencyMap,
    fractions: &[f64],
) -> Result<PerturbationCurve> {
    perturbation_curve(params, image, response, map, fractions, PerturbMode::Delete)
}

pub fn insertion_curve(
    params: &ModelParams,
    image: &Image,
    response: &SegmentedSequence,
    map: &SaliencyMap,
    fractions: &[f64],
) -> Result<PerturbationCurve> {
    perturbation_curve(params, image, response, map, fractions, PerturbMode::Insert)
}

/// 1 iff the center of the maximal cell's pixel block (row-major first on
/// ties) lies inside the box union; an all-zero map is a miss.
pub fn pointing_game_hit(
    map: &SaliencyMap,
    boxes: &[BoundingBox],
    image_w: usize,
    image_h: usize,
) -> Result<u8> {
    if map.values.is_empty() {
        return Err(Error::Usage("empty saliency map".into()));
    }
    for b in boxes {
        b.validate(image_w, image_h)?;
    }
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    let cell = map.values.iter().position(|v| *v == max).expect("max exists");
    let patch_px = image_w / map.grid_cols;
    let (row, col) = (cell / map.grid_cols, cell % map.grid_cols);
    let cx = col * patch_px + patch_px / 2;
    let cy = row * patch_px + patch_px / 2;
    Ok(boxes.iter().any(|b| b.contains(cx, cy)) as u8)
}

/// Saliency-energy recall inside the boxes; identical to the training-time
/// alignment score by construction.
pub fn energy_pg(map: &SaliencyMap, boxes: &[BoundingBox], image_w: usize, image_h: usize) -> Result<f64> {
    alignment_score(map, boxes, image_w, image_h)
}

/// Adds seeded Gaussian noise (std `sigma`, clipped to [0,1]) to pixels
/// inside (foreground) or outside (background) the box union.
pub fn noised_image(
    image: &Image,
    boxes: &[BoundingBox],
    sigma: f64,
    region: NoiseRegion,
    seed: u64,
) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::Usage("sigma must be non-negative".into()));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mask = union_mask(boxes, image.width(), image.height());
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let inside = mask[y * image.width() + x];
            let hit = match region {
                NoiseRegion::Foreground => inside,
                NoiseRegion::Background => !inside,
            };
            if !hit {
                continue;
            }
            let mut rgb = out.pixel(x, y);
            for c in rgb.iter_mut() {
                *c = (*c + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            out.set_pixel(x, y, rgb);
        }
    }
    Ok(out)
}

fn greedy_correct(params: &ModelParams, sample: &DataSample, image: &Image, max_new: usize) -> Result<u8> {
    let out = generate(params, image, &sample.prompt_sequence(&params.config), 0.0, max_new, 0)?;
    Ok(accuracy_reward(&out.answer_tokens(), &sample.gold)? as u8)
}

/// Per-sample greedy exact-match correctness on noised images.
pub fn counterfactual_correctness(
    params: &ModelParams,
    samples: &[DataSample],
    sigma: f64,
    region: NoiseRegion,
    seed: u64,
    max_new: usize,
) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(Error::Usage("counterfactual evaluation needs samples".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let img = noised_image(&sample.image, &sample.boxes, sigma, region, derive_seed(seed, sample.id))?;
        out.push(greedy_correct(params, sample, &img, max_new)?);
    }
    Ok(out)
}

/// Greedy exact-match accuracy on noised images.
pub fn counterfactual_accuracy(
    params: &ModelParams,
    samples: &[DataSample],
    sigma: f64,
    region: NoiseRegion,
    seed: u64,
    max_new: usize,
) -> Result<f64> {
    let correct = counterfactual_correctness(params, samples, sigma, region, seed, max_new)?;
    Ok(correct.iter().map(|c| *c as f64).sum::<f64>() / correct.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfSample {
    pub id: u64,
    pub clean: u8,
    /// Correctness per sigma with noise inside the boxes.
    pub foreground: Vec<u8>,
    /// Correctness per sigma with noise outside the boxes.
    pub background: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub sigmas: Vec<f64>,
    pub clean_accuracy: f64,
    pub foreground_accuracy: Vec<f64>,
    pub background_accuracy: Vec<f64>,
    pub samples: Vec<CfSample>,
}

/// Runs the clean and both noised arms at every sigma.
pub fn counterfactual_report(
    params: &ModelParams,
    samples: &[DataSample],
    sigmas: &[f64],
    seed: u64,
    max_new: usize,
) -> Result<CounterfactualReport> {
    if samples.is_empty() || sigmas.is_empty() {
        return Err(Error::Usage("counterfactual report needs samples and sigmas".into()));
    }
    let mut per: Vec<CfSample> = samples
        .iter()
        .map(|s| CfSample { id: s.id, clean: 0, foreground: Vec::new(), background: Vec::new() })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        per[i].clean = greedy_correct(params, s, &s.image, max_new)?;
    }
    for &sigma in sigmas {
        let fg = counterfactual_correctness(params, samples, sigma, NoiseRegion::Foreground, seed, max_new)?;
        let bg = counterfactual_correctness(params, samples, sigma, NoiseRegion::Background, seed, max_new)?;
        for i in 0..samples.len() {
            per[i].foreground.push(fg[i]);
            per[i].background.push(bg[i]);
        }
    }
    let n = samples.len() as f64;
    let mean = |pick: &dyn Fn(&CfSample) -> f64| per.iter().map(|s| pick(s)).sum::<f64>() / n;
    let clean_accuracy = mean(&|s: &CfSample| s.clean as f64);
    let foreground_accuracy = (0..sigmas.len())
        .map(|k| mean(&|s: &CfSample| s.foreground[k] as f64))
        .collect();
    let background_accuracy = (0..sigmas.len())
        .map(|k| mean(&|s: &CfSample| s.background[k] as f64))
        .collect();
    Ok(CounterfactualReport {
        sigmas: sigmas.to_vec(),
        clean_accuracy,
        foreground_accuracy,
        background_accuracy,
        samples: per,
    })
}

impl CounterfactualReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,clean");
        for s in &self.sigmas {
            out.push_str(&format!(",foreground_{}", s));
        }
        for s in &self.sigmas {
            out.push_str(&format!(",background_{}", s));
        }
        out.push('\n');
        for sample in &self.samples {
            out.push_str(&format!("{},{}", sample.id, sample.clean));
            for v in &sample.foreground {
                out.push_str(&format!(",{}", v));
            }
            for v in &sample.background {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Pointing-game-only record (no perturbation curves).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgSample {
    pub id: u64,
    pub pg_hit: u8,
    pub energy_pg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgReport {
    pub samples: Vec<PgSample>,
    pub pg: f64,
    pub energy_pg: f64,
}

/// Greedy response, holistic map, pointing-game metrics only.
pub fn evaluate_pg_sample(params: &ModelParams, sample: &DataSample, max_new: usize) -> Result<PgSample> {
    let cfg = &params.config;
    let response = generate(params, &sample.image, &sample.prompt_sequence(cfg), 0.0, max_new, 0)?;
    let map = if response.has(Segment::Think) && response.has(Segment::Answer) {
        let (_, trace) = forward_with_trace(params, &sample.image, &response)?;
        holistic_saliency_map(params, &trace, &response)?
    } else {
        SaliencyMap::zeros(cfg.grid_rows, cfg.grid_cols)
    };
    Ok(PgSample {
        id: sample.id,
        pg_hit: pointing_game_hit(&map, &sample.boxes, cfg.image_width(), cfg.image_height())?,
        energy_pg: energy_pg(&map, &sample.boxes, cfg.image_width(), cfg.image_height())?,
    })
}

impl PgReport {
    pub fn build(samples: Vec<PgSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("report needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let pg = samples.iter().map(|s| s.pg_hit as f64).sum::<f64>() / n;
        let energy_pg = samples.iter().map(|s| s.energy_pg).sum::<f64>() / n;
        Ok(Self { samples, pg, energy_pg })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pg_hit,energy_pg\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}\n", s.id, s.pg_hit, s.energy_pg));
        }
        out
    }
}

/// Per-sample record of the interpretability/faithfulness metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: u64,
    pub pg_hit: u8,
    pub energy_pg: f64,
    pub deletion: PerturbationCurve,
    pub insertion: PerturbationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub pg: f64,
    pub energy_pg: f64,
    pub deletion: Vec<f64>,
    pub insertion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fractions: Vec<f64>,
    pub samples: Vec<SampleEval>,
    pub aggregates: EvalAggregates,
}

impl EvalReport {
    pub fn build(fractions: Vec<f64>, samples: Vec<SampleEval>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("report needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let nf = fractions.len();
        let mut agg = EvalAggregates {
            pg: 0.0,
            energy_pg: 0.0,
            deletion: vec![0.0; nf],
            insertion: vec![0.0; nf],
        };
        for s in &samples {
            agg.pg += s.pg_hit as f64;
            agg.energy_pg += s.energy_pg;
            for i in 0..nf {
                agg.deletion[i] += s.deletion.normalized_scores[i];
                agg.insertion[i] += s.insertion.normalized_scores[i];
            }
        }
        agg.pg /= n;
        agg.energy_pg /= n;
        for v in agg.deletion.iter_mut().chain(agg.insertion.iter_mut()) {
            *v /= n;
        }
        Ok(Self { fractions, samples, aggregates: agg })
    }

    /// One row per sample; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pg_hit,energy_pg");
        for f in &self.fractions {
            out.push_str(&format!(",deletion_{}", f));
        }
        for f in &self.fractions {
            out.push_str(&format!(",insertion_{}", f));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.id, s.pg_hit, s.energy_pg));
            for v in &s.deletion.normalized_scores {
                out.push_str(&format!(",{}", v));
            }
            for v in &s.insertion.normalized_scores {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the full per-sample protocol: greedy response, holistic map,
/// pointing game, energy recall, and both perturbation curves.
pub fn evaluate_sample(
    params: &ModelParams,
    sample: &DataSample,
    fractions: &[f64],
    max_new: usize,
) -> Result<SampleEval> {
    let cfg = &params.config;
    let response = generate(params, &sample.image, &sample.prompt_sequence(cfg), 0.0, max_new, 0)?;
    let map = if response.has(Segment::Think) && response.has(Segment::Answer) {
        let (_, trace) = forward_with_trace(params, &sample.image, &response)?;
        holistic_saliency_map(params, &trace, &response)?
    } else {
        SaliencyMap::zeros(cfg.grid_rows, cfg.grid_cols)
    };
    let pg_hit = pointing_game_hit(&map, &sample.boxes, cfg.image_width(), cfg.image_height())?;
    let energy = energy_pg(&map, &sample.boxes, cfg.image_width(), cfg.image_height())?;
    let deletion = deletion_curve(params, &sample.image, &response, &map, fractions)?;
    let insertion = insertion_curve(params, &sample.image, &response, &map, fractions)?;
    Ok(SampleEval { id: sample.id, pg_hit, energy_pg: energy, deletion, insertion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, TaskConfig};
    use crate::model::{init_model, ModelConfig};
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            width: 16,
            vocab: 64,
            grid_rows: 2,
            grid_cols: 2,
            patch_px: 2,
            max_len: 40,
            eps: 1e-6,
        }
    }

    fn sample_and_response(seed: u64) -> (ModelParams, DataSample, SegmentedSequence, SaliencyMap) {
        let config = cfg();
        let params = init_model(&config, seed).unwrap();
        let task = TaskConfig { min_objects: 1, max_objects: 2, object_span: 1, family_weights: [1.0, 1.0, 1.0] };
        let sample = generate_sample(&config, &task, seed, 17).unwrap();
        let response = generate(&params, &sample.image, &sample.prompt_sequence(&config), 0.9, 8, seed).unwrap();
        let (_, trace) = forward_with_trace(&params, &sample.image, &response).unwrap();
        let map = if response.has(Segment::Think) && response.has(Segment::Answer) {
            holistic_saliency_map(&params, &trace, &response).unwrap()
        } else {
            SaliencyMap::new(2, 2, vec![0.3, 0.1, 0.5, 0.2]).unwrap()
        };
        (params, sample, response, map)
    }

    #[test]
    fn perturb_endpoints_and_partition() {
        let (_, sample, _, map) = sample_and_response(1);
        let img = &sample.image;
        assert_eq!(&perturb_topk(img, &map, 0.0, PerturbMode::Delete).unwrap(), img);
        let wiped = perturb_topk(img, &map, 1.0, PerturbMode::Delete).unwrap();
        assert!(wiped.data().iter().all(|v| *v == 0.0));

        let n = map.values.len();
        let ranked = ranked_patches(&map);
        for k in 0..=n {
            let f = k as f64 / n as f64;
            // Set-complement oracle over the ranked indices: deletion hides
            // exactly the prefix insertion shows, so for any fraction the
            // two variants partition the original content pixel for pixel.
            let deleted = perturb_topk(img, &map, f, PerturbMode::Delete).unwrap();
            let inserted = perturb_topk(img, &map, f, PerturbMode::Insert).unwrap();
            for i in 0..img.data().len() {
                assert_eq!(deleted.data()[i] + inserted.data()[i], img.data()[i]);
            }
            // Complementary counts under the tie rule: delete(f) touches the
            // first k ranked patches, insert(1-f) the first n-k (selection
            // sizes partition the grid away from the .5 rounding boundary).
            let fn_frac = f * n as f64;
            if (fn_frac - fn_frac.floor() - 0.5).abs() > 1e-9 {
                let kd = top_k(f, n);
                let ki = top_k(1.0 - f, n);
                assert_eq!(kd + ki, n);
                let del_set: std::collections::HashSet<_> = ranked[..kd].iter().collect();
                let keep_set: std::collections::HashSet<_> = ranked[kd..].iter().collect();
                assert_eq!(keep_set.len(), ki);
                assert!(del_set.is_disjoint(&keep_set));
            }
        }
    }

    #[test]
    fn uniform_map_tie_break_is_row_major() {
        let map = SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(ranked_patches(&map), vec![0, 1, 2, 3]);
        let (_, sample, _, _) = sample_and_response(2);
        let half = perturb_topk(&sample.image, &map, 0.5, PerturbMode::Delete).unwrap();
        // cells 0 and 1 (top row) zeroed
        for y in 0..2 {
            for x in 0..4 {
                assert_eq!(half.pixel(x, y), [0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn normalized_likelihood_reference_points() {
        let (params, sample, response, map) = sample_and_response(3);
        let refs = LikelihoodRefs::compute(&params, &sample.image, &response).unwrap();
        assert_eq!(refs.score(refs.original), 100.0);
        assert_eq!(refs.score(refs.blank), 0.0);

        let curve = deletion_curve(&params, &sample.image, &response, &map, &[0.0, 0.5, 1.0]).unwrap();
        assert!((curve.normalized_scores[0] - 100.0).abs() < 1e-9);
        assert!((curve.normalized_scores[2] - 0.0).abs() < 1e-9);
        let ins = insertion_curve(&params, &sample.image, &response, &map, &[0.0, 1.0]).unwrap();
        assert!((ins.normalized_scores[0] - 0.0).abs() < 1e-9);
        assert!((ins.normalized_scores[1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn normalized_likelihood_is_affine_invariant() {
        // The normalization maps (ll - blank)/(orig - blank); adding a
        // constant to every raw score cancels algebraically.
        let (blank, orig) = (-3.4, -1.1);
        let refs = LikelihoodRefs { blank, original: orig };
        let v = -2.0;
        let c = 0.7;
        let shifted = LikelihoodRefs { blank: blank + c, original: orig + c };
        assert!((refs.score(v) - shifted.score(v + c)).abs() < 1e-9);
    }

    #[test]
    fn pointing_game_cases() {
        let map = SaliencyMap::new(2, 2, vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        // peak cell (0,1) -> center pixel (3, 1) with patch_px = 2 (4x4 img)
        assert_eq!(pointing_game_hit(&map, &[BoundingBox::new(2, 0, 4, 2)], 4, 4).unwrap(), 1);
        assert_eq!(pointing_game_hit(&map, &[BoundingBox::new(0, 2, 2, 4)], 4, 4).unwrap(), 0);

        let zero = SaliencyMap::zeros(2, 2);
        assert_eq!(pointing_game_hit(&zero, &[BoundingBox::new(0, 0, 4, 4)], 4, 4).unwrap(), 0);

        // uniform map: row-major tie rule picks cell (0,0)
        let uni = SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(pointing_game_hit(&uni, &[BoundingBox::new(0, 0, 2, 2)], 4, 4).unwrap(), 1);
        assert_eq!(pointing_game_hit(&uni, &[BoundingBox::new(2, 2, 4, 4)], 4, 4).unwrap(), 0);

        // invariant under positive scaling
        let scaled = SaliencyMap::new(2, 2, map.values.iter().map(|v| v * 9.0).collect()).unwrap();
        assert_eq!(
            pointing_game_hit(&map, &[BoundingBox::new(2, 0, 4, 2)], 4, 4).unwrap(),
            pointing_game_hit(&scaled, &[BoundingBox::new(2, 0, 4, 2)], 4, 4).unwrap()
        );
    }

    #[test]
    fn energy_pg_equals_alignment_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            let map = SaliencyMap::new(2, 2, vals).unwrap();
            let boxes = [BoundingBox::new(0, 0, 2, 4)];
            let a = energy_pg(&map, &boxes, 4, 4).unwrap();
            let b = alignment_score(&map, &boxes, 4, 4).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn counterfactual_zero_sigma_equals_clean() {
        let config = cfg();
        let params = init_model(&config, 11).unwrap();
        let task = TaskConfig { min_objects: 1, max_objects: 2, object_span: 1, family_weights: [1.0, 1.0, 1.0] };
        let samples: Vec<DataSample> =
            (0..5).map(|id| generate_sample(&config, &task, id, 23).unwrap()).collect();
        let clean: f64 = {
            let mut correct = 0;
            for s in &samples {
                let out = generate(&params, &s.image, &s.prompt_sequence(&config), 0.0, 8, 0).unwrap();
                correct += accuracy_reward(&out.answer_tokens(), &s.gold).unwrap() as usize;
            }
            correct as f64 / samples.len() as f64
        };
        let fg0 = counterfactual_accuracy(&params, &samples, 0.0, NoiseRegion::Foreground, 3, 8).unwrap();
        assert_eq!(fg0, clean);
        let a = counterfactual_accuracy(&params, &samples, 0.5, NoiseRegion::Background, 3, 8).unwrap();
        let b = counterfactual_accuracy(&params, &samples, 0.5, NoiseRegion::Background, 3, 8).unwrap();
        assert_eq!(a, b, "same seed must reproduce the same accuracy");
    }

    #[test]
    fn noise_respects_the_region_mask() {
        let config = cfg();
        let task = TaskConfig { min_objects: 1, max_objects: 1, object_span: 1, family_weights: [1.0, 0.0, 0.0] };
        let sample = generate_sample(&config, &task, 0, 31).unwrap();
        let mask = union_mask(&sample.boxes, config.image_width(), config.image_height());

        let fg = noised_image(&sample.image, &sample.boxes, 0.8, NoiseRegion::Foreground, 1).unwrap();
        let bg = noised_image(&sample.image, &sample.boxes, 0.8, NoiseRegion::Background, 1).unwrap();
        for y in 0..config.image_height() {
            for x in 0..config.image_width() {
                let m = mask[y * config.image_width() + x];
                if !m {
                    assert_eq!(fg.pixel(x, y), sample.image.pixel(x, y));
                } else {
                    assert_eq!(bg.pixel(x, y), sample.image.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn report_aggregates_are_means_and_csv_round_trips() {
        let config = cfg();
        let params = init_model(&config, 13).unwrap();
        let task = TaskConfig { min_objects: 1, max_objects: 2, object_span: 1, family_weights: [1.0, 1.0, 1.0] };
        let fractions = vec![0.0, 0.5, 1.0];
        let mut evals = Vec::new();
        for id in 0..4 {
            let sample = generate_sample(&config, &task, id, 37).unwrap();
            evals.push(evaluate_sample(&params, &sample, &fractions, 8).unwrap());
        }
        let report = EvalReport::build(fractions.clone(), evals).unwrap();

        let mean_pg: f64 =
            report.samples.iter().map(|s| s.pg_hit as f64).sum::<f64>() / report.samples.len() as f64;
        assert!((report.aggregates.pg - mean_pg).abs() < 1e-9);

        // Recompute the energy mean from the CSV text.
        let csv = report.to_csv();
        let mut sum = 0.0;
        let mut n = 0;
        for line in csv.lines().skip(1) {
            let field: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            sum += field;
            n += 1;
        }
        assert!((report.aggregates.energy_pg - sum / n as f64).abs() < 1e-9);
    }
}
