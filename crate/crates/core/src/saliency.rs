//! First-order logit attribution and saliency maps.
//!
//! A target logit decomposes into one scalar per context position (the
//! single-attention-hop, output-projected value of that position, normalized
//! and unembedded) plus an unattributed remainder (initial embedding and FFN
//! terms). Selecting the visual positions, clipping negatives, and reshaping
//! into the patch grid yields a saliency map for that prediction.
//!
//! The bottleneck rollout composes visual→think and think→answer attention
//! per layer/head; substituting those weights into the same decomposition
//! and summing over answer tokens gives the holistic map of a response.

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelConfig, ModelParams, Segment, SegmentedSequence};
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-context-position attribution of one target logit.
#[derive(Debug, Clone)]
pub struct ContributionVector {
    /// Position whose logits are being explained (prediction happens here).
    pub position: usize,
    /// Target token id whose logit is decomposed.
    pub target: usize,
    /// `contributions[p]` is the direct contribution of context position
    /// `p ≤ position` to the target logit.
    pub contributions: Vec<f64>,
    /// Initial-embedding and FFN terms, projected onto the target logit;
    /// computed independently so the decomposition can be cross-checked.
    pub remainder: f64,
}

impl ContributionVector {
    pub fn total(&self) -> f64 {
        self.contributions.iter().sum::<f64>() + self.remainder
    }
}

/// Non-negative scores over the visual patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major cell values, all ≥ 0.
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(grid_rows: usize, grid_cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid_rows * grid_cols {
            return Err(Error::Shape(format!(
                "saliency grid {}x{} needs {} values, got {}",
                grid_rows,
                grid_cols,
                grid_rows * grid_cols,
                values.len()
            )));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation("saliency values must be finite and non-negative".into()));
        }
        Ok(Self { grid_rows, grid_cols, values })
    }

    pub fn zeros(grid_rows: usize, grid_cols: usize) -> Self {
        Self { grid_rows, grid_cols, values: vec![0.0; grid_rows * grid_cols] }
    }

    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_cols + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Elementwise sum with another map of the same shape.
    pub fn add(&mut self, other: &SaliencyMap) -> Result<()> {
        if self.grid_rows != other.grid_rows || self.grid_cols != other.grid_cols {
            return Err(Error::Shape("saliency map shapes differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Nearest-neighbor expansion to pixel resolution: each cell covers its
    /// `patch_px × patch_px` block.
    pub fn to_pixels(&self, patch_px: usize) -> Vec<f64> {
        let w = self.grid_cols * patch_px;
        let h = self.grid_rows * patch_px;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = self.cell(y / patch_px, x / patch_px);
            }
        }
        out
    }

    /// Serializes to the `{grid_rows, grid_cols, values}` JSON record.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: SaliencyMap = serde_json::from_str(s)?;
        SaliencyMap::new(map.grid_rows, map.grid_cols, map.values)
    }

    /// Renders as a binary portable graymap (P5), max-normalized to 255.
    /// An all-zero map renders as all black.
    pub fn write_pgm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.grid_cols, self.grid_rows)?;
        let max = self.values.iter().cloned().fold(0.0f64, f64::max);
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_pgm(&mut f)
    }
}

/// Per-layer/head visual→answer attention products.
#[derive(Debug, Clone)]
pub struct BottleneckRollout {
    /// `via[l][h]` has shape `[num_visual × num_answer]`.
    pub via: Vec<Vec<Tensor>>,
    pub num_visual: usize,
    pub num_think: usize,
    pub num_answer: usize,
}

/// The normalization applied to each contribution term before unembedding:
/// the final norm gain divided by the RMS statistic of the anchor position's
/// final representation. Precomputed against the target unembedding column.
fn normed_target_column(params: &ModelParams, sigma: f64, target: usize) -> Vec<f64> {
    let d = params.config.width;
    let mut col = vec![0.0; d];
    for x in 0..d {
        // unembed is [width × vocab]
        col[x] = params.final_gain.data()[x] / sigma * params.unembed.data()[x * params.config.vocab + target];
    }
    col
}

/// Decomposes the logit of `target` predicted at `position` into direct
/// contributions of every context position `p ≤ position`.
///
/// Each term is the attention weight times the position's value-output
/// vector, passed through the final normalization with the RMS statistic of
/// the predicting position's final representation, then unembedded. The
/// remainder (initial embedding + FFN outputs through the same map) is
/// computed independently of the contributions so that
/// `Σ contributions + remainder` genuinely cross-checks the forward logit.
pub fn direct_contributions(
    params: &ModelParams,
    trace: &ForwardTrace,
    position: usize,
    target: usize,
) -> Result<ContributionVector> {
    let cfg = &params.config;
    let len = trace.seq_len();
    if position >= len {
        return Err(Error::Index(format!("position {} outside sequence of length {}", position, len)));
    }
    if target >= cfg.vocab {
        return Err(Error::Index(format!("target token {} outside vocab {}", target, cfg.vocab)));
    }

    let sigma = trace.final_sigma[position];
    let w = normed_target_column(params, sigma, target);

    let mut contributions = vec![0.0; position + 1];
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            let alpha_row = trace.attn[l][h].row(position);
            let vout = &trace.vout[l][h];
            for (p, c) in contributions.iter_mut().enumerate() {
                let a = alpha_row[p];
                if a != 0.0 {
                    *c += a * dot_slice(vout.row(p), &w);
                }
            }
        }
    }

    // Remainder: h0 and FFN terms through the same linear map.
    let mut remainder = dot_slice(trace.hidden[0].row(position), &w);
    for l in 0..cfg.layers {
        remainder += dot_slice(trace.ffn_out[l].row(position), &w);
    }

    Ok(ContributionVector { position, target, contributions, remainder })
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Selects the visual-position contributions, clips negatives, and reshapes
/// row-major into the patch grid.
pub fn token_saliency_map(
    config: &ModelConfig,
    contrib: &ContributionVector,
    seq: &SegmentedSequence,
) -> Result<SaliencyMap> {
    let visual = seq.positions(Segment::Visual);
    if visual.is_empty() {
        return Err(Error::Usage("sequence has no visual positions".into()));
    }
    if visual.len() != config.num_patches() {
        return Err(Error::Shape(format!(
            "visual block has {} positions, grid needs {}",
            visual.len(),
            config.num_patches()
        )));
    }
    let mut values = Vec::with_capacity(visual.len());
    for &p in &visual {
        let c = if p < contrib.contributions.len() { contrib.contributions[p] } else { 0.0 };
        values.push(c.max(0.0));
    }
    SaliencyMap::new(config.grid_rows, config.grid_cols, values)
}

/// Composes visual→think and think→answer attention per layer/head:
/// `via = a_vt · a_ta` with no column normalization.
pub fn bottleneck_rollout(
    config: &ModelConfig,
    trace: &ForwardTrace,
    seq: &SegmentedSequence,
) -> Result<BottleneckRollout> {
    let visual = seq.positions(Segment::Visual);
    let think = seq.positions(Segment::Think);
    let answer = seq.positions(Segment::Answer);
    if think.is_empty() {
        return Err(Error::Segment("bottleneck rollout needs at least one think position".into()));
    }
    if answer.is_empty() {
        return Err(Error::Segment("bottleneck rollout needs at least one answer position".into()));
    }
    let (nv, nt, na) = (visual.len(), think.len(), answer.len());

    let mut via = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut per_head = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let alpha = &trace.attn[l][h];
            // a_vt[v][t]: attention the t-th think token pays to visual v.
            let mut a_vt = vec![0.0; nv * nt];
            for (ti, &tp) in think.iter().enumerate() {
                let row = alpha.row(tp);
                for (vi, &vp) in visual.iter().enumerate() {
                    a_vt[vi * nt + ti] = row[vp];
                }
            }
            // a_ta[t][a]: attention the a-th answer token pays to think t.
            let mut a_ta = vec![0.0; nt * na];
            for (ai, &ap) in answer.iter().enumerate() {
                let row = alpha.row(ap);
                for (ti, &tp) in think.iter().enumerate() {
                    a_ta[ti * na + ai] = row[tp];
                }
            }
            let a_vt = Tensor::from_parts(vec![nv, nt], a_vt);
            let a_ta = Tensor::from_parts(vec![nt, na], a_ta);
            per_head.push(matmul(&a_vt, &a_ta)?);
        }
        via.push(per_head);
    }
    Ok(BottleneckRollout { via, num_visual: nv, num_think: nt, num_answer: na })
}

/// Transitional saliency map of the `answer_idx`-th answer token: the direct
/// contribution formula with the rollout weights substituted for the visual
/// attention weights, anchored at the answer position (its final-norm RMS
/// statistic and its realized token as the target), clipped at zero.
fn transitional_map(
    params: &ModelParams,
    trace: &ForwardTrace,
    rollout: &BottleneckRollout,
    seq: &SegmentedSequence,
    answer_positions: &[usize],
    answer_idx: usize,
) -> Result<SaliencyMap> {
    let cfg = &params.config;
    let visual = seq.positions(Segment::Visual);
    let pos = answer_positions[answer_idx];
    let sigma = trace.final_sigma[pos];
    let target = seq.token(pos);
    let w = normed_target_column(params, sigma, target);

    let mut values = vec![0.0; visual.len()];
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            let via = &rollout.via[l][h];
            let vout = &trace.vout[l][h];
            for (vi, &vp) in visual.iter().enumerate() {
                let a = via.row(vi)[answer_idx];
                if a != 0.0 {
                    values[vi] += a * dot_slice(vout.row(vp), &w);
                }
            }
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    SaliencyMap::new(cfg.grid_rows, cfg.grid_cols, values)
}

/// Sum of the per-answer-token transitional maps (each clipped at zero, no
/// per-token normalization).
pub fn holistic_saliency_map(
    params: &ModelParams,
    trace: &ForwardTrace,
    seq: &SegmentedSequence,
) -> Result<SaliencyMap> {
    let cfg = &params.config;
    let rollout = bottleneck_rollout(cfg, trace, seq)?;
    let answer = seq.positions(Segment::Answer);
    let mut total = SaliencyMap::zeros(cfg.grid_rows, cfg.grid_cols);
    for ai in 0..answer.len() {
        let map = transitional_map(params, trace, &rollout, seq, &answer, ai)?;
        total.add(&map)?;
    }
    Ok(total)
}
