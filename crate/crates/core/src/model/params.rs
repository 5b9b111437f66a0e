//! Model parameters: initialization, traversal, and checkpoint I/O.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Pre-attention norm gain.
    pub att_gain: Tensor,
    /// Per-head projections; `wq`/`wk`/`wv` map width -> head_dim,
    /// `wo` maps head_dim -> width.
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    /// Pre-FFN norm gain.
    pub ffn_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Linear patch embedder, `[patch_dim × width]`.
    pub patch_embed: Tensor,
    /// Token embedding table, `[vocab × width]`.
    pub tok_embed: Tensor,
    /// Learned absolute position embeddings, `[max_len × width]`.
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    /// Pre-unembedding norm gain.
    pub final_gain: Tensor,
    /// Unembedding matrix, `[width × vocab]`.
    pub unembed: Tensor,
}

/// Deterministic initialization: uniform(−1/√width, 1/√width) for every
/// weight matrix and embedding, ones for norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (config.width as f64).sqrt();
    let mut uniform = |rows: usize, cols: usize| -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::from_parts(vec![rows, cols], data)
    };
    let ones = |n: usize| Tensor::from_parts(vec![n], vec![1.0; n]);

    let d = config.width;
    let dh = config.head_dim();
    let patch_embed = uniform(config.patch_dim(), d);
    let tok_embed = uniform(config.vocab, d);
    let pos_embed = uniform(config.max_len, d);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let mut wq = Vec::with_capacity(config.heads);
        let mut wk = Vec::with_capacity(config.heads);
        let mut wv = Vec::with_capacity(config.heads);
        let mut wo = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            wq.push(uniform(d, dh));
            wk.push(uniform(d, dh));
            wv.push(uniform(d, dh));
            wo.push(uniform(dh, d));
        }
        layers.push(LayerParams {
            att_gain: ones(d),
            wq,
            wk,
            wv,
            wo,
            ffn_gain: ones(d),
            w1: uniform(d, config.ffn_dim()),
            w2: uniform(config.ffn_dim(), d),
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        patch_embed,
        tok_embed,
        pos_embed,
        layers,
        final_gain: ones(d),
        unembed: uniform(d, config.vocab),
    })
}

impl ModelParams {
    /// Visits every parameter tensor in a fixed canonical order. The same
    /// order is used by the taped forward pass and the optimizer state.
    pub fn for_each(&self, f: &mut impl FnMut(&Tensor)) {
        f(&self.patch_embed);
        f(&self.tok_embed);
        f(&self.pos_embed);
        for layer in &self.layers {
            f(&layer.att_gain);
            for t in layer.wq.iter().chain(&layer.wk).chain(&layer.wv).chain(&layer.wo) {
                f(t);
            }
            f(&layer.ffn_gain);
            f(&layer.w1);
            f(&layer.w2);
        }
        f(&self.final_gain);
        f(&self.unembed);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.patch_embed);
        f(&mut self.tok_embed);
        f(&mut self.pos_embed);
        for layer in &mut self.layers {
            f(&mut layer.att_gain);
            for t in layer
                .wq
                .iter_mut()
                .chain(&mut layer.wk)
                .chain(&mut layer.wv)
                .chain(&mut layer.wo)
            {
                f(t);
            }
            f(&mut layer.ffn_gain);
            f(&mut layer.w1);
            f(&mut layer.w2);
        }
        f(&mut self.final_gain);
        f(&mut self.unembed);
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |t| n += t.numel());
        n
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: ModelParams,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let ckpt = Checkpoint { format_version: CHECKPOINT_VERSION, model: params.clone() };
    let json = serde_json::to_string(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let raw = std::fs::read_to_string(path)?;
    // Peek the version before strict decoding so mismatches are reported
    // as version errors rather than opaque parse failures.
    let head: serde_json::Value = serde_json::from_str(&raw)?;
    let found = head
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Validation("checkpoint missing format_version".into()))?;
    if found as u32 != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: found as u32 });
    }
    let ckpt: Checkpoint = serde_json::from_str(&raw)?;
    ckpt.model.config.validate()?;
    Ok(ckpt.model)
}
