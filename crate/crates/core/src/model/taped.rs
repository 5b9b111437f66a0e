//! Differentiable forward pass recorded on a gradient tape.
//!
//! Mirrors [`super::forward`] exactly (same accumulation orders, so logits
//! agree bit-for-bit) but routes every op through [`Tape`] so training can
//! backpropagate into the parameters.

use super::config::ModelConfig;
use super::params::ModelParams;
use super::seq::SegmentedSequence;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

struct TapedLayer {
    att_gain: NodeId,
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wo: Vec<NodeId>,
    ffn_gain: NodeId,
    w1: NodeId,
    w2: NodeId,
}

/// Model parameters registered on a tape. `param_ids` lists the leaf nodes
/// in the canonical [`ModelParams::for_each`] order, which is what the
/// optimizer uses to map gradients back onto parameters.
pub struct TapedModel {
    pub param_ids: Vec<NodeId>,
    config: ModelConfig,
    patch_embed: NodeId,
    tok_embed: NodeId,
    pos_embed: NodeId,
    layers: Vec<TapedLayer>,
    final_gain: NodeId,
    unembed: NodeId,
}

impl TapedModel {
    pub fn insert(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut ids = Vec::new();
        let mut reg = |tape: &mut Tape, t: &Tensor| {
            let id = tape.param(t.clone());
            ids.push(id);
            id
        };
        let patch_embed = reg(tape, &params.patch_embed);
        let tok_embed = reg(tape, &params.tok_embed);
        let pos_embed = reg(tape, &params.pos_embed);
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let att_gain = reg(tape, &layer.att_gain);
            let wq: Vec<NodeId> = layer.wq.iter().map(|t| reg(tape, t)).collect();
            let wk: Vec<NodeId> = layer.wk.iter().map(|t| reg(tape, t)).collect();
            let wv: Vec<NodeId> = layer.wv.iter().map(|t| reg(tape, t)).collect();
            let wo: Vec<NodeId> = layer.wo.iter().map(|t| reg(tape, t)).collect();
            let ffn_gain = reg(tape, &layer.ffn_gain);
            let w1 = reg(tape, &layer.w1);
            let w2 = reg(tape, &layer.w2);
            layers.push(TapedLayer { att_gain, wq, wk, wv, wo, ffn_gain, w1, w2 });
        }
        let final_gain = reg(tape, &params.final_gain);
        let unembed = reg(tape, &params.unembed);
        Self {
            param_ids: ids,
            config: params.config.clone(),
            patch_embed,
            tok_embed,
            pos_embed,
            layers,
            final_gain,
            unembed,
        }
    }

    /// Final-norm output `[len × width]` for the whole sequence.
    fn forward_normed(&self, tape: &mut Tape, image: &Image, seq: &SegmentedSequence) -> Result<NodeId> {
        let cfg = &self.config;
        if seq.len() > cfg.max_len {
            return Err(Error::Capacity(format!(
                "sequence length {} exceeds max_len {}",
                seq.len(),
                cfg.max_len
            )));
        }
        let nv = seq.visual_len();
        if nv != cfg.num_patches() {
            return Err(Error::Shape(format!(
                "visual block has {} positions, grid needs {}",
                nv,
                cfg.num_patches()
            )));
        }
        let len = seq.len();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Embeddings: patch pixels through the patch embedder, everything
        // else through the token table, plus positions.
        let mut patch_data = Vec::with_capacity(nv * cfg.patch_dim());
        for p in 0..nv {
            let (r, c) = (p / cfg.grid_cols, p % cfg.grid_cols);
            patch_data.extend(image.patch_vector(r, c, cfg.patch_px));
        }
        let patches = tape.constant(Tensor::from_parts(vec![nv, cfg.patch_dim()], patch_data));
        let vis = tape.matmul(patches, self.patch_embed)?;
        let text_ids: Vec<usize> = seq.tokens()[nv..].to_vec();
        let embedded = if text_ids.is_empty() {
            vis
        } else {
            let toks = tape.gather_rows(self.tok_embed, text_ids)?;
            tape.concat_rows(vis, toks)?
        };
        let pos = tape.slice_rows(self.pos_embed, 0, len)?;
        let mut h = tape.add(embedded, pos)?;

        // Additive causal mask: 0 at or below the diagonal, a large negative
        // number above it (underflows to exactly zero attention).
        let mut mask_data = vec![0.0; len * len];
        for i in 0..len {
            for p in (i + 1)..len {
                mask_data[i * len + p] = -1e30;
            }
        }
        let mask = tape.constant(Tensor::from_parts(vec![len, len], mask_data));

        for layer in &self.layers {
            let hn = tape.rmsnorm_rows(h, layer.att_gain, cfg.eps)?;
            let mut attn_out: Option<NodeId> = None;
            for j in 0..cfg.heads {
                let q = tape.matmul(hn, layer.wq[j])?;
                let k = tape.matmul(hn, layer.wk[j])?;
                let v = tape.matmul(hn, layer.wv[j])?;
                let scores = tape.matmul_nt(q, k)?;
                let scaled = tape.scale(scores, scale);
                let masked = tape.add(scaled, mask)?;
                let alpha = tape.softmax_rows(masked)?;
                let ctx = tape.matmul(alpha, v)?;
                let out_h = tape.matmul(ctx, layer.wo[j])?;
                attn_out = Some(match attn_out {
                    Some(acc) => tape.add(acc, out_h)?,
                    None => out_h,
                });
            }
            let mid = tape.add(h, attn_out.expect("at least one head"))?;
            let fin = tape.rmsnorm_rows(mid, layer.ffn_gain, cfg.eps)?;
            let pre = tape.matmul(fin, layer.w1)?;
            let act = tape.relu(pre);
            let ffn = tape.matmul(act, layer.w2)?;
            h = tape.add(mid, ffn)?;
        }
        tape.rmsnorm_rows(h, self.final_gain, cfg.eps)
    }

    /// Full `[len × vocab]` logits node.
    pub fn forward_logits(&self, tape: &mut Tape, image: &Image, seq: &SegmentedSequence) -> Result<NodeId> {
        let normed = self.forward_normed(tape, image, seq)?;
        tape.matmul(normed, self.unembed)
    }

    /// Per-token log-probabilities of the generated (think/answer) tokens,
    /// shape `[num_response_tokens]`.
    pub fn response_logprobs(&self, tape: &mut Tape, image: &Image, seq: &SegmentedSequence) -> Result<NodeId> {
        let resp = seq.response_positions();
        if resp.is_empty() {
            return Err(Error::Usage("sequence has no generated (think/answer) positions".into()));
        }
        let normed = self.forward_normed(tape, image, seq)?;
        // Only the rows that predict a response token need unembedding.
        let pred_rows: Vec<usize> = resp.iter().map(|t| t - 1).collect();
        let picked = tape.gather_rows(normed, pred_rows)?;
        let logits = tape.matmul(picked, self.unembed)?;
        let lsm = tape.log_softmax_rows(logits)?;
        let coords: Vec<(usize, usize)> = resp.iter().enumerate().map(|(k, &t)| (k, seq.token(t))).collect();
        tape.gather_entries(lsm, coords)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward_with_trace, sequence_logprob};
    use crate::model::params::init_model;
    use crate::model::testutil::{tiny_config, tiny_inputs};

    #[test]
    fn param_ids_follow_canonical_order() {
        let params = init_model(&tiny_config(), 1).unwrap();
        let mut tape = Tape::new();
        let taped = TapedModel::insert(&mut tape, &params);
        let mut expect = Vec::new();
        params.for_each(&mut |t| expect.push(t.clone()));
        assert_eq!(expect.len(), taped.param_ids.len());
        for (id, t) in taped.param_ids.iter().zip(&expect) {
            assert_eq!(tape.value(*id), t);
        }
    }

    #[test]
    fn taped_logits_match_trace_forward_bitwise() {
        let cfg = tiny_config();
        let params = init_model(&cfg, 5).unwrap();
        let (image, seq) = tiny_inputs(&cfg, 3);
        let (logits, _) = forward_with_trace(&params, &image, &seq).unwrap();

        let mut tape = Tape::new();
        let taped = TapedModel::insert(&mut tape, &params);
        let node = taped.forward_logits(&mut tape, &image, &seq).unwrap();
        assert_eq!(tape.value(node), &logits);
    }

    #[test]
    fn taped_logprobs_match_sequence_logprob() {
        let cfg = tiny_config();
        let params = init_model(&cfg, 7).unwrap();
        let (image, seq) = tiny_inputs(&cfg, 4);
        let (_, per_token) = sequence_logprob(&params, &image, &seq).unwrap();

        let mut tape = Tape::new();
        let taped = TapedModel::insert(&mut tape, &params);
        let node = taped.response_logprobs(&mut tape, &image, &seq).unwrap();
        assert_eq!(tape.value(node).data(), per_token.as_slice());
        assert!(tape.replay_check());
    }

    #[test]
    fn embedding_gradients_flow_to_used_rows_only() {
        let cfg = tiny_config();
        let params = init_model(&cfg, 9).unwrap();
        let (image, seq) = tiny_inputs(&cfg, 6);

        let mut tape = Tape::new();
        let taped = TapedModel::insert(&mut tape, &params);
        let lp = taped.response_logprobs(&mut tape, &image, &seq).unwrap();
        let loss = tape.sum(lp);
        let grads = tape.backward(loss).unwrap();

        let g_tok = grads.get(taped.tok_embed).unwrap();
        let used: std::collections::HashSet<usize> = seq.tokens()[seq.visual_len()..].iter().copied().collect();
        for id in 0..cfg.vocab {
            let row = g_tok.row(id);
            let nonzero = row.iter().any(|v| *v != 0.0);
            if used.contains(&id) {
                assert!(nonzero, "used token {} should receive gradient", id);
            } else {
                assert!(!nonzero, "unused token {} should not receive gradient", id);
            }
        }
    }
}
