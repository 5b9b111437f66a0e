//! Forward passes over the toy multimodal decoder.
//!
//! Three entry points share the same arithmetic (bit-for-bit):
//! [`forward_with_trace`] runs the whole sequence at once and records
//! everything attribution needs; [`IncrementalState`] extends one position at
//! a time against cached keys/values and backs [`generate`] and
//! [`sequence_logprob`].

use super::config::special;
use super::params::ModelParams;
use super::seq::{Segment, SegmentedSequence};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Everything the attribution pipeline needs from one forward pass.
pub struct ForwardTrace {
    /// Hidden states per layer boundary: `hidden[0]` is the embedding,
    /// `hidden[L]` the final representation. Each `[len × width]`.
    pub hidden: Vec<Tensor>,
    /// Attention weights per layer/head, `[len × len]`; row `i` is the
    /// distribution over positions `p ≤ i`, exactly zero above the diagonal.
    pub attn: Vec<Vec<Tensor>>,
    /// Cached value-output vectors per layer/head, `[len × width]`: the
    /// output-projected value of each position's normed layer input.
    pub vout: Vec<Vec<Tensor>>,
    /// FFN block outputs per layer, `[len × width]`.
    pub ffn_out: Vec<Tensor>,
    /// RMS statistic of the final representation per position.
    pub final_sigma: Vec<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.final_sigma.len()
    }
}

fn validate_inputs(params: &ModelParams, image: &Image, seq: &SegmentedSequence) -> Result<()> {
    let cfg = &params.config;
    if seq.len() > cfg.max_len {
        return Err(Error::Capacity(format!(
            "sequence length {} exceeds max_len {}",
            seq.len(),
            cfg.max_len
        )));
    }
    if seq.is_empty() {
        return Err(Error::Usage("empty sequence".into()));
    }
    if seq.visual_len() != cfg.num_patches() {
        return Err(Error::Shape(format!(
            "visual block has {} positions, grid needs {}",
            seq.visual_len(),
            cfg.num_patches()
        )));
    }
    if image.width() != cfg.image_width() || image.height() != cfg.image_height() {
        return Err(Error::Shape(format!(
            "image {}x{} does not match grid {}x{} patches of {} px",
            image.width(),
            image.height(),
            cfg.grid_rows,
            cfg.grid_cols,
            cfg.patch_px
        )));
    }
    if let Some(&bad) = seq.tokens().iter().find(|t| **t >= cfg.vocab) {
        return Err(Error::Index(format!("token id {} outside vocab {}", bad, cfg.vocab)));
    }
    Ok(())
}

/// Embedding row for one position: patch pixels (visual) or token table,
/// plus the learned position embedding.
fn embed_row(params: &ModelParams, image: &Image, pos: usize, token: usize, segment: Segment) -> Vec<f64> {
    let cfg = &params.config;
    let d = cfg.width;
    let mut row = vec![0.0; d];
    if segment == Segment::Visual {
        let (r, c) = (pos / cfg.grid_cols, pos % cfg.grid_cols);
        let patch = image.patch_vector(r, c, cfg.patch_px);
        vec_mat_into(&patch, &params.patch_embed, &mut row);
    } else {
        row.copy_from_slice(tok_row(&params.tok_embed, token));
    }
    let pos_row = params.pos_embed.row(pos);
    for j in 0..d {
        row[j] += pos_row[j];
    }
    row
}

fn tok_row(table: &Tensor, id: usize) -> &[f64] {
    table.row(id)
}

/// `out += x · m` accumulated in the same (k-outer) order as
/// [`tensor::matmul`] so row computations match the batched path bitwise.
fn vec_mat_into(x: &[f64], m: &Tensor, out: &mut [f64]) {
    let (k, n) = m.dims2().expect("matrix");
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(out.len(), n);
    for (kk, &xv) in x.iter().enumerate() {
        let mrow = &m.data()[kk * n..(kk + 1) * n];
        for j in 0..n {
            out[j] += xv * mrow[j];
        }
    }
}

fn rmsnorm_vec(x: &[f64], gamma: &Tensor, eps: f64) -> Vec<f64> {
    let s = tensor::rms_statistic(x, eps);
    x.iter().zip(gamma.data()).map(|(v, g)| g * v / s).collect()
}

/// Full-sequence forward pass that also records the attribution trace.
/// Returns the `[len × vocab]` logits and the trace.
pub fn forward_with_trace(
    params: &ModelParams,
    image: &Image,
    seq: &SegmentedSequence,
) -> Result<(Tensor, ForwardTrace)> {
    validate_inputs(params, image, seq)?;
    let cfg = &params.config;
    let len = seq.len();
    let d = cfg.width;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h0 = vec![0.0; len * d];
    for i in 0..len {
        let row = embed_row(params, image, i, seq.token(i), seq.segment(i));
        h0[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    let mut h = Tensor::from_parts(vec![len, d], h0);

    let mut trace = ForwardTrace {
        hidden: vec![h.clone()],
        attn: Vec::with_capacity(cfg.layers),
        vout: Vec::with_capacity(cfg.layers),
        ffn_out: Vec::with_capacity(cfg.layers),
        final_sigma: Vec::with_capacity(len),
    };

    for layer in &params.layers {
        let hn = tensor::rmsnorm_rows(&h, layer.att_gain.data(), cfg.eps)?;
        let mut attn_out = Tensor::zeros(&[len, d]);
        let mut layer_attn = Vec::with_capacity(cfg.heads);
        let mut layer_vout = Vec::with_capacity(cfg.heads);
        for j in 0..cfg.heads {
            let q = tensor::matmul(&hn, &layer.wq[j])?;
            let k = tensor::matmul(&hn, &layer.wk[j])?;
            let v = tensor::matmul(&hn, &layer.wv[j])?;
            let scores = tensor::matmul_nt(&q, &k)?;

            // Causal softmax: row i normalizes over p ≤ i, upper triangle
            // stays exactly zero.
            let mut alpha = Tensor::zeros(&[len, len]);
            for i in 0..len {
                let scaled: Vec<f64> = scores.row(i)[..=i].iter().map(|s| s * scale).collect();
                tensor::softmax_into(&scaled, &mut alpha.row_mut(i)[..=i]);
            }

            let ctx = tensor::matmul(&alpha, &v)?;
            let out_h = tensor::matmul(&ctx, &layer.wo[j])?;
            attn_out = tensor::add(&attn_out, &out_h)?;
            layer_vout.push(tensor::matmul(&v, &layer.wo[j])?);
            layer_attn.push(alpha);
        }
        trace.attn.push(layer_attn);
        trace.vout.push(layer_vout);

        let mid = tensor::add(&h, &attn_out)?;
        let fin = tensor::rmsnorm_rows(&mid, layer.ffn_gain.data(), cfg.eps)?;
        let pre = tensor::matmul(&fin, &layer.w1)?;
        let act = Tensor::from_parts(
            pre.shape().to_vec(),
            pre.data().iter().map(|v| v.max(0.0)).collect(),
        );
        let ffn = tensor::matmul(&act, &layer.w2)?;
        h = tensor::add(&mid, &ffn)?;
        trace.ffn_out.push(ffn);
        trace.hidden.push(h.clone());
    }

    for i in 0..len {
        trace.final_sigma.push(tensor::rms_statistic(h.row(i), cfg.eps));
    }
    let normed = tensor::rmsnorm_rows(&h, params.final_gain.data(), cfg.eps)?;
    let logits = tensor::matmul(&normed, &params.unembed)?;
    Ok((logits, trace))
}

/// Key/value-cached stepper: feed positions one at a time, get logits rows.
pub struct IncrementalState<'a> {
    params: &'a ModelParams,
    /// Per layer/head, flat `[t × head_dim]` caches.
    kcache: Vec<Vec<Vec<f64>>>,
    vcache: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl<'a> IncrementalState<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let l = params.config.layers;
        let h = params.config.heads;
        Self {
            params,
            kcache: vec![vec![Vec::new(); h]; l],
            vcache: vec![vec![Vec::new(); h]; l],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes the position at index `self.len()` and returns the logits
    /// row predicting the next position.
    pub fn step(&mut self, image: &Image, token: usize, segment: Segment) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        if self.len >= cfg.max_len {
            return Err(Error::Capacity(format!("cannot extend past max_len {}", cfg.max_len)));
        }
        if token >= cfg.vocab {
            return Err(Error::Index(format!("token id {} outside vocab {}", token, cfg.vocab)));
        }
        let h0 = embed_row(self.params, image, self.len, token, segment);
        Ok(self.step_row(h0))
    }

    fn step_row(&mut self, mut h: Vec<f64>) -> Vec<f64> {
        let cfg = &self.params.config;
        let d = cfg.width;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.len + 1; // prefix length including this position

        for (l, layer) in self.params.layers.iter().enumerate() {
            let xn = rmsnorm_vec(&h, &layer.att_gain, cfg.eps);
            let mut attn_out = vec![0.0; d];
            for j in 0..cfg.heads {
                let mut q = vec![0.0; dh];
                let mut kn = vec![0.0; dh];
                let mut vn = vec![0.0; dh];
                vec_mat_into(&xn, &layer.wq[j], &mut q);
                vec_mat_into(&xn, &layer.wk[j], &mut kn);
                vec_mat_into(&xn, &layer.wv[j], &mut vn);
                self.kcache[l][j].extend_from_slice(&kn);
                self.vcache[l][j].extend_from_slice(&vn);

                let kc = &self.kcache[l][j];
                let vc = &self.vcache[l][j];
                let mut scores = vec![0.0; t];
                for p in 0..t {
                    scores[p] = tensor::dot(&q, &kc[p * dh..(p + 1) * dh]) * scale;
                }
                let mut alpha = vec![0.0; t];
                tensor::softmax_into(&scores, &mut alpha);

                // ctx accumulated in ascending p, matching the batched matmul.
                let mut ctx = vec![0.0; dh];
                for p in 0..t {
                    let vrow = &vc[p * dh..(p + 1) * dh];
                    let a = alpha[p];
                    for x in 0..dh {
                        ctx[x] += a * vrow[x];
                    }
                }
                // Each head's output is summed separately before joining the
                // accumulator, matching the batched path's association order.
                let mut out_h = vec![0.0; d];
                vec_mat_into(&ctx, &layer.wo[j], &mut out_h);
                for x in 0..d {
                    attn_out[x] += out_h[x];
                }
            }
            for x in 0..d {
                h[x] += attn_out[x];
            }
            let fin = rmsnorm_vec(&h, &layer.ffn_gain, cfg.eps);
            let mut pre = vec![0.0; cfg.ffn_dim()];
            vec_mat_into(&fin, &layer.w1, &mut pre);
            for v in pre.iter_mut() {
                *v = v.max(0.0);
            }
            let mut ffn = vec![0.0; d];
            vec_mat_into(&pre, &layer.w2, &mut ffn);
            for x in 0..d {
                h[x] += ffn[x];
            }
        }
        self.len = t;

        let normed = rmsnorm_vec(&h, &self.params.final_gain, cfg.eps);
        let mut logits = vec![0.0; cfg.vocab];
        vec_mat_into(&normed, &self.params.unembed, &mut logits);
        logits
    }
}

/// Greedy argmax with lowest-id tie break.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let mut probs = vec![0.0; scaled.len()];
    tensor::softmax_into(&scaled, &mut probs);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Autoregressive sampling. Emitted tokens are tagged `Think` until the
/// close-think token is produced, then `Answer`; generation stops at the
/// end-of-sequence token, `max_new` tokens, or the model's capacity.
///
/// Also returns the (untempered) log-probability of each emitted token,
/// which is the quantity [`sequence_logprob`] reproduces under the same
/// parameters.
pub fn generate_with_logprobs(
    params: &ModelParams,
    image: &Image,
    prompt: &SegmentedSequence,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<(SegmentedSequence, Vec<f64>)> {
    validate_inputs(params, image, prompt)?;
    if prompt.has(Segment::Answer) {
        return Err(Error::Usage("prompt must end before the answer segment".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Usage("temperature must be finite and >= 0".into()));
    }

    let mut state = IncrementalState::new(params);
    let mut next_logits = Vec::new();
    for i in 0..prompt.len() {
        next_logits = state.step(image, prompt.token(i), prompt.segment(i))?;
    }

    let mut seq = prompt.clone();
    let mut logprobs = Vec::new();
    // Resume in answer mode if the prompt already closed a thinking span.
    let mut in_answer = prompt
        .tokens()
        .iter()
        .zip(prompt.segments())
        .any(|(t, s)| *s == Segment::Think && *t == special::THINK_CLOSE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for produced in 0..max_new {
        if seq.len() >= params.config.max_len {
            break;
        }
        let token = if temperature == 0.0 {
            argmax(&next_logits)
        } else {
            sample_tempered(&next_logits, temperature, &mut rng)
        };
        let mut lsm = vec![0.0; next_logits.len()];
        tensor::log_softmax_into(&next_logits, &mut lsm);
        logprobs.push(lsm[token]);

        let segment = if in_answer { Segment::Answer } else { Segment::Think };
        seq.push(token, segment);
        if token == special::THINK_CLOSE {
            in_answer = true;
        }
        if token == special::EOS {
            break;
        }
        if produced + 1 < max_new && seq.len() < params.config.max_len {
            next_logits = state.step(image, token, segment)?;
        }
    }
    Ok((seq, logprobs))
}

pub fn generate(
    params: &ModelParams,
    image: &Image,
    prompt: &SegmentedSequence,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<SegmentedSequence> {
    generate_with_logprobs(params, image, prompt, temperature, max_new, seed).map(|(s, _)| s)
}

/// Teacher-forced log-probabilities of the generated (think/answer) tokens
/// under `params`. Returns `(total, per_token)` where
/// `per_token[k] = log softmax(logits at the preceding position)[token]`.
pub fn sequence_logprob(
    params: &ModelParams,
    image: &Image,
    seq: &SegmentedSequence,
) -> Result<(f64, Vec<f64>)> {
    validate_inputs(params, image, seq)?;
    let resp = seq.response_positions();
    if resp.is_empty() {
        return Err(Error::Usage("sequence has no generated (think/answer) positions".into()));
    }
    let mut is_resp = vec![false; seq.len() + 1];
    for &t in &resp {
        is_resp[t] = true;
    }

    let mut state = IncrementalState::new(params);
    let mut per_token = Vec::with_capacity(resp.len());
    for i in 0..seq.len() {
        let row = state.step(image, seq.token(i), seq.segment(i))?;
        if i + 1 < seq.len() && is_resp[i + 1] {
            let mut lsm = vec![0.0; row.len()];
            tensor::log_softmax_into(&row, &mut lsm);
            per_token.push(lsm[seq.token(i + 1)]);
        }
    }
    let total = per_token.iter().sum();
    Ok((total, per_token))
}
