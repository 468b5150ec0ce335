//! Masked-language-model encoder: embeddings with layer norm, post-norm
//! attention/FFN blocks, and an untied prediction head evaluated only at
//! masked positions. Everything runs one example at a time so per-example
//! gradients come out of the ordinary backward pass.

use crate::data::{MaskedExample, FIRST_CONTENT, PAD};
use crate::error::{Error, Result};
use crate::kernels::{
    add_into_cols, bias_add, bias_backward, embedding_gather, embedding_scatter_add, gelu,
    gelu_backward, gemm_into, layer_norm, layer_norm_backward, matmul, matmul_backward,
    slice_cols, softmax, softmax_backward, softmax_xent, softmax_xent_backward, LayerNormCache,
    XentOutput,
};
use crate::rng::{truncated_normal, Purpose, RngStream};
use crate::tensor::{Element, Tensor, TensorMap};
use serde::{Deserialize, Serialize};

pub type ParameterSet<E> = TensorMap<E>;
pub type GradientSet<E> = TensorMap<E>;

/// Architecture of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Hidden width d.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Offset added to the standard deviation in every layer norm.
    pub ln_eps: f64,
    /// Target standard deviation of truncated-normal initial weights.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            seq_len: 32,
            width: 64,
            blocks: 2,
            heads: 4,
            ff_width: 256,
            ln_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT as usize {
            return Err(Error::parameter(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::parameter(format!("seq_len {} below minimum 4", self.seq_len)));
        }
        if self.width == 0 || self.blocks == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::parameter("width, blocks, heads, ff_width must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::parameter(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::parameter(format!("ln_eps must be >= 0, got {}", self.ln_eps)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::parameter(format!("init_std must be > 0, got {}", self.init_std)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut out = vec![
            ("embedding.word".to_string(), vec![self.vocab_size, d]),
            ("embedding.position".to_string(), vec![self.seq_len, d]),
            ("embedding.token_type".to_string(), vec![2, d]),
            ("embedding.ln.gain".to_string(), vec![d]),
            ("embedding.ln.bias".to_string(), vec![d]),
        ];
        for b in 0..self.blocks {
            for proj in ["query", "key", "value", "output"] {
                out.push((format!("block{b}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("block{b}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("block{b}.attn.ln.gain"), vec![d]));
            out.push((format!("block{b}.attn.ln.bias"), vec![d]));
            out.push((format!("block{b}.ffn.inner.weight"), vec![d, self.ff_width]));
            out.push((format!("block{b}.ffn.inner.bias"), vec![self.ff_width]));
            out.push((format!("block{b}.ffn.outer.weight"), vec![self.ff_width, d]));
            out.push((format!("block{b}.ffn.outer.bias"), vec![d]));
            out.push((format!("block{b}.ffn.ln.gain"), vec![d]));
            out.push((format!("block{b}.ffn.ln.bias"), vec![d]));
        }
        out.push(("mlm_head.weight".to_string(), vec![d, self.vocab_size]));
        out
    }

    /// The three embedding tables that jointly feed the first layer norm.
    pub fn embedding_tables() -> [&'static str; 3] {
        ["embedding.word", "embedding.position", "embedding.token_type"]
    }
}

/// Truncated-normal matrices, unit layer-norm gains, zero biases. Each tensor
/// draws from its own stream keyed by ordinal, so the layout can grow without
/// disturbing existing tensors.
pub fn init_parameters<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<E>> {
    cfg.validate()?;
    let stream = RngStream::new(seed);
    let mut params = TensorMap::new();
    for (ordinal, (name, shape)) in cfg.parameter_layout().into_iter().enumerate() {
        let t = if name.ends_with(".ln.gain") {
            Tensor::from_fn(&shape, |_| E::one())
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            truncated_normal(&shape, cfg.init_std, stream.key(0, ordinal as u64, Purpose::Init))?
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// What a single forward pass reports.
#[derive(Debug, Clone)]
pub struct ForwardOutput<E: Element> {
    /// Mean cross-entropy over the masked positions, natural log.
    pub loss: f64,
    /// Masked positions predicted correctly (argmax over the vocabulary).
    pub correct: usize,
    /// Number of masked positions.
    pub masked: usize,
    /// Logits at the masked positions, [masked, vocab].
    pub logits: Tensor<E>,
}

struct BlockTrace<E: Element> {
    x_in: Tensor<E>,
    q: Tensor<E>,
    k: Tensor<E>,
    v: Tensor<E>,
    probs: Vec<Tensor<E>>,
    ctx: Tensor<E>,
    ln1: LayerNormCache<E>,
    x_mid: Tensor<E>,
    ffn_pre: Tensor<E>,
    ffn_act: Tensor<E>,
    ln2: LayerNormCache<E>,
}

struct Trace<E: Element> {
    word_ids: Vec<u32>,
    type_ids: Vec<u32>,
    ln0: LayerNormCache<E>,
    blocks: Vec<BlockTrace<E>>,
    masked_rows: Tensor<E>,
    xent: XentOutput<E>,
}

fn validate_example(cfg: &ModelConfig, ex: &MaskedExample) -> Result<()> {
    let l = cfg.seq_len;
    if ex.tokens.len() != l || ex.token_types.len() != l {
        return Err(Error::data(format!(
            "example length {} / {} does not match seq_len {l}",
            ex.tokens.len(),
            ex.token_types.len()
        )));
    }
    if ex.positions.is_empty() {
        return Err(Error::data("example has no masked positions"));
    }
    if ex.positions.len() != ex.labels.len() {
        return Err(Error::data(format!(
            "{} masked positions but {} labels",
            ex.positions.len(),
            ex.labels.len()
        )));
    }
    for w in ex.positions.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::data("masked positions must be strictly ascending"));
        }
    }
    if *ex.positions.last().unwrap() >= l {
        return Err(Error::data("masked position out of range"));
    }
    if let Some(&t) = ex.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::data(format!("token {t} out of vocabulary {}", cfg.vocab_size)));
    }
    for &lab in &ex.labels {
        if (lab as usize) >= cfg.vocab_size || lab < FIRST_CONTENT {
            return Err(Error::data(format!("label {lab} is not a content token")));
        }
    }
    if ex.token_types.iter().any(|&t| t > 1) {
        return Err(Error::data("token types must be 0 or 1"));
    }
    Ok(())
}

fn forward_trace<E: Element>(
    params: &ParameterSet<E>,
    cfg: &ModelConfig,
    ex: &MaskedExample,
) -> Result<(ForwardOutput<E>, Trace<E>)> {
    validate_example(cfg, ex)?;
    let l = cfg.seq_len;
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = d / heads;
    let word_ids: Vec<u32> = ex.tokens.iter().map(|&t| t as u32).collect();
    let type_ids: Vec<u32> = ex.token_types.iter().map(|&t| t as u32).collect();
    let pos_ids: Vec<u32> = (0..l as u32).collect();

    // summed embeddings, then layer norm
    let mut x = embedding_gather(params.get("embedding.word")?, &word_ids)?;
    let pos = embedding_gather(params.get("embedding.position")?, &pos_ids)?;
    let typ = embedding_gather(params.get("embedding.token_type")?, &type_ids)?;
    x.add_scaled(&pos, E::one())?;
    x.add_scaled(&typ, E::one())?;
    let (mut x, ln0) = layer_norm(
        &x,
        params.get("embedding.ln.gain")?,
        params.get("embedding.ln.bias")?,
        cfg.ln_eps,
    )?;

    // keys at PAD positions are excluded from attention
    let pad_mask: Vec<bool> = ex.tokens.iter().map(|&t| t == PAD).collect();
    let neg = E::from_f64(-1e30);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let x_in = x.clone();
        let q = bias_add(
            &matmul(&x_in, params.get(&format!("block{b}.attn.query.weight"))?)?,
            params.get(&format!("block{b}.attn.query.bias"))?,
        )?;
        let k = bias_add(
            &matmul(&x_in, params.get(&format!("block{b}.attn.key.weight"))?)?,
            params.get(&format!("block{b}.attn.key.bias"))?,
        )?;
        let v = bias_add(
            &matmul(&x_in, params.get(&format!("block{b}.attn.value.weight"))?)?,
            params.get(&format!("block{b}.attn.value.bias"))?,
        )?;
        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Tensor::zeros(&[l, d]);
        for h in 0..heads {
            let q_h = slice_cols(&q, h * dh, (h + 1) * dh)?;
            let k_h = slice_cols(&k, h * dh, (h + 1) * dh)?;
            let v_h = slice_cols(&v, h * dh, (h + 1) * dh)?;
            let mut scores = Tensor::zeros(&[l, l]);
            gemm_into(scale, &q_h, false, &k_h, true, 0.0, &mut scores)?;
            for r in 0..l {
                let row = scores.row_mut(r);
                for (c, &is_pad) in pad_mask.iter().enumerate() {
                    if is_pad {
                        row[c] = row[c] + neg;
                    }
                }
            }
            let p = softmax(&scores)?;
            let ctx_h = matmul(&p, &v_h)?;
            add_into_cols(&mut ctx, &ctx_h, h * dh)?;
            probs.push(p);
        }
        let attn_out = bias_add(
            &matmul(&ctx, params.get(&format!("block{b}.attn.output.weight"))?)?,
            params.get(&format!("block{b}.attn.output.bias"))?,
        )?;
        let mut res1 = x_in.clone();
        res1.add_scaled(&attn_out, E::one())?;
        let (x_mid, ln1) = layer_norm(
            &res1,
            params.get(&format!("block{b}.attn.ln.gain"))?,
            params.get(&format!("block{b}.attn.ln.bias"))?,
            cfg.ln_eps,
        )?;
        let ffn_pre = bias_add(
            &matmul(&x_mid, params.get(&format!("block{b}.ffn.inner.weight"))?)?,
            params.get(&format!("block{b}.ffn.inner.bias"))?,
        )?;
        let ffn_act = gelu(&ffn_pre);
        let ffn_out = bias_add(
            &matmul(&ffn_act, params.get(&format!("block{b}.ffn.outer.weight"))?)?,
            params.get(&format!("block{b}.ffn.outer.bias"))?,
        )?;
        let mut res2 = x_mid.clone();
        res2.add_scaled(&ffn_out, E::one())?;
        let (x_out, ln2) = layer_norm(
            &res2,
            params.get(&format!("block{b}.ffn.ln.gain"))?,
            params.get(&format!("block{b}.ffn.ln.bias"))?,
            cfg.ln_eps,
        )?;
        x = x_out;
        blocks.push(BlockTrace { x_in, q, k, v, probs, ctx, ln1, x_mid, ffn_pre, ffn_act, ln2 });
    }

    // prediction head only at masked positions
    let m = ex.positions.len();
    let mut masked_rows = Tensor::zeros(&[m, d]);
    for (r, &p) in ex.positions.iter().enumerate() {
        masked_rows.row_mut(r).copy_from_slice(x.row(p));
    }
    let logits = matmul(&masked_rows, params.get("mlm_head.weight")?)?;
    let labels: Vec<u32> = ex.labels.iter().map(|&t| t as u32).collect();
    let xent = softmax_xent(&logits, &labels)?;
    let loss = xent.losses.iter().sum::<f64>() / m as f64;
    let mut correct = 0usize;
    for (r, &lab) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (c, val) in row.iter().enumerate() {
            if *val > row[best] {
                best = c;
            }
        }
        if best == lab as usize {
            correct += 1;
        }
    }
    let out = ForwardOutput { loss, correct, masked: m, logits };
    let trace =
        Trace { word_ids, type_ids, ln0, blocks, masked_rows, xent };
    Ok((out, trace))
}

/// Loss, accuracy counts, and masked-position logits for one example.
pub fn forward_loss<E: Element>(
    params: &ParameterSet<E>,
    cfg: &ModelConfig,
    ex: &MaskedExample,
) -> Result<ForwardOutput<E>> {
    forward_trace(params, cfg, ex).map(|(out, _)| out)
}

/// Gradient of this example's mean masked cross-entropy with respect to every
/// parameter, plus the forward statistics it was computed from.
pub fn per_example_gradient<E: Element>(
    params: &ParameterSet<E>,
    cfg: &ModelConfig,
    ex: &MaskedExample,
) -> Result<(GradientSet<E>, ForwardOutput<E>)> {
    let (out, trace) = forward_trace(params, cfg, ex)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("forward loss".into()));
    }
    let l = cfg.seq_len;
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = params.zeros_like();

    let m = ex.positions.len();
    let labels: Vec<u32> = ex.labels.iter().map(|&t| t as u32).collect();
    let dloss = vec![1.0 / m as f64; m];
    let dlogits = softmax_xent_backward(&trace.xent.probs, &labels, &dloss)?;
    let (dmasked, dwhead) =
        matmul_backward(&trace.masked_rows, params.get("mlm_head.weight")?, &dlogits)?;
    *grads.get_mut("mlm_head.weight")? = dwhead;

    let mut dx = Tensor::zeros(&[l, d]);
    for (r, &p) in ex.positions.iter().enumerate() {
        let src = dmasked.row(r);
        let dst = dx.row_mut(p);
        for c in 0..d {
            dst[c] = dst[c] + src[c];
        }
    }

    for (b, bt) in trace.blocks.iter().enumerate().rev() {
        let gain2 = params.get(&format!("block{b}.ffn.ln.gain"))?;
        let (dres2, dg2, db2) = layer_norm_backward(&bt.ln2, gain2, cfg.ln_eps, &dx)?;
        grads.get_mut(&format!("block{b}.ffn.ln.gain"))?.add_scaled(&dg2, E::one())?;
        grads.get_mut(&format!("block{b}.ffn.ln.bias"))?.add_scaled(&db2, E::one())?;

        let w_outer = params.get(&format!("block{b}.ffn.outer.weight"))?;
        let (dffn_act, dw_outer) = matmul_backward(&bt.ffn_act, w_outer, &dres2)?;
        *grads.get_mut(&format!("block{b}.ffn.outer.weight"))? = dw_outer;
        *grads.get_mut(&format!("block{b}.ffn.outer.bias"))? = bias_backward(&dres2)?;
        let dffn_pre = gelu_backward(&bt.ffn_pre, &dffn_act)?;
        let w_inner = params.get(&format!("block{b}.ffn.inner.weight"))?;
        let (dx_mid_ffn, dw_inner) = matmul_backward(&bt.x_mid, w_inner, &dffn_pre)?;
        *grads.get_mut(&format!("block{b}.ffn.inner.weight"))? = dw_inner;
        *grads.get_mut(&format!("block{b}.ffn.inner.bias"))? = bias_backward(&dffn_pre)?;

        let mut dx_mid = dres2;
        dx_mid.add_scaled(&dx_mid_ffn, E::one())?;
        let gain1 = params.get(&format!("block{b}.attn.ln.gain"))?;
        let (dres1, dg1, db1) = layer_norm_backward(&bt.ln1, gain1, cfg.ln_eps, &dx_mid)?;
        grads.get_mut(&format!("block{b}.attn.ln.gain"))?.add_scaled(&dg1, E::one())?;
        grads.get_mut(&format!("block{b}.attn.ln.bias"))?.add_scaled(&db1, E::one())?;

        let w_o = params.get(&format!("block{b}.attn.output.weight"))?;
        let (dctx, dw_o) = matmul_backward(&bt.ctx, w_o, &dres1)?;
        *grads.get_mut(&format!("block{b}.attn.output.weight"))? = dw_o;
        *grads.get_mut(&format!("block{b}.attn.output.bias"))? = bias_backward(&dres1)?;

        let mut dq = Tensor::zeros(&[l, d]);
        let mut dk = Tensor::zeros(&[l, d]);
        let mut dv = Tensor::zeros(&[l, d]);
        for h in 0..heads {
            let k_h = slice_cols(&bt.k, h * dh, (h + 1) * dh)?;
            let v_h = slice_cols(&bt.v, h * dh, (h + 1) * dh)?;
            let q_h = slice_cols(&bt.q, h * dh, (h + 1) * dh)?;
            let dctx_h = slice_cols(&dctx, h * dh, (h + 1) * dh)?;
            let (dprobs, dv_h) = matmul_backward(&bt.probs[h], &v_h, &dctx_h)?;
            let dscores = softmax_backward(&bt.probs[h], &dprobs)?;
            let mut dq_h = Tensor::zeros(&[l, dh]);
            gemm_into(scale, &dscores, false, &k_h, false, 0.0, &mut dq_h)?;
            let mut dk_h = Tensor::zeros(&[l, dh]);
            gemm_into(scale, &dscores, true, &q_h, false, 0.0, &mut dk_h)?;
            add_into_cols(&mut dq, &dq_h, h * dh)?;
            add_into_cols(&mut dk, &dk_h, h * dh)?;
            add_into_cols(&mut dv, &dv_h, h * dh)?;
        }

        let mut dx_in = dres1;
        for (proj, dmat) in [("query", &dq), ("key", &dk), ("value", &dv)] {
            let w = params.get(&format!("block{b}.attn.{proj}.weight"))?;
            let (dx_p, dw) = matmul_backward(&bt.x_in, w, dmat)?;
            *grads.get_mut(&format!("block{b}.attn.{proj}.weight"))? = dw;
            *grads.get_mut(&format!("block{b}.attn.{proj}.bias"))? = bias_backward(dmat)?;
            dx_in.add_scaled(&dx_p, E::one())?;
        }
        dx = dx_in;
    }

    let gain0 = params.get("embedding.ln.gain")?;
    let (dxsum, dg0, db0) = layer_norm_backward(&trace.ln0, gain0, cfg.ln_eps, &dx)?;
    *grads.get_mut("embedding.ln.gain")? = dg0;
    *grads.get_mut("embedding.ln.bias")? = db0;
    let pos_ids: Vec<u32> = (0..l as u32).collect();
    embedding_scatter_add(grads.get_mut("embedding.word")?, &trace.word_ids, &dxsum)?;
    embedding_scatter_add(grads.get_mut("embedding.position")?, &pos_ids, &dxsum)?;
    embedding_scatter_add(grads.get_mut("embedding.token_type")?, &trace.type_ids, &dxsum)?;

    Ok((grads, out))
}

/// Aggregate evaluation over a set of pre-masked examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub examples: usize,
    pub masked_positions: usize,
}

/// Mean loss and masked-token accuracy over `examples`.
pub fn evaluate<E: Element>(
    params: &ParameterSet<E>,
    cfg: &ModelConfig,
    examples: &[MaskedExample],
) -> Result<EvalStats> {
    if examples.is_empty() {
        return Err(Error::parameter("evaluation set is empty"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut masked = 0usize;
    for ex in examples {
        let out = forward_loss(params, cfg, ex)?;
        loss_sum += out.loss * out.masked as f64;
        correct += out.correct;
        masked += out.masked;
    }
    Ok(EvalStats {
        mean_loss: loss_sum / masked as f64,
        accuracy: correct as f64 / masked as f64,
        examples: examples.len(),
        masked_positions: masked,
    })
}
