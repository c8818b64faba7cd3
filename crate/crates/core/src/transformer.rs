//! Contextual module: an auto-regressive encoder-decoder transformer.
//!
//! Stage one pretrains it as a sequence autoencoder with shared token and
//! learned positional embeddings and a weight-tied output head. Stage two
//! keeps only the encoder/decoder layer weights: embeddings are dropped,
//! the encoder consumes structural features directly (plus fresh learned
//! positions), and the decoder gets a fresh input embedding and an untied
//! output head.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{ALPHABET_SIZE, BOS_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{dropout, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Param, Scalar, Tensor};

/// Transformer hyperparameters (shared by stage one and stage two).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Feed-forward inner width as a multiple of `width`.
    pub ff_mult: usize,
    pub attn_dropout: f64,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            width: 512,
            heads: 8,
            encoder_layers: 8,
            decoder_layers: 8,
            ff_mult: 4,
            attn_dropout: 0.1,
            max_len: 512,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention with dropout on the attention
/// probabilities.
pub struct MultiHeadAttention<F: Scalar> {
    wq: Linear<F>,
    wk: Linear<F>,
    wv: Linear<F>,
    wo: Linear<F>,
    heads: usize,
    dropout_p: f64,
}

impl<F: Scalar> MultiHeadAttention<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig) -> Self {
        let d = cfg.width;
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, Init::Xavier, true),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, Init::Xavier, true),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, Init::Xavier, true),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, Init::Xavier, true),
            heads: cfg.heads,
            dropout_p: cfg.attn_dropout,
        }
    }

    fn forward(
        &self,
        q_in: &Tensor<F>,
        kv_in: &Tensor<F>,
        causal: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<F> {
        let d = q_in.ncols();
        let dk = d / self.heads;
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let scale = F::of_f64(1.0 / (dk as f64).sqrt());
        let mask = causal.then(|| {
            let n = q_in.nrows();
            debug_assert_eq!(n, kv_in.nrows(), "causal attention is self-attention");
            Tensor::constant(Array2::from_shape_fn((n, n), |(i, j)| {
                if j > i {
                    F::of_f64(-1e30)
                } else {
                    F::zero()
                }
            }))
        });
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);
            let mut scores = qh.matmul(&kh.transpose()).scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m);
            }
            let probs = scores.softmax_rows();
            let probs = dropout(&probs, self.dropout_p, rng.as_deref_mut());
            heads_out.push(probs.matmul(&vh));
        }
        self.wo.forward(&Tensor::concat_cols(&heads_out))
    }
}

struct FeedForward<F: Scalar> {
    w1: Linear<F>,
    w2: Linear<F>,
}

impl<F: Scalar> FeedForward<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig) -> Self {
        let d = cfg.width;
        let inner = d * cfg.ff_mult;
        FeedForward {
            w1: Linear::new(store, &format!("{name}.w1"), d, inner, Init::Xavier, true),
            w2: Linear::new(store, &format!("{name}.w2"), inner, d, Init::Xavier, true),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.w2.forward(&self.w1.forward(x).relu())
    }
}

/// Post-norm encoder block: self-attention then feed-forward.
pub struct EncoderLayer<F: Scalar> {
    attn: MultiHeadAttention<F>,
    ff: FeedForward<F>,
    ln1: LayerNorm<F>,
    ln2: LayerNorm<F>,
}

impl<F: Scalar> EncoderLayer<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.self"), cfg),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.width),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.width),
        }
    }

    fn forward(&self, x: &Tensor<F>, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
        let a = self.attn.forward(x, x, false, rng);
        let x = self.ln1.forward(&x.add(&a));
        let f = self.ff.forward(&x);
        self.ln2.forward(&x.add(&f))
    }
}

/// Post-norm decoder block: self-attention (causal in auto-regressive
/// mode), cross-attention to the encoder memory, feed-forward.
pub struct DecoderLayer<F: Scalar> {
    self_attn: MultiHeadAttention<F>,
    cross_attn: MultiHeadAttention<F>,
    ff: FeedForward<F>,
    ln1: LayerNorm<F>,
    ln2: LayerNorm<F>,
    ln3: LayerNorm<F>,
}

impl<F: Scalar> DecoderLayer<F> {
    fn new(store: &mut ParamStore<F>, name: &str, cfg: &TransformerConfig) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), cfg),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.width),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.width),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.width),
        }
    }

    fn forward(
        &self,
        x: &Tensor<F>,
        memory: &Tensor<F>,
        causal: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<F> {
        let a = self.self_attn.forward(x, x, causal, rng.as_deref_mut());
        let x = self.ln1.forward(&x.add(&a));
        let c = self.cross_attn.forward(&x, memory, false, rng);
        let x = self.ln2.forward(&x.add(&c));
        let f = self.ff.forward(&x);
        self.ln3.forward(&x.add(&f))
    }
}

fn build_encoder<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Vec<EncoderLayer<F>> {
    (0..cfg.encoder_layers)
        .map(|i| EncoderLayer::new(store, &format!("{prefix}.l{i}"), cfg))
        .collect()
}

fn build_decoder<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Vec<DecoderLayer<F>> {
    (0..cfg.decoder_layers)
        .map(|i| DecoderLayer::new(store, &format!("{prefix}.l{i}"), cfg))
        .collect()
}

fn positions<F: Scalar>(pos_table: &Param<F>, n: usize) -> Tensor<F> {
    let idx: Vec<usize> = (0..n).collect();
    pos_table.leaf().gather_rows(&idx)
}

fn bos_shift(tokens: &[usize]) -> Vec<usize> {
    let mut dec = Vec::with_capacity(tokens.len());
    dec.push(BOS_TOKEN);
    dec.extend_from_slice(&tokens[..tokens.len() - 1]);
    dec
}

/// Greedy left-to-right decoding driven by a closure that maps the tokens
/// generated so far to the logits of the next position. Temperatures at
/// or below 1e-4 collapse to exact argmax; larger temperatures sample.
pub fn greedy_rollout<F: Scalar>(
    n: usize,
    temperature: f64,
    mut sample_rng: Option<&mut ChaCha8Rng>,
    mut next_logits: impl FnMut(&[usize]) -> Vec<F>,
) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = next_logits(&out);
        let token = if temperature <= 1e-4 {
            argmax(&logits)
        } else {
            match sample_rng.as_deref_mut() {
                Some(rng) => sample_categorical(&logits, temperature, rng),
                None => argmax(&logits),
            }
        };
        out.push(token);
    }
    out
}

pub fn argmax<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<F: Scalar>(logits: &[F], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|v| v.into_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut u = rng.gen_range(0.0..1.0) * total;
    for (i, e) in exp.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exp.len() - 1
}

/// Stage-one autoencoder: shared token/positional embeddings on both
/// sides, output head tied to the token table.
pub struct SeqAutoencoder<F: Scalar> {
    pub cfg: TransformerConfig,
    tok: Param<F>,
    pos: Param<F>,
    encoder: Vec<EncoderLayer<F>>,
    decoder: Vec<DecoderLayer<F>>,
}

/// Prefixes for stage-one parameter names. The embed prefix is exactly
/// what stage two discards.
pub const AE_EMBED_PREFIX: &str = "ae.embed";
pub const AE_ENC_PREFIX: &str = "ae.enc";
pub const AE_DEC_PREFIX: &str = "ae.dec";

impl<F: Scalar> SeqAutoencoder<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let tok = store.create(
            &format!("{AE_EMBED_PREFIX}.tok"),
            ALPHABET_SIZE + 1,
            d,
            Init::Normal(0.02),
        );
        let pos = store.create(
            &format!("{AE_EMBED_PREFIX}.pos"),
            cfg.max_len,
            d,
            Init::Normal(0.02),
        );
        let encoder = build_encoder(store, AE_ENC_PREFIX, &cfg);
        let decoder = build_decoder(store, AE_DEC_PREFIX, &cfg);
        Ok(SeqAutoencoder {
            cfg,
            tok,
            pos,
            encoder,
            decoder,
        })
    }

    fn embed(&self, tokens: &[usize]) -> Tensor<F> {
        let scale = F::of_f64((self.cfg.width as f64).sqrt());
        self.tok
            .leaf()
            .gather_rows(tokens)
            .scale(scale)
            .add(&positions(&self.pos, tokens.len()))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {n} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        if n == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        Ok(())
    }

    pub fn encode(&self, tokens: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<F>> {
        self.check_len(tokens.len())?;
        let mut x = self.embed(tokens);
        for layer in &self.encoder {
            x = layer.forward(&x, rng.as_deref_mut());
        }
        Ok(x)
    }

    /// Teacher-forced logits for recovering the input sequence.
    pub fn teacher_forced_logits(
        &self,
        tokens: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<F>> {
        let memory = self.encode(tokens, rng.as_deref_mut())?;
        let mut x = self.embed(&bos_shift(tokens));
        for layer in &self.decoder {
            x = layer.forward(&x, &memory, true, rng.as_deref_mut());
        }
        Ok(self.tied_head(&x))
    }

    /// Output head tied to the token embedding (begin token row excluded).
    fn tied_head(&self, x: &Tensor<F>) -> Tensor<F> {
        let vocab_rows: Vec<usize> = (0..ALPHABET_SIZE).collect();
        x.matmul(&self.tok.leaf().gather_rows(&vocab_rows).transpose())
    }

    /// Greedy sequence recovery (argmax at the default 1e-6 temperature).
    pub fn greedy_decode(&self, tokens: &[usize], temperature: f64) -> Result<Vec<usize>> {
        let memory = self.encode(tokens, None)?;
        let n = tokens.len();
        Ok(greedy_rollout(n, temperature, None, |prefix| {
            let mut dec_tokens = vec![BOS_TOKEN];
            dec_tokens.extend_from_slice(prefix);
            let mut x = self.embed(&dec_tokens);
            for layer in &self.decoder {
                x = layer.forward(&x, &memory, true, None);
            }
            let logits = self.tied_head(&x);
            logits.data().row(logits.nrows() - 1).to_vec()
        }))
    }
}

/// Stage-two contextual module: transferred layer weights, fresh encoder
/// positions, fresh decoder-input embedding, fresh untied head.
pub struct ContextModel<F: Scalar> {
    pub cfg: TransformerConfig,
    enc_pos: Param<F>,
    dec_tok: Param<F>,
    dec_pos: Param<F>,
    head: Linear<F>,
    encoder: Vec<EncoderLayer<F>>,
    decoder: Vec<DecoderLayer<F>>,
    /// Non-autoregressive reading: the decoder cross-attends the
    /// contextual features from positional queries only.
    pub non_autoregressive: bool,
}

pub const CTX_ENC_PREFIX: &str = "ctx.enc";
pub const CTX_DEC_PREFIX: &str = "ctx.dec";

impl<F: Scalar> ContextModel<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        cfg: TransformerConfig,
        non_autoregressive: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let enc_pos = store.create("ctx.enc_pos", cfg.max_len, d, Init::Normal(0.02));
        let dec_tok = store.create(
            "ctx.dec_embed.tok",
            ALPHABET_SIZE + 1,
            d,
            Init::Normal(0.02),
        );
        let dec_pos = store.create("ctx.dec_embed.pos", cfg.max_len, d, Init::Normal(0.02));
        let head = Linear::new(store, "ctx.head", d, ALPHABET_SIZE, Init::Xavier, true);
        let encoder = build_encoder(store, CTX_ENC_PREFIX, &cfg);
        let decoder = build_decoder(store, CTX_DEC_PREFIX, &cfg);
        Ok(ContextModel {
            cfg,
            enc_pos,
            dec_tok,
            dec_pos,
            head,
            encoder,
            decoder,
            non_autoregressive,
        })
    }

    fn check_input(&self, z: &Tensor<F>) -> Result<()> {
        if z.ncols() != self.cfg.width {
            return Err(Error::Shape(format!(
                "structural feature width {} does not match contextual width {} (no silent projection)",
                z.ncols(),
                self.cfg.width
            )));
        }
        if z.nrows() > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                z.nrows(),
                self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Contextual encoding of structural features: add fresh learned
    /// positions, then run the transferred encoder stack.
    pub fn encode(
        &self,
        z_struc: &Tensor<F>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<F>> {
        self.check_input(z_struc)?;
        let mut x = z_struc.add(&positions(&self.enc_pos, z_struc.nrows()));
        for layer in &self.encoder {
            x = layer.forward(&x, rng.as_deref_mut());
        }
        Ok(x)
    }

    fn embed_dec(&self, tokens: &[usize]) -> Tensor<F> {
        let scale = F::of_f64((self.cfg.width as f64).sqrt());
        self.dec_tok
            .leaf()
            .gather_rows(tokens)
            .scale(scale)
            .add(&positions(&self.dec_pos, tokens.len()))
    }

    fn run_decoder(
        &self,
        x: Tensor<F>,
        memory: &Tensor<F>,
        causal: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<F> {
        let mut x = x;
        for layer in &self.decoder {
            x = layer.forward(&x, memory, causal, rng.as_deref_mut());
        }
        self.head.forward(&x)
    }

    /// All-position logits with the decoder teacher-forced on the native
    /// tokens (shifted right behind the begin token). In the
    /// non-autoregressive reading the decoder sees positional queries
    /// only and the native tokens are ignored.
    pub fn decode_teacher_forced(
        &self,
        z_seq: &Tensor<F>,
        native: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<F>> {
        if native.len() != z_seq.nrows() {
            return Err(Error::Shape(format!(
                "native length {} vs contextual features {}",
                native.len(),
                z_seq.nrows()
            )));
        }
        if self.non_autoregressive {
            let x = positions(&self.dec_pos, z_seq.nrows());
            return Ok(self.run_decoder(x, z_seq, false, rng.as_deref_mut()));
        }
        let x = self.embed_dec(&bos_shift(native));
        Ok(self.run_decoder(x, z_seq, true, rng))
    }

    /// Greedy decoding at the given sampling temperature.
    pub fn decode_greedy(
        &self,
        z_seq: &Tensor<F>,
        temperature: f64,
        mut sample_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<usize>> {
        let n = z_seq.nrows();
        if self.non_autoregressive {
            let x = positions(&self.dec_pos, n);
            let logits = self.run_decoder(x, z_seq, false, None);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let row: Vec<F> = logits.data().row(i).to_vec();
                let token = if temperature <= 1e-4 {
                    argmax(&row)
                } else {
                    match sample_rng.as_deref_mut() {
                        Some(rng) => sample_categorical(&row, temperature, rng),
                        None => argmax(&row),
                    }
                };
                out.push(token);
            }
            return Ok(out);
        }
        Ok(greedy_rollout(n, temperature, sample_rng, |prefix| {
            let mut dec_tokens = vec![BOS_TOKEN];
            dec_tokens.extend_from_slice(prefix);
            let x = self.embed_dec(&dec_tokens);
            let logits = self.run_decoder(x, z_seq, true, None);
            logits.data().row(logits.nrows() - 1).to_vec()
        }))
    }
}

/// Move pretrained encoder/decoder layer weights from a stage-one tensor
/// map into a stage-two model, dropping every embedding parameter. The
/// source and destination layer geometry must agree exactly.
pub fn transfer_pcm<F: Scalar>(
    src_tensors: &IndexMap<String, Array2<F>>,
    src_cfg: &TransformerConfig,
    dst_store: &ParamStore<F>,
    dst_cfg: &TransformerConfig,
) -> Result<usize> {
    if src_cfg.width != dst_cfg.width
        || src_cfg.heads != dst_cfg.heads
        || src_cfg.encoder_layers != dst_cfg.encoder_layers
        || src_cfg.decoder_layers != dst_cfg.decoder_layers
        || src_cfg.ff_mult != dst_cfg.ff_mult
    {
        return Err(Error::Transfer(format!(
            "layer geometry mismatch: source {src_cfg:?} vs target {dst_cfg:?}"
        )));
    }
    let mut moved = 0usize;
    for (name, param) in dst_store.iter() {
        // Match only layer parameters ("ctx.enc.l3.…"), never the fresh
        // embeddings ("ctx.enc_pos", "ctx.dec_embed.…") or the head.
        let src_name = if let Some(suffix) = name.strip_prefix(&format!("{CTX_ENC_PREFIX}.")) {
            format!("{AE_ENC_PREFIX}.{suffix}")
        } else if let Some(suffix) = name.strip_prefix(&format!("{CTX_DEC_PREFIX}.")) {
            format!("{AE_DEC_PREFIX}.{suffix}")
        } else {
            continue;
        };
        let src = src_tensors.get(&src_name).ok_or_else(|| {
            Error::Transfer(format!("source checkpoint is missing tensor {src_name}"))
        })?;
        let (r, c) = param.shape();
        if src.nrows() != r || src.ncols() != c {
            return Err(Error::Transfer(format!(
                "tensor {src_name} has shape {}x{}, expected {r}x{c}",
                src.nrows(),
                src.ncols()
            )));
        }
        param.set_value(src.clone());
        moved += 1;
    }
    if moved == 0 {
        return Err(Error::Transfer("no transferable tensors found".into()));
    }
    Ok(moved)
}
