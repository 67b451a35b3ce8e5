//! Built-in full-precision causal transformer backend.
//!
//! Small decoder-only model (pre-LN blocks, single-head attention, GELU
//! MLP, untied output projection) with a hand-written backward pass that
//! propagates the loss gradient through the whole network down to the
//! input embeddings. Only the gradient of the concept row is ever exposed;
//! no other parameter has an optimizer attached, so the model is frozen by
//! construction.
//!
//! All math is f64. The forward/backward matmuls go through [`crate::par`],
//! which fans out over rayon rows when the `parallel` feature is enabled.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{
    shifted_cross_entropy, softmax, ConceptTokenHandle, EmbeddingInit, LanguageModel,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::par::matmul;
use crate::tokenizer::{WordTokenizer, ASSISTANT_MARK, SYSTEM_MARK, USER_MARK};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TinyLmConfig {
    pub model_id: String,
    pub dim: usize,
    pub layers: usize,
    pub context_length: usize,
    pub seed: u64,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
}

fn default_ff_mult() -> usize {
    4
}

impl Default for TinyLmConfig {
    fn default() -> Self {
        TinyLmConfig {
            model_id: "tiny-v1".into(),
            dim: 32,
            layers: 2,
            context_length: 256,
            seed: 0,
            ff_mult: 4,
        }
    }
}

struct Block {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct LayerCache {
    ln1_xhat: Array2<f64>,
    ln1_istd: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_istd: Array1<f64>,
    h: Array2<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    lnf_xhat: Array2<f64>,
    lnf_istd: Array1<f64>,
}

/// Pretraining cache: keeps every sublayer input so parameter gradients
/// can be formed.
struct FullLayerCache {
    ln1: Array2<f64>,
    ln1_xhat: Array2<f64>,
    ln1_istd: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    ln2: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_istd: Array1<f64>,
    h: Array2<f64>,
    g: Array2<f64>,
}

struct FullCache {
    layers: Vec<FullLayerCache>,
    lnf_xhat: Array2<f64>,
    lnf_istd: Array1<f64>,
    y: Array2<f64>,
}

struct BlockGrads {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct Grads {
    emb: Array2<f64>,
    pos: Array2<f64>,
    blocks: Vec<BlockGrads>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_out: Array2<f64>,
}

pub struct TinyLm {
    cfg: TinyLmConfig,
    tokenizer: WordTokenizer,
    base_vocab: usize,
    emb: Array2<f64>,
    pos: Array2<f64>,
    blocks: Vec<Block>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    w_out: Array2<f64>,
    concept_ids: Vec<u32>,
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(shape, |_| normal.sample(rng))
}

impl TinyLm {
    pub fn new(cfg: TinyLmConfig, tokenizer: WordTokenizer) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let f = cfg.dim * cfg.ff_mult;
        let v = tokenizer.vocab_size();
        let emb = randn(&mut rng, (v, d), INIT_STD);
        let pos = randn(&mut rng, (cfg.context_length, d), INIT_STD);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: randn(&mut rng, (d, d), INIT_STD),
                wk: randn(&mut rng, (d, d), INIT_STD),
                wv: randn(&mut rng, (d, d), INIT_STD),
                wo: randn(&mut rng, (d, d), INIT_STD),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: randn(&mut rng, (d, f), INIT_STD),
                b1: Array1::zeros(f),
                w2: randn(&mut rng, (f, d), INIT_STD),
                b2: Array1::zeros(d),
            })
            .collect();
        let lnf_g = Array1::ones(d);
        let lnf_b = Array1::zeros(d);
        let w_out = randn(&mut rng, (d, v), INIT_STD);
        TinyLm {
            cfg,
            tokenizer,
            base_vocab: v,
            emb,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            concept_ids: Vec::new(),
        }
    }

    /// Build tokenizer vocabulary from `texts` and construct the model.
    pub fn from_texts(cfg: TinyLmConfig, texts: &[&str]) -> Self {
        let tokenizer = WordTokenizer::build(texts);
        TinyLm::new(cfg, tokenizer)
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    /// Ids of every concept token registered so far.
    pub fn concept_ids(&self) -> &[u32] {
        &self.concept_ids
    }

    fn check_context(&self, len: usize) -> Result<()> {
        if len > self.cfg.context_length {
            return Err(Error::ContextOverflow {
                len,
                context: self.cfg.context_length,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let d = self.cfg.dim;
        let mut x = Array2::zeros((ids.len(), d));
        for (p, &id) in ids.iter().enumerate() {
            let row = self.emb.row(id as usize);
            let pos = self.pos.row(p);
            for j in 0..d {
                x[[p, j]] = row[j] + pos[j];
            }
        }
        x
    }

    fn forward(&self, ids: &[u32]) -> Result<(Array2<f64>, Cache)> {
        self.check_context(ids.len())?;
        for &id in ids {
            if (id as usize) >= self.emb.nrows() {
                return Err(Error::Backend(format!("token id {id} out of range")));
            }
        }
        let scale = 1.0 / (self.cfg.dim as f64).sqrt();
        let mut x = self.embed(ids);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let x_in = x.clone();
            let (ln1, ln1_xhat, ln1_istd) = ln_forward(&x_in, &blk.ln1_g, &blk.ln1_b);
            let q = matmul(ln1.view(), blk.wq.view());
            let k = matmul(ln1.view(), blk.wk.view());
            let v = matmul(ln1.view(), blk.wv.view());
            let mut scores = matmul(q.view(), k.t());
            scores *= scale;
            apply_causal_mask(&mut scores);
            let attn = softmax_rows(&scores);
            let ctx = matmul(attn.view(), v.view());
            let x_mid = &x_in + &matmul(ctx.view(), blk.wo.view());
            let (ln2, ln2_xhat, ln2_istd) = ln_forward(&x_mid, &blk.ln2_g, &blk.ln2_b);
            let h = matmul(ln2.view(), blk.w1.view()) + &blk.b1;
            let g = h.mapv(gelu);
            let m = matmul(g.view(), blk.w2.view()) + &blk.b2;
            x = &x_mid + &m;
            layers.push(LayerCache {
                ln1_xhat,
                ln1_istd,
                q,
                k,
                v,
                attn,
                ln2_xhat,
                ln2_istd,
                h,
            });
        }
        let (y, lnf_xhat, lnf_istd) = ln_forward(&x, &self.lnf_g, &self.lnf_b);
        let logits = matmul(y.view(), self.w_out.view());
        Ok((
            logits,
            Cache {
                layers,
                lnf_xhat,
                lnf_istd,
            },
        ))
    }

    /// Pretrain every parameter with plain SGD on a next-token objective.
    ///
    /// The concept-token workflow assumes a pretrained frozen backbone, so
    /// pretraining must happen before any `extend_vocab` call. Returns the
    /// mean loss per epoch.
    pub fn pretrain(&mut self, texts: &[&str], epochs: usize, lr: f64) -> Result<Vec<f64>> {
        if !self.concept_ids.is_empty() {
            return Err(Error::Backend(
                "pretraining after vocabulary extension would unfreeze the backbone".into(),
            ));
        }
        let sequences: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| self.tokenizer.encode(t))
            .collect();
        for seq in &sequences {
            self.check_context(seq.len())?;
            if seq.len() < 2 {
                return Err(Error::Backend("pretraining text shorter than two tokens".into()));
            }
        }
        let eos = self.eos_id();
        let mut trace = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut epoch_loss = 0.0;
            for ids in &sequences {
                let (logits, cache) = self.forward_full(ids)?;
                let (loss, dlogits) = shifted_cross_entropy(logits.view(), ids, eos)?;
                let grads = self.backward_full(ids, &dlogits, &cache);
                self.apply_grads(&grads, lr);
                epoch_loss += loss;
            }
            trace.push(epoch_loss / sequences.len() as f64);
        }
        Ok(trace)
    }

    fn forward_full(&self, ids: &[u32]) -> Result<(Array2<f64>, FullCache)> {
        self.check_context(ids.len())?;
        let scale = 1.0 / (self.cfg.dim as f64).sqrt();
        let mut x = self.embed(ids);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let x_in = x.clone();
            let (ln1, ln1_xhat, ln1_istd) = ln_forward(&x_in, &blk.ln1_g, &blk.ln1_b);
            let q = matmul(ln1.view(), blk.wq.view());
            let k = matmul(ln1.view(), blk.wk.view());
            let v = matmul(ln1.view(), blk.wv.view());
            let mut scores = matmul(q.view(), k.t());
            scores *= scale;
            apply_causal_mask(&mut scores);
            let attn = softmax_rows(&scores);
            let ctx = matmul(attn.view(), v.view());
            let x_mid = &x_in + &matmul(ctx.view(), blk.wo.view());
            let (ln2, ln2_xhat, ln2_istd) = ln_forward(&x_mid, &blk.ln2_g, &blk.ln2_b);
            let h = matmul(ln2.view(), blk.w1.view()) + &blk.b1;
            let g = h.mapv(gelu);
            let m = matmul(g.view(), blk.w2.view()) + &blk.b2;
            x = &x_mid + &m;
            layers.push(FullLayerCache {
                ln1,
                ln1_xhat,
                ln1_istd,
                q,
                k,
                v,
                attn,
                ctx,
                ln2,
                ln2_xhat,
                ln2_istd,
                h,
                g,
            });
        }
        let (y, lnf_xhat, lnf_istd) = ln_forward(&x, &self.lnf_g, &self.lnf_b);
        let logits = matmul(y.view(), self.w_out.view());
        Ok((
            logits,
            FullCache {
                layers,
                lnf_xhat,
                lnf_istd,
                y,
            },
        ))
    }

    fn backward_full(&self, ids: &[u32], dlogits: &Array2<f64>, cache: &FullCache) -> Grads {
        let scale = 1.0 / (self.cfg.dim as f64).sqrt();
        let d_w_out = matmul(cache.y.t(), dlogits.view());
        let dy = matmul(dlogits.view(), self.w_out.t());
        let (d_lnf_g, d_lnf_b) = ln_param_grads(&dy, &cache.lnf_xhat);
        let mut dx = ln_backward(&dy, &self.lnf_g, &cache.lnf_xhat, &cache.lnf_istd);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (blk, lc) in self.blocks.iter().zip(cache.layers.iter()).rev() {
            // mlp branch
            let dm = dx.clone();
            let d_w2 = matmul(lc.g.t(), dm.view());
            let d_b2 = dm.sum_axis(Axis(0));
            let dg = matmul(dm.view(), blk.w2.t());
            let dh = &dg * &lc.h.mapv(gelu_prime);
            let d_w1 = matmul(lc.ln2.t(), dh.view());
            let d_b1 = dh.sum_axis(Axis(0));
            let dln2 = matmul(dh.view(), blk.w1.t());
            let (d_ln2_g, d_ln2_b) = ln_param_grads(&dln2, &lc.ln2_xhat);
            let dx_mid = &dx + &ln_backward(&dln2, &blk.ln2_g, &lc.ln2_xhat, &lc.ln2_istd);

            // attention branch
            let d_wo = matmul(lc.ctx.t(), dx_mid.view());
            let dctx = matmul(dx_mid.view(), blk.wo.t());
            let d_attn = matmul(dctx.view(), lc.v.t());
            let dv = matmul(lc.attn.t(), dctx.view());
            let ds = softmax_rows_backward(&lc.attn, &d_attn);
            let mut dq = matmul(ds.view(), lc.k.view());
            dq *= scale;
            let mut dk = matmul(ds.t(), lc.q.view());
            dk *= scale;
            let d_wq = matmul(lc.ln1.t(), dq.view());
            let d_wk = matmul(lc.ln1.t(), dk.view());
            let d_wv = matmul(lc.ln1.t(), dv.view());
            let dln1 = matmul(dq.view(), blk.wq.t())
                + matmul(dk.view(), blk.wk.t())
                + matmul(dv.view(), blk.wv.t());
            let (d_ln1_g, d_ln1_b) = ln_param_grads(&dln1, &lc.ln1_xhat);
            dx = &dx_mid + &ln_backward(&dln1, &blk.ln1_g, &lc.ln1_xhat, &lc.ln1_istd);

            blocks.push(BlockGrads {
                ln1_g: d_ln1_g,
                ln1_b: d_ln1_b,
                wq: d_wq,
                wk: d_wk,
                wv: d_wv,
                wo: d_wo,
                ln2_g: d_ln2_g,
                ln2_b: d_ln2_b,
                w1: d_w1,
                b1: d_b1,
                w2: d_w2,
                b2: d_b2,
            });
        }
        blocks.reverse();
        let mut emb = Array2::zeros(self.emb.raw_dim());
        let mut pos = Array2::zeros(self.pos.raw_dim());
        for (p, &id) in ids.iter().enumerate() {
            let drow = dx.row(p);
            let mut erow = emb.row_mut(id as usize);
            erow += &drow;
            let mut prow = pos.row_mut(p);
            prow += &drow;
        }
        Grads {
            emb,
            pos,
            blocks,
            lnf_g: d_lnf_g,
            lnf_b: d_lnf_b,
            w_out: d_w_out,
        }
    }

    fn apply_grads(&mut self, g: &Grads, lr: f64) {
        self.emb.scaled_add(-lr, &g.emb);
        self.pos.scaled_add(-lr, &g.pos);
        for (blk, bg) in self.blocks.iter_mut().zip(&g.blocks) {
            blk.ln1_g.scaled_add(-lr, &bg.ln1_g);
            blk.ln1_b.scaled_add(-lr, &bg.ln1_b);
            blk.wq.scaled_add(-lr, &bg.wq);
            blk.wk.scaled_add(-lr, &bg.wk);
            blk.wv.scaled_add(-lr, &bg.wv);
            blk.wo.scaled_add(-lr, &bg.wo);
            blk.ln2_g.scaled_add(-lr, &bg.ln2_g);
            blk.ln2_b.scaled_add(-lr, &bg.ln2_b);
            blk.w1.scaled_add(-lr, &bg.w1);
            blk.b1.scaled_add(-lr, &bg.b1);
            blk.w2.scaled_add(-lr, &bg.w2);
            blk.b2.scaled_add(-lr, &bg.b2);
        }
        self.lnf_g.scaled_add(-lr, &g.lnf_g);
        self.lnf_b.scaled_add(-lr, &g.lnf_b);
        self.w_out.scaled_add(-lr, &g.w_out);
    }

    /// Backprop `dlogits` to the input embeddings (T×d).
    fn backward_to_inputs(&self, dlogits: &Array2<f64>, cache: &Cache) -> Array2<f64> {
        let scale = 1.0 / (self.cfg.dim as f64).sqrt();
        let dy = matmul(dlogits.view(), self.w_out.t());
        let mut dx = ln_backward(&dy, &self.lnf_g, &cache.lnf_xhat, &cache.lnf_istd);
        for (blk, lc) in self.blocks.iter().zip(cache.layers.iter()).rev() {
            // mlp branch
            let dm = dx.clone();
            let dg = matmul(dm.view(), blk.w2.t());
            let dh = &dg * &lc.h.mapv(gelu_prime);
            let dln2 = matmul(dh.view(), blk.w1.t());
            let dx_mid_ln = ln_backward(&dln2, &blk.ln2_g, &lc.ln2_xhat, &lc.ln2_istd);
            let dx_mid = &dx + &dx_mid_ln;

            // attention branch
            let dctx = matmul(dx_mid.view(), blk.wo.t());
            let d_attn = matmul(dctx.view(), lc.v.t());
            let dv = matmul(lc.attn.t(), dctx.view());
            let ds = softmax_rows_backward(&lc.attn, &d_attn);
            let mut dq = matmul(ds.view(), lc.k.view());
            dq *= scale;
            let mut dk = matmul(ds.t(), lc.q.view());
            dk *= scale;
            let dln1 = matmul(dq.view(), blk.wq.t())
                + matmul(dk.view(), blk.wk.t())
                + matmul(dv.view(), blk.wv.t());
            let dx_in_ln = ln_backward(&dln1, &blk.ln1_g, &lc.ln1_xhat, &lc.ln1_istd);
            dx = &dx_mid + &dx_in_ln;
        }
        dx
    }
}

fn ln_forward(
    x: &Array2<f64>,
    g: &Array1<f64>,
    b: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut xhat = x.clone();
    for (mut row, &m) in xhat.outer_iter_mut().zip(mean.iter()) {
        row -= m;
    }
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let istd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, &s) in xhat.outer_iter_mut().zip(istd.iter()) {
        row *= s;
    }
    let mut y = xhat.clone();
    for mut row in y.outer_iter_mut() {
        row *= &g.view();
        row += &b.view();
    }
    (y, xhat, istd)
}

fn ln_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dxhat = dy.clone();
    for mut row in dxhat.outer_iter_mut() {
        row *= &g.view();
    }
    let m1 = dxhat.sum_axis(Axis(1)) / d;
    let m2 = (&dxhat * xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat;
    for (i, mut row) in dx.outer_iter_mut().enumerate() {
        let xr = xhat.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - m1[i] - xr[j] * m2[i]) * istd[i];
        }
    }
    dx
}

fn ln_param_grads(dy: &Array2<f64>, xhat: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    ((dy * xhat).sum_axis(Axis(0)), dy.sum_axis(Axis(0)))
}

fn apply_causal_mask(scores: &mut Array2<f64>) {
    let t = scores.nrows();
    for i in 0..t {
        for j in (i + 1)..t {
            scores[[i, j]] = f64::NEG_INFINITY;
        }
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.outer_iter_mut() {
        let probs = softmax(row.as_slice().expect("contiguous"));
        for (v, p) in row.iter_mut().zip(probs) {
            *v = p;
        }
    }
    out
}

fn softmax_rows_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let inner = (probs * dprobs).sum_axis(Axis(1));
    let mut ds = dprobs.clone();
    for (i, mut row) in ds.outer_iter_mut().enumerate() {
        let pr = probs.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = pr[j] * (*v - inner[i]);
        }
    }
    ds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl LanguageModel for TinyLm {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn base_vocab_size(&self) -> usize {
        self.base_vocab
    }

    fn context_length(&self) -> usize {
        self.cfg.context_length
    }

    fn eos_id(&self) -> u32 {
        self.tokenizer.eos_id()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(TokenSequence {
            ids: self.tokenizer.encode(text),
            text: text.to_string(),
        })
    }

    fn decode(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }

    fn extend_vocab(
        &mut self,
        token_string: &str,
        init: EmbeddingInit,
    ) -> Result<ConceptTokenHandle> {
        if self.tokenizer.contains(token_string) {
            return Err(Error::TokenExists(token_string.to_string()));
        }
        let row = match init {
            EmbeddingInit::MeanOfEmbeddings => self
                .emb
                .slice(ndarray::s![..self.base_vocab, ..])
                .mean_axis(Axis(0))
                .expect("non-empty embedding matrix"),
            EmbeddingInit::Gaussian { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                randn(&mut rng, (1, self.cfg.dim), sigma).row(0).to_owned()
            }
            EmbeddingInit::CopyOf(other) => {
                let id = self
                    .tokenizer
                    .id_of(&other)
                    .ok_or_else(|| Error::Backend(format!("no token {other:?} to copy from")))?;
                self.emb.row(id as usize).to_owned()
            }
        };
        let token_id = self.tokenizer.add_special(token_string)?;
        debug_assert_eq!(token_id as usize, self.emb.nrows());
        self.emb.push_row(row.view()).expect("row push");
        self.concept_ids.push(token_id);
        // the contract: the marker round-trips to exactly one id
        debug_assert_eq!(self.tokenizer.encode(token_string), vec![token_id]);
        Ok(ConceptTokenHandle {
            token_id,
            token_string: token_string.to_string(),
            embedding_dim: self.cfg.dim,
        })
    }

    fn embedding_row(&self, token_id: u32) -> Result<Vec<f64>> {
        if (token_id as usize) >= self.emb.nrows() {
            return Err(Error::Backend(format!("token id {token_id} out of range")));
        }
        Ok(self.emb.row(token_id as usize).to_vec())
    }

    fn set_embedding_row(&mut self, token_id: u32, row: &[f64]) -> Result<()> {
        if row.len() != self.cfg.dim {
            return Err(Error::DimMismatch {
                artifact: row.len(),
                model: self.cfg.dim,
            });
        }
        if (token_id as usize) >= self.emb.nrows() {
            return Err(Error::Backend(format!("token id {token_id} out of range")));
        }
        for (j, &v) in row.iter().enumerate() {
            self.emb[[token_id as usize, j]] = v;
        }
        Ok(())
    }

    fn loss_and_grad(
        &mut self,
        seq: &TokenSequence,
        handle: &ConceptTokenHandle,
    ) -> Result<(f64, Vec<f64>)> {
        if !seq.ids.contains(&handle.token_id) {
            return Err(Error::Backend(
                "sequence contains no concept-token occurrence".into(),
            ));
        }
        let (logits, cache) = self.forward(&seq.ids)?;
        let (loss, dlogits) = shifted_cross_entropy(logits.view(), &seq.ids, self.eos_id())?;
        let dx = self.backward_to_inputs(&dlogits, &cache);
        let mut grad = vec![0.0; self.cfg.dim];
        for (p, &id) in seq.ids.iter().enumerate() {
            if id == handle.token_id {
                for j in 0..self.cfg.dim {
                    grad[j] += dx[[p, j]];
                }
            }
        }
        Ok((loss, grad))
    }

    fn greedy_generate(&mut self, prompt: &TokenSequence, max_new: usize) -> Result<TokenSequence> {
        self.check_context(prompt.ids.len() + max_new)?;
        let mut ids = prompt.ids.clone();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&ids)?;
            let last = logits.row(logits.nrows() - 1);
            let next = crate::testing::argmax(last.as_slice().expect("contiguous")) as u32;
            if next == self.eos_id() {
                break;
            }
            ids.push(next);
            generated.push(next);
        }
        let text = self.decode(&generated);
        Ok(TokenSequence {
            ids: generated,
            text,
        })
    }

    fn next_token_distribution(
        &mut self,
        prompt: &TokenSequence,
        top_k: usize,
    ) -> Result<Vec<(String, f64)>> {
        if top_k == 0 {
            return Err(Error::Backend("top_k must be positive".into()));
        }
        if prompt.ids.is_empty() {
            return Err(Error::Backend("empty prompt".into()));
        }
        let (logits, _) = self.forward(&prompt.ids)?;
        let last = logits.row(logits.nrows() - 1);
        let probs = softmax(last.as_slice().expect("contiguous"));
        let mut ranked: Vec<(u32, f64)> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as u32, p))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        Ok(ranked
            .into_iter()
            .map(|(id, p)| (self.tokenizer.token(id).to_string(), p))
            .collect())
    }

    fn render_chat(&self, system: &str, user: &str) -> Result<TokenSequence> {
        let text = format!(
            "{SYSTEM_MARK}\n{system}\n{USER_MARK}\n{user}\n{ASSISTANT_MARK}\n"
        );
        self.tokenize(&text)
    }

    fn render_completion(&self, prefix: &str) -> Result<TokenSequence> {
        self.tokenize(prefix)
    }

    fn frozen_checksum(&self, exclude: &[u32]) -> String {
        let mut h = Sha256::new();
        let mut feed = |arr: &[f64]| {
            for v in arr {
                h.update(v.to_le_bytes());
            }
        };
        feed(self.pos.as_slice().expect("contiguous"));
        for blk in &self.blocks {
            for a in [&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1, &blk.w2] {
                feed(a.as_slice().expect("contiguous"));
            }
            for a in [
                &blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b, &blk.b1, &blk.b2,
            ] {
                feed(a.as_slice().expect("contiguous"));
            }
        }
        feed(self.lnf_g.as_slice().expect("contiguous"));
        feed(self.lnf_b.as_slice().expect("contiguous"));
        feed(self.w_out.as_slice().expect("contiguous"));
        for (i, row) in self.emb.outer_iter().enumerate() {
            if exclude.contains(&(i as u32)) {
                continue;
            }
            for v in row.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_model() -> (TinyLm, ConceptTokenHandle) {
        let cfg = TinyLmConfig {
            model_id: "tiny-test".into(),
            dim: 16,
            layers: 2,
            context_length: 64,
            seed: 42,
            ff_mult: 4,
        };
        let mut lm = TinyLm::from_texts(cfg, &["the tower is tall and made of iron near the river"]);
        let handle = lm
            .extend_vocab("<CT:test>", EmbeddingInit::MeanOfEmbeddings)
            .unwrap();
        (lm, handle)
    }

    #[test]
    fn mean_init_matches_column_means() {
        let (lm, handle) = small_model();
        let row = lm.embedding_row(handle.token_id).unwrap();
        let mean = lm
            .emb
            .slice(ndarray::s![..lm.base_vocab, ..])
            .mean_axis(Axis(0))
            .unwrap();
        for (a, b) in row.iter().zip(mean.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn gaussian_init_is_seed_deterministic() {
        let (mut a, _) = small_model();
        let (mut b, _) = small_model();
        let ha = a
            .extend_vocab("<CT:g>", EmbeddingInit::Gaussian { sigma: 0.02, seed: 7 })
            .unwrap();
        let hb = b
            .extend_vocab("<CT:g>", EmbeddingInit::Gaussian { sigma: 0.02, seed: 7 })
            .unwrap();
        assert_eq!(
            a.embedding_row(ha.token_id).unwrap(),
            b.embedding_row(hb.token_id).unwrap()
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut lm, handle) = small_model();
        let seq = lm
            .tokenize(&format!("{} is tall and {} is made of iron", handle.token_string, handle.token_string))
            .unwrap();
        let (_, grad) = lm.loss_and_grad(&seq, &handle).unwrap();
        let base = lm.embedding_row(handle.token_id).unwrap();
        let eps = 1e-3;
        for j in 0..handle.embedding_dim {
            let mut plus = base.clone();
            plus[j] += eps;
            lm.set_embedding_row(handle.token_id, &plus).unwrap();
            let (lp, _) = lm.loss_and_grad(&seq, &handle).unwrap();
            let mut minus = base.clone();
            minus[j] -= eps;
            lm.set_embedding_row(handle.token_id, &minus).unwrap();
            let (lm_, _) = lm.loss_and_grad(&seq, &handle).unwrap();
            lm.set_embedding_row(handle.token_id, &base).unwrap();
            let fd = (lp - lm_) / (2.0 * eps);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-2, epsilon = 1e-8);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_respects_max_new() {
        let (mut lm, _) = small_model();
        let prompt = lm.tokenize("the tower is").unwrap();
        let a = lm.greedy_generate(&prompt, 8).unwrap();
        let b = lm.greedy_generate(&prompt, 8).unwrap();
        assert_eq!(a, b);
        let empty = lm.greedy_generate(&prompt, 0).unwrap();
        assert!(empty.ids.is_empty());
        assert!(empty.text.is_empty());
    }

    #[test]
    fn distribution_sums_to_one() {
        let (mut lm, _) = small_model();
        let prompt = lm.tokenize("the tower").unwrap();
        let dist = lm
            .next_token_distribution(&prompt, lm.base_vocab_size())
            .unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-5);
        for w in dist.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn checksum_excluding_concept_row_survives_row_updates() {
        let (mut lm, handle) = small_model();
        let before = lm.frozen_checksum(&[handle.token_id]);
        let seq = lm
            .tokenize(&format!("{} is tall", handle.token_string))
            .unwrap();
        for _ in 0..3 {
            let (_, grad) = lm.loss_and_grad(&seq, &handle).unwrap();
            let mut row = lm.embedding_row(handle.token_id).unwrap();
            for (r, g) in row.iter_mut().zip(&grad) {
                *r -= 0.01 * g;
            }
            lm.set_embedding_row(handle.token_id, &row).unwrap();
        }
        assert_eq!(before, lm.frozen_checksum(&[handle.token_id]));
        // the full checksum does change
        assert_ne!(before, lm.frozen_checksum(&[]));
    }

    #[test]
    fn chat_render_encodes_marker_once_and_completion_has_no_wrapping() {
        let (lm, handle) = small_model();
        let chat = lm
            .render_chat(&format!("Do not generate {}.", handle.token_string), "hello")
            .unwrap();
        let count = chat
            .ids
            .iter()
            .filter(|&&i| i == handle.token_id)
            .count();
        assert_eq!(count, 1);
        let comp = lm.render_completion("the tower is").unwrap();
        assert_eq!(comp.ids, lm.tokenizer.encode("the tower is"));
    }

    #[test]
    fn context_overflow_is_reported() {
        let (mut lm, _) = small_model();
        let prompt = lm.tokenize(&"tower ".repeat(60)).unwrap();
        assert!(matches!(
            lm.greedy_generate(&prompt, 10),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn pretrain_reduces_loss_monotonically_at_the_ends() {
        let cfg = TinyLmConfig {
            model_id: "tiny-test".into(),
            dim: 16,
            layers: 2,
            context_length: 64,
            seed: 42,
            ff_mult: 4,
        };
        let texts = [
            "the tower is tall and made of iron",
            "the river runs past the tall tower",
        ];
        let mut lm = TinyLm::from_texts(cfg, &texts);
        let trace = lm.pretrain(&texts, 30, 0.05).unwrap();
        assert_eq!(trace.len(), 30);
        assert!(trace.last().unwrap() < &trace[0]);
        assert!(trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn pretrain_after_vocab_extension_is_rejected() {
        let (mut lm, _) = small_model();
        assert!(lm.pretrain(&["the tower"], 1, 0.05).is_err());
    }
}
