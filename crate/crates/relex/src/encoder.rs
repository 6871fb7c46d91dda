//! Bidirectional transformer encoder over structured inputs. Forward keeps
//! per-layer caches so the manual backward pass can mirror it exactly; both
//! run in f64 and only touch the non-pad prefix of each sequence. Padded
//! rows of the returned states are exactly zero.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, gelu, gelu_prime, init_normal, layernorm_rows, layernorm_rows_backward,
    softmax_backward, TensorMut, TensorView,
};
use crate::structinput::StructuredInput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    /// Base vocabulary size, before task-specific tokens.
    pub vocab_size: usize,
    /// Task-specific tokens appended to the vocabulary.
    pub added_tokens: usize,
    pub max_positions: usize,
    pub fine_tune_last_k: usize,
}

impl EncoderConfig {
    /// CPU test profile.
    pub fn tiny(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 32,
            ff_dim: 128,
            vocab_size,
            added_tokens: 20,
            max_positions: 64,
            fine_tune_last_k: 2,
        }
    }

    /// 12-layer/768 profile matching the public pretrained distribution.
    pub fn bert_base(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ff_dim: 3072,
            vocab_size,
            added_tokens: 20,
            max_positions: 512,
            fine_tune_last_k: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.fine_tune_last_k > self.num_layers {
            return Err(Error::Config(format!(
                "fine_tune_last_k {} exceeds num_layers {}",
                self.fine_tune_last_k, self.num_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn total_vocab(&self) -> usize {
        self.vocab_size + self.added_tokens
    }

    /// Index of the first fine-tuned layer.
    pub fn first_trainable_layer(&self) -> usize {
        self.num_layers - self.fine_tune_last_k
    }

    /// Embedding tables join the trainable set only under full fine-tuning.
    pub fn embeddings_trainable(&self) -> bool {
        self.fine_tune_last_k == self.num_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, ff: usize) -> LayerParams {
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    /// Rows for the task-specific tokens, id = vocab_size + row.
    pub added_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> EncoderParams {
        let d = config.hidden_dim;
        EncoderParams {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            added_emb: Array2::zeros((config.added_tokens, d)),
            pos_emb: Array2::zeros((config.max_positions, d)),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(d, config.ff_dim)).collect(),
        }
    }

    /// Seeded from-scratch initialization: normal weights, zero biases,
    /// identity layer norms.
    pub fn init(config: &EncoderConfig, seed: u64) -> EncoderParams {
        let mut rng = nn::seeded_rng(seed, "encoder-init");
        let d = config.hidden_dim;
        let ff = config.ff_dim;
        let mut p = Self::zeros(config);
        p.tok_emb = init_normal(&mut rng, config.vocab_size, d, nn::INIT_STD);
        p.added_emb = init_normal(&mut rng, config.added_tokens, d, nn::INIT_STD);
        p.pos_emb = init_normal(&mut rng, config.max_positions, d, nn::INIT_STD);
        for layer in &mut p.layers {
            layer.wq = init_normal(&mut rng, d, d, nn::INIT_STD);
            layer.wk = init_normal(&mut rng, d, d, nn::INIT_STD);
            layer.wv = init_normal(&mut rng, d, d, nn::INIT_STD);
            layer.wo = init_normal(&mut rng, d, d, nn::INIT_STD);
            layer.w1 = init_normal(&mut rng, d, ff, nn::INIT_STD);
            layer.w2 = init_normal(&mut rng, ff, d, nn::INIT_STD);
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        p
    }

    /// Visits every tensor with a stable name; the order is fixed and shared
    /// with [`EncoderParams::for_each_mut`].
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, TensorView<'a>)) {
        f("embeddings.tok".into(), TensorView::D2(&self.tok_emb));
        f("embeddings.added".into(), TensorView::D2(&self.added_emb));
        f("embeddings.pos".into(), TensorView::D2(&self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.attn.q.weight"), TensorView::D2(&l.wq));
            f(format!("layer{i}.attn.q.bias"), TensorView::D1(&l.bq));
            f(format!("layer{i}.attn.k.weight"), TensorView::D2(&l.wk));
            f(format!("layer{i}.attn.k.bias"), TensorView::D1(&l.bk));
            f(format!("layer{i}.attn.v.weight"), TensorView::D2(&l.wv));
            f(format!("layer{i}.attn.v.bias"), TensorView::D1(&l.bv));
            f(format!("layer{i}.attn.out.weight"), TensorView::D2(&l.wo));
            f(format!("layer{i}.attn.out.bias"), TensorView::D1(&l.bo));
            f(format!("layer{i}.ln1.gamma"), TensorView::D1(&l.ln1_g));
            f(format!("layer{i}.ln1.beta"), TensorView::D1(&l.ln1_b));
            f(format!("layer{i}.ff.w1.weight"), TensorView::D2(&l.w1));
            f(format!("layer{i}.ff.w1.bias"), TensorView::D1(&l.b1));
            f(format!("layer{i}.ff.w2.weight"), TensorView::D2(&l.w2));
            f(format!("layer{i}.ff.w2.bias"), TensorView::D1(&l.b2));
            f(format!("layer{i}.ln2.gamma"), TensorView::D1(&l.ln2_g));
            f(format!("layer{i}.ln2.beta"), TensorView::D1(&l.ln2_b));
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, TensorMut<'_>)) {
        f("embeddings.tok".into(), TensorMut::D2(&mut self.tok_emb));
        f("embeddings.added".into(), TensorMut::D2(&mut self.added_emb));
        f("embeddings.pos".into(), TensorMut::D2(&mut self.pos_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layer{i}.attn.q.weight"), TensorMut::D2(&mut l.wq));
            f(format!("layer{i}.attn.q.bias"), TensorMut::D1(&mut l.bq));
            f(format!("layer{i}.attn.k.weight"), TensorMut::D2(&mut l.wk));
            f(format!("layer{i}.attn.k.bias"), TensorMut::D1(&mut l.bk));
            f(format!("layer{i}.attn.v.weight"), TensorMut::D2(&mut l.wv));
            f(format!("layer{i}.attn.v.bias"), TensorMut::D1(&mut l.bv));
            f(format!("layer{i}.attn.out.weight"), TensorMut::D2(&mut l.wo));
            f(format!("layer{i}.attn.out.bias"), TensorMut::D1(&mut l.bo));
            f(format!("layer{i}.ln1.gamma"), TensorMut::D1(&mut l.ln1_g));
            f(format!("layer{i}.ln1.beta"), TensorMut::D1(&mut l.ln1_b));
            f(format!("layer{i}.ff.w1.weight"), TensorMut::D2(&mut l.w1));
            f(format!("layer{i}.ff.w1.bias"), TensorMut::D1(&mut l.b1));
            f(format!("layer{i}.ff.w2.weight"), TensorMut::D2(&mut l.w2));
            f(format!("layer{i}.ff.w2.bias"), TensorMut::D1(&mut l.b2));
            f(format!("layer{i}.ln2.gamma"), TensorMut::D1(&mut l.ln2_g));
            f(format!("layer{i}.ln2.beta"), TensorMut::D1(&mut l.ln2_b));
        }
    }

    fn embedding_row(&self, id: u32) -> Result<ndarray::ArrayView1<'_, f64>> {
        let id = id as usize;
        if id < self.config.vocab_size {
            Ok(self.tok_emb.row(id))
        } else if id < self.config.total_vocab() {
            Ok(self.added_emb.row(id - self.config.vocab_size))
        } else {
            Err(Error::Input(format!(
                "token id {id} out of range for vocabulary of {}",
                self.config.total_vocab()
            )))
        }
    }

    /// h_0: token embedding plus position embedding, over the non-pad prefix.
    pub fn embed(&self, input: &StructuredInput) -> Result<Array2<f64>> {
        let eff = input.effective_len;
        if eff > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence length {eff} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.hidden_dim;
        let mut h0 = Array2::zeros((eff, d));
        for t in 0..eff {
            let tok = self.embedding_row(input.token_ids[t])?;
            let pos = self.pos_emb.row(input.position_ids[t]);
            let mut row = h0.row_mut(t);
            for j in 0..d {
                row[j] = tok[j] + pos[j];
            }
        }
        Ok(h0)
    }
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head, each eff×eff.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    s1: Array2<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    x1: Array2<f64>,
    /// Feed-forward pre-activation, eff×ff.
    h_pre: Array2<f64>,
    s2: Array2<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
}

/// Everything the backward pass needs from one forward call.
pub struct ForwardCache {
    eff: usize,
    ids: Vec<u32>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn effective_len(&self) -> usize {
        self.eff
    }
}

fn add_bias_rows(m: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

fn ensure_finite(m: &Array2<f64>, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: format!("layer{layer}") })
    }
}

/// Runs the stack over the non-pad prefix. Returns h_L padded back to the
/// full sequence length with zero rows, plus the backward cache.
pub fn encode(params: &EncoderParams, input: &StructuredInput) -> Result<(Array2<f64>, ForwardCache)> {
    let cfg = &params.config;
    let eff = input.effective_len;
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = params.embed(input)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { layer: "embeddings".into() });
    }
    let mut layer_caches = Vec::with_capacity(cfg.num_layers);

    for (li, layer) in params.layers.iter().enumerate() {
        let mut q = x.dot(&layer.wq);
        add_bias_rows(&mut q, &layer.bq);
        let mut k = x.dot(&layer.wk);
        add_bias_rows(&mut k, &layer.bk);
        let mut v = x.dot(&layer.wv);
        add_bias_rows(&mut v, &layer.bv);

        let mut ctx = Array2::zeros((eff, d));
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            let mut p = Array2::zeros((eff, eff));
            for t in 0..eff {
                let row = scores.row(t);
                let sm = nn::softmax(row.as_slice().expect("contiguous row"));
                p.row_mut(t).assign(&Array1::from(sm));
            }
            let ctx_h = p.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            probs.push(p);
        }
        let mut attn_out = ctx.dot(&layer.wo);
        add_bias_rows(&mut attn_out, &layer.bo);

        let s1 = &x + &attn_out;
        let (x1, ln1_mean, ln1_rstd) = layernorm_rows(&s1, &layer.ln1_g, &layer.ln1_b, eff);

        let mut h_pre = x1.dot(&layer.w1);
        add_bias_rows(&mut h_pre, &layer.b1);
        let g = h_pre.mapv(gelu);
        let mut ff_out = g.dot(&layer.w2);
        add_bias_rows(&mut ff_out, &layer.b2);

        let s2 = &x1 + &ff_out;
        let (x2, ln2_mean, ln2_rstd) = layernorm_rows(&s2, &layer.ln2_g, &layer.ln2_b, eff);
        ensure_finite(&x2, li)?;

        layer_caches.push(LayerCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            s1,
            ln1_mean,
            ln1_rstd,
            x1: x1.clone(),
            h_pre,
            s2,
            ln2_mean,
            ln2_rstd,
        });
        x = x2;
    }

    let mut padded = Array2::zeros((input.seq_len(), d));
    padded.slice_mut(s![..eff, ..]).assign(&x);
    let cache = ForwardCache {
        eff,
        ids: input.token_ids[..eff].to_vec(),
        positions: input.position_ids[..eff].to_vec(),
        layers: layer_caches,
    };
    Ok((padded, cache))
}

/// Gradient buffers shaped like the parameters.
pub type EncoderGrads = EncoderParams;

/// Backpropagates `d_states` (gradient w.r.t. the padded h_L) through the
/// stack. Parameter gradients are written only for layers at or above
/// `first_trainable_layer` and, for the base embedding tables, only when
/// `train_embeddings` is set; the added-token rows always receive gradients.
/// Rows of `d_states` beyond the non-pad prefix are ignored.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_states: &Array2<f64>,
    grads: &mut EncoderGrads,
    first_trainable_layer: usize,
    train_embeddings: bool,
) {
    let cfg = &params.config;
    let eff = cache.eff;
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut dx = d_states.slice(s![..eff, ..]).to_owned();

    for li in (0..cfg.num_layers).rev() {
        let layer = &params.layers[li];
        let c = &cache.layers[li];
        let train = li >= first_trainable_layer;

        // x2 = LN2(s2)
        let mut dg2 = Array1::zeros(d);
        let mut db2 = Array1::zeros(d);
        let ds2 = layernorm_rows_backward(
            &dx, &c.s2, &layer.ln2_g, &c.ln2_mean, &c.ln2_rstd, eff, &mut dg2, &mut db2,
        );
        // s2 = x1 + gelu(x1·w1 + b1)·w2 + b2
        let g = c.h_pre.mapv(gelu);
        let dgelu_out = &ds2; // gradient at the ff output
        let dg_act = dgelu_out.dot(&layer.w2.t());
        let dh_pre = &dg_act * &c.h_pre.mapv(gelu_prime);
        let mut dx1 = ds2.clone();
        dx1 += &dh_pre.dot(&layer.w1.t());
        if train {
            let gl = &mut grads.layers[li];
            gl.ln2_g += &dg2;
            gl.ln2_b += &db2;
            gl.w2 += &g.t().dot(dgelu_out);
            for row in dgelu_out.rows() {
                gl.b2 += &row;
            }
            gl.w1 += &c.x1.t().dot(&dh_pre);
            for row in dh_pre.rows() {
                gl.b1 += &row;
            }
        }

        // x1 = LN1(s1)
        let mut dg1 = Array1::zeros(d);
        let mut db1 = Array1::zeros(d);
        let ds1 = layernorm_rows_backward(
            &dx1, &c.s1, &layer.ln1_g, &c.ln1_mean, &c.ln1_rstd, eff, &mut dg1, &mut db1,
        );
        // s1 = x + ctx·wo + bo
        let d_attn_out = &ds1;
        let dctx = d_attn_out.dot(&layer.wo.t());
        if train {
            let gl = &mut grads.layers[li];
            gl.ln1_g += &dg1;
            gl.ln1_b += &db1;
            gl.wo += &c.ctx.t().dot(d_attn_out);
            for row in d_attn_out.rows() {
                gl.bo += &row;
            }
        }

        let mut dq = Array2::zeros((eff, d));
        let mut dk = Array2::zeros((eff, d));
        let mut dv = Array2::zeros((eff, d));
        for h in 0..cfg.num_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &c.probs[h];
            let vh = c.v.slice(cols);
            let qh = c.q.slice(cols);
            let kh = c.k.slice(cols);
            let dctx_h = dctx.slice(cols);

            let dp = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));

            let mut dscores = Array2::zeros((eff, eff));
            for t in 0..eff {
                let drow = softmax_backward(
                    p.row(t).as_slice().expect("contiguous"),
                    dp.row(t).as_slice().expect("contiguous"),
                );
                dscores.row_mut(t).assign(&Array1::from(drow));
            }
            dscores *= scale;
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }

        let mut dx_next = ds1.clone();
        dx_next += &dq.dot(&layer.wq.t());
        dx_next += &dk.dot(&layer.wk.t());
        dx_next += &dv.dot(&layer.wv.t());
        if train {
            let gl = &mut grads.layers[li];
            gl.wq += &c.x.t().dot(&dq);
            gl.wk += &c.x.t().dot(&dk);
            gl.wv += &c.x.t().dot(&dv);
            for t in 0..eff {
                gl.bq += &dq.row(t);
                gl.bk += &dk.row(t);
                gl.bv += &dv.row(t);
            }
        }
        dx = dx_next;
    }

    // dx is now the gradient at h_0
    let vocab = cfg.vocab_size;
    for t in 0..eff {
        let id = cache.ids[t] as usize;
        if id >= vocab {
            let mut row = grads.added_emb.row_mut(id - vocab);
            row += &dx.row(t);
        } else if train_embeddings {
            let mut row = grads.tok_emb.row_mut(id);
            row += &dx.row(t);
        }
        if train_embeddings {
            let mut row = grads.pos_emb.row_mut(cache.positions[t]);
            row += &dx.row(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_input(ids: &[u32], max: usize) -> StructuredInput {
        let eff = ids.len();
        let mut token_ids = ids.to_vec();
        token_ids.resize(max, 0);
        StructuredInput {
            token_ids,
            position_ids: (0..max).collect(),
            head_mask: {
                let mut m = vec![0.0; max];
                m[1] = 1.0;
                m
            },
            tail_mask: {
                let mut m = vec![0.0; max];
                m[2.min(eff - 1)] = 1.0;
                m
            },
            stp_region: 1..eff.saturating_sub(1),
            padding_mask: (0..max).map(|t| t < eff).collect(),
            effective_len: eff,
        }
    }

    fn micro_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            vocab_size: 10,
            added_tokens: 3,
            max_positions: 8,
            fine_tune_last_k: 2,
        }
    }

    #[test]
    fn embed_is_additive() {
        let cfg = micro_config();
        let mut p = EncoderParams::zeros(&cfg);
        p.pos_emb = init_normal(&mut nn::seeded_rng(1, "t"), cfg.max_positions, 8, 1.0);
        let input = toy_input(&[3, 4, 5], 8);
        // zero token table: rows equal position embeddings
        let h0 = p.embed(&input).unwrap();
        for t in 0..3 {
            assert_eq!(h0.row(t), p.pos_emb.row(t));
        }
    }

    #[test]
    fn embed_hand_arithmetic() {
        let mut cfg = micro_config();
        cfg.hidden_dim = 2;
        cfg.ff_dim = 4;
        cfg.vocab_size = 2;
        cfg.added_tokens = 1;
        let mut p = EncoderParams::zeros(&cfg);
        p.tok_emb = array![[1.0, 2.0], [3.0, 4.0]];
        p.pos_emb.row_mut(0).assign(&array![10.0, 20.0]);
        p.pos_emb.row_mut(1).assign(&array![30.0, 40.0]);
        let input = toy_input(&[0, 1], 4);
        let h0 = p.embed(&input).unwrap();
        assert_eq!(h0, array![[11.0, 22.0], [33.0, 44.0]]);
    }

    #[test]
    fn embed_uses_added_rows_past_base_vocab() {
        let cfg = micro_config();
        let mut p = EncoderParams::zeros(&cfg);
        p.added_emb.row_mut(0).fill(7.0);
        let input = toy_input(&[10, 0], 8); // id 10 = first added row
        let h0 = p.embed(&input).unwrap();
        assert!(h0.row(0).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let cfg = micro_config();
        let p = EncoderParams::zeros(&cfg);
        let input = toy_input(&[13, 0], 8); // total vocab is 13
        assert!(p.embed(&input).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_pads_are_zero() {
        let cfg = micro_config();
        let p = EncoderParams::init(&cfg, 7);
        let input = toy_input(&[1, 2, 3, 4], 8);
        let (a, _) = encode(&p, &input).unwrap();
        let (b, _) = encode(&p, &input).unwrap();
        assert_eq!(a, b);
        for t in 4..8 {
            assert!(a.row(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pad_ids_do_not_affect_states() {
        let cfg = micro_config();
        let p = EncoderParams::init(&cfg, 7);
        let mut input = toy_input(&[1, 2, 3], 8);
        let (a, _) = encode(&p, &input).unwrap();
        input.token_ids[5] = 9; // pad position content is irrelevant
        input.token_ids[6] = 2;
        let (b, _) = encode(&p, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let cfg = micro_config();
        let mut p = EncoderParams::init(&cfg, 7);
        p.layers[1].w2[[0, 0]] = f64::INFINITY;
        let input = toy_input(&[1, 2, 3], 8);
        let err = encode(&p, &input).map(|_| ()).unwrap_err();
        match err {
            Error::NonFinite { layer } => assert_eq!(layer, "layer1"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn visitor_names_are_stable_and_aligned() {
        let cfg = micro_config();
        let mut p = EncoderParams::init(&cfg, 7);
        let mut names = Vec::new();
        p.for_each(&mut |n, _| names.push(n));
        assert_eq!(names[0], "embeddings.tok");
        assert!(names.contains(&"layer1.ff.w2.weight".to_string()));
        assert_eq!(names.len(), 3 + 2 * 16);
        let mut mut_names = Vec::new();
        p.for_each_mut(&mut |n, _| mut_names.push(n));
        assert_eq!(names, mut_names);
    }

    // central finite differences over every parameter of a micro encoder
    #[test]
    fn backward_matches_finite_differences() {
        let mut cfg = micro_config();
        cfg.num_layers = 2;
        cfg.hidden_dim = 6;
        cfg.num_heads = 2;
        cfg.ff_dim = 10;
        cfg.vocab_size = 6;
        cfg.added_tokens = 2;
        cfg.max_positions = 5;
        cfg.fine_tune_last_k = 2;
        let params = EncoderParams::init(&cfg, 11);
        let input = toy_input(&[1, 6, 3, 2], 5); // includes an added-token id
        let probe = init_normal(&mut nn::seeded_rng(5, "probe"), 5, 6, 1.0);

        let loss = |p: &EncoderParams| -> f64 {
            let (h, _) = encode(p, &input).unwrap();
            (&h * &probe).sum()
        };

        let (h, cache) = encode(&params, &input).unwrap();
        assert_eq!(h.nrows(), 5);
        let mut grads = EncoderParams::zeros(&cfg);
        encode_backward(&params, &cache, &probe, &mut grads, 0, true);

        // large enough that f64 cancellation noise sits well below the
        // tolerance; the kernels are smooth, so truncation stays negligible
        let h_step = 1e-4;
        let mut checked = 0usize;
        let mut grad_flat: Vec<(String, Vec<f64>)> = Vec::new();
        grads.for_each(&mut |n, t| grad_flat.push((n, t.as_slice().to_vec())));
        for (name, gvec) in &grad_flat {
            for idx in 0..gvec.len() {
                // probe a deterministic subset of larger tensors to keep runtime sane
                if gvec.len() > 40 && idx % 7 != 0 {
                    continue;
                }
                let mut perturbed = params.clone();
                let apply = |p: &mut EncoderParams, delta: f64| {
                    p.for_each_mut(&mut |n, mut t| {
                        if &n == name {
                            t.as_slice_mut()[idx] += delta;
                        }
                    });
                };
                apply(&mut perturbed, h_step);
                let up = loss(&perturbed);
                apply(&mut perturbed, -2.0 * h_step);
                let down = loss(&perturbed);
                let fd = (up - down) / (2.0 * h_step);
                let got = gvec[idx];
                // the floor keeps FD cancellation noise on near-zero
                // components from registering as relative error
                let denom = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    (fd - got).abs() / denom < 1e-4,
                    "{name}[{idx}]: backprop {got} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 200, "only {checked} parameters checked");
    }

    #[test]
    fn frozen_layers_get_zero_gradients() {
        let cfg = micro_config(); // 2 layers
        let params = EncoderParams::init(&cfg, 3);
        let input = toy_input(&[1, 2, 3], 8);
        let (h, cache) = encode(&params, &input).unwrap();
        let probe = Array2::ones(h.raw_dim());
        let mut grads = EncoderParams::zeros(&cfg);
        // only the last layer trainable, embeddings frozen
        encode_backward(&params, &cache, &probe, &mut grads, 1, false);
        let mut layer0_zero = true;
        let mut layer1_nonzero = false;
        grads.for_each(&mut |n, t| {
            let all_zero = t.as_slice().iter().all(|&v| v == 0.0);
            if n.starts_with("layer0.") {
                layer0_zero &= all_zero;
            }
            if n.starts_with("layer1.") {
                layer1_nonzero |= !all_zero;
            }
            if n == "embeddings.tok" || n == "embeddings.pos" {
                assert!(all_zero, "{n} should be frozen");
            }
        });
        assert!(layer0_zero);
        assert!(layer1_nonzero);
    }

    #[test]
    fn added_rows_get_gradients_even_with_frozen_embeddings() {
        let cfg = micro_config();
        let params = EncoderParams::init(&cfg, 3);
        let input = toy_input(&[10, 2, 3], 8); // id 10 = added row 0
        let (h, cache) = encode(&params, &input).unwrap();
        let probe = Array2::ones(h.raw_dim());
        let mut grads = EncoderParams::zeros(&cfg);
        encode_backward(&params, &cache, &probe, &mut grads, 0, false);
        assert!(grads.added_emb.row(0).iter().any(|&v| v != 0.0));
        assert!(grads.added_emb.row(1).iter().all(|&v| v == 0.0));
        assert!(grads.tok_emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro_config();
        cfg.num_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.fine_tune_last_k = 5;
        assert!(cfg.validate().is_err());
        assert!(micro_config().validate().is_ok());
        assert!(EncoderConfig::tiny(100).validate().is_ok());
        assert!(EncoderConfig::bert_base(28996).validate().is_ok());
    }
}
