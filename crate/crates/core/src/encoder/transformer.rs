//! Post-norm Transformer encoder with hand-written reverse mode.
//!
//! Each example is processed over its unmasked positions only. Masked keys
//! would get a -inf score and zero attention weight, and masked query rows
//! never feed back into unmasked ones, so dropping them is exact and makes
//! the mask-invariance property hold by construction.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ops::{self, LayerNormCache};
use super::params::{EncoderConfig, EncoderParams, LayerParams, Pooling};
use super::{Mode, TextEncoder};
use crate::error::{Error, Result};
use crate::par;
use crate::params::ParamTree;
use crate::seed;
use crate::tokenization::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    params: EncoderParams,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    attn_norm: LayerNormCache,
    h: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ffn_norm: LayerNormCache,
}

#[derive(Debug, Clone)]
struct ExampleCache {
    positions: Vec<usize>,
    ids: Vec<u32>,
    embed_norm: LayerNormCache,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

/// Activations saved by [`TransformerEncoder::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    examples: Vec<ExampleCache>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Per-example gradients; embedding gradients stay as row deltas until reduction.
struct ExampleGrads {
    positions: Vec<usize>,
    ids: Vec<u32>,
    dembed: Array2<f64>,
    dnorm_gain: Array1<f64>,
    dnorm_bias: Array1<f64>,
    layers: Vec<LayerParams>,
}

fn apply_dropout(x: &mut Array2<f64>, rate: f64, rng: Option<&mut seed::Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let mask = ops::dropout_mask(x.dim(), rate, rng);
    *x *= &mask;
    Some(mask)
}

impl TransformerEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(TransformerEncoder { config, params })
    }

    /// Wraps existing parameters, checking every shape against `config`.
    pub fn from_params(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let expected = EncoderParams::zeros(&config);
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", want.len(), got.len())));
        }
        for (w, g) in want.iter().zip(&got) {
            if w.shape != g.shape {
                return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", w.name, w.shape, g.shape)));
            }
        }
        Ok(TransformerEncoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.size() == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch.seq_len() > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "batch sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&id) = batch.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    fn forward_example(&self, batch: &Batch, row: usize, mode: Mode) -> (Array1<f64>, ExampleCache) {
        let p = &self.params;
        let cfg = &self.config;
        let rate = cfg.dropout_rate;
        let mut rng = match mode {
            Mode::Train { seed } => Some(seed::rng(seed, &[row as u64])),
            Mode::Eval => None,
        };
        let tokens = batch.real_tokens(row);
        let n = tokens.len();
        let d = cfg.embed_dim;
        let mut e = Array2::zeros((n, d));
        for (i, &(pos, id)) in tokens.iter().enumerate() {
            let mut r = e.row_mut(i);
            r += &p.token_embedding.row(id as usize);
            r += &p.position_embedding.row(pos);
        }
        let (mut x, embed_norm) = ops::layer_norm(e.view(), &p.embed_norm.gain, &p.embed_norm.bias);
        let embed_drop = apply_dropout(&mut x, rate, rng.as_mut());

        let mut layers = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let (out, cache) = self.layer_forward(lp, x, rate, rng.as_mut());
            layers.push(cache);
            x = out;
        }
        let pooled = match cfg.pooling {
            Pooling::Cls => x.row(0).to_owned(),
            Pooling::Mean => x.mean_axis(Axis(0)).expect("at least the CLS row"),
        };
        let cache = ExampleCache {
            positions: tokens.iter().map(|t| t.0).collect(),
            ids: tokens.iter().map(|t| t.1).collect(),
            embed_norm,
            embed_drop,
            layers,
        };
        (pooled, cache)
    }

    fn layer_forward(
        &self,
        lp: &LayerParams,
        x: Array2<f64>,
        rate: f64,
        mut rng: Option<&mut seed::Rng>,
    ) -> (Array2<f64>, LayerCache) {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x.dot(&lp.wq) + &lp.bq;
        let k = x.dot(&lp.wk);
        let v = x.dot(&lp.wv) + &lp.bv;
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            ops::softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut a = ctx.dot(&lp.wo) + &lp.bo;
        let attn_drop = apply_dropout(&mut a, rate, rng.as_deref_mut());
        let (h, attn_norm) = ops::layer_norm((&x + &a).view(), &lp.attn_norm.gain, &lp.attn_norm.bias);

        let pre = h.dot(&lp.w1) + &lp.b1;
        let act = pre.mapv(ops::gelu);
        let mut o = act.dot(&lp.w2) + &lp.b2;
        let ffn_drop = apply_dropout(&mut o, rate, rng);
        let (out, ffn_norm) = ops::layer_norm((&h + &o).view(), &lp.ffn_norm.gain, &lp.ffn_norm.bias);
        let cache = LayerCache { x, q, k, v, probs, ctx, attn_drop, attn_norm, h, pre, act, ffn_drop, ffn_norm };
        (out, cache)
    }

    /// Returns the layer gradients and the gradient w.r.t. the layer input.
    fn layer_backward(&self, lp: &LayerParams, c: &LayerCache, dy: ArrayView2<f64>) -> (LayerParams, Array2<f64>) {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (dz2, dffn_gain, dffn_bias) = ops::layer_norm_backward(dy, &lp.ffn_norm.gain, &c.ffn_norm);
        let mut dh_ = dz2.clone();
        let mut do_ = dz2;
        if let Some(m) = &c.ffn_drop {
            do_ *= m;
        }
        let dw2 = c.act.t().dot(&do_);
        let db2 = do_.sum_axis(Axis(0));
        let mut dpre = do_.dot(&lp.w2.t());
        ndarray::Zip::from(&mut dpre).and(&c.pre).for_each(|g, &x| *g *= ops::gelu_grad(x));
        let dw1 = c.h.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        dh_ += &dpre.dot(&lp.w1.t());

        let (dz1, dattn_gain, dattn_bias) = ops::layer_norm_backward(dh_.view(), &lp.attn_norm.gain, &c.attn_norm);
        let mut dx = dz1.clone();
        let mut da = dz1;
        if let Some(m) = &c.attn_drop {
            da *= m;
        }
        let dwo = c.ctx.t().dot(&da);
        let dbo = da.sum_axis(Axis(0));
        let dctx = da.dot(&lp.wo.t());

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate().take(heads) {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let ds = ops::softmax_rows_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let xt = c.x.t();
        let grads = LayerParams {
            wq: xt.dot(&dq),
            bq: dq.sum_axis(Axis(0)),
            wk: xt.dot(&dk),
            wv: xt.dot(&dv),
            bv: dv.sum_axis(Axis(0)),
            wo: dwo,
            bo: dbo,
            attn_norm: super::params::LayerNormParams { gain: dattn_gain, bias: dattn_bias },
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            ffn_norm: super::params::LayerNormParams { gain: dffn_gain, bias: dffn_bias },
        };
        dx += &dq.dot(&lp.wq.t());
        dx += &dk.dot(&lp.wk.t());
        dx += &dv.dot(&lp.wv.t());
        (grads, dx)
    }

    fn backward_example(&self, c: &ExampleCache, upstream: ndarray::ArrayView1<f64>) -> ExampleGrads {
        let p = &self.params;
        let n = c.ids.len();
        let mut dy = Array2::zeros((n, self.config.embed_dim));
        match self.config.pooling {
            Pooling::Cls => dy.row_mut(0).assign(&upstream),
            Pooling::Mean => {
                let share = &upstream / n as f64;
                for mut r in dy.rows_mut() {
                    r.assign(&share);
                }
            }
        }
        let mut layer_grads = Vec::with_capacity(p.layers.len());
        for (lp, lc) in p.layers.iter().zip(&c.layers).rev() {
            let (g, dx) = self.layer_backward(lp, lc, dy.view());
            layer_grads.push(g);
            dy = dx;
        }
        layer_grads.reverse();
        if let Some(m) = &c.embed_drop {
            dy *= m;
        }
        let (dembed, dnorm_gain, dnorm_bias) = ops::layer_norm_backward(dy.view(), &p.embed_norm.gain, &c.embed_norm);
        ExampleGrads {
            positions: c.positions.clone(),
            ids: c.ids.clone(),
            dembed,
            dnorm_gain,
            dnorm_bias,
            layers: layer_grads,
        }
    }
}

impl TextEncoder for TransformerEncoder {
    type Params = EncoderParams;
    type Cache = ForwardCache;

    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn params(&self) -> &EncoderParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    fn zero_grads(&self) -> EncoderParams {
        EncoderParams::zeros(&self.config)
    }

    fn forward(&self, batch: &Batch, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_batch(batch)?;
        let outs = par::map_range(batch.size(), |i| self.forward_example(batch, i, mode));
        let mut pooled = Array2::zeros((batch.size(), self.config.embed_dim));
        let mut examples = Vec::with_capacity(outs.len());
        for (i, (row, cache)) in outs.into_iter().enumerate() {
            pooled.row_mut(i).assign(&row);
            examples.push(cache);
        }
        Ok((pooled, ForwardCache { examples }))
    }

    fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<EncoderParams> {
        if cache.examples.is_empty() {
            return Err(Error::BackwardWithoutForward);
        }
        if upstream.dim() != (cache.examples.len(), self.config.embed_dim) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                cache.examples.len(),
                self.config.embed_dim
            )));
        }
        let per_example =
            par::map_range(cache.examples.len(), |i| self.backward_example(&cache.examples[i], upstream.row(i)));
        let mut grads = self.zero_grads();
        for g in per_example {
            for (i, (&pos, &id)) in g.positions.iter().zip(&g.ids).enumerate() {
                let row = g.dembed.row(i);
                let mut t = grads.token_embedding.row_mut(id as usize);
                t += &row;
                let mut pe = grads.position_embedding.row_mut(pos);
                pe += &row;
            }
            grads.embed_norm.gain += &g.dnorm_gain;
            grads.embed_norm.bias += &g.dnorm_bias;
            for (acc, lg) in grads.layers.iter_mut().zip(&g.layers) {
                add_layer(acc, lg);
            }
        }
        Ok(grads)
    }
}

fn add_layer(acc: &mut LayerParams, g: &LayerParams) {
    acc.wq += &g.wq;
    acc.bq += &g.bq;
    acc.wk += &g.wk;
    acc.wv += &g.wv;
    acc.bv += &g.bv;
    acc.wo += &g.wo;
    acc.bo += &g.bo;
    acc.attn_norm.gain += &g.attn_norm.gain;
    acc.attn_norm.bias += &g.attn_norm.bias;
    acc.w1 += &g.w1;
    acc.b1 += &g.b1;
    acc.w2 += &g.w2;
    acc.b2 += &g.b2;
    acc.ffn_norm.gain += &g.ffn_norm.gain;
    acc.ffn_norm.bias += &g.ffn_norm.bias;
}
