use ndarray::{Array1, Array2};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{mat, mat_mut, vec1, vec_mut, ParamTree, TensorRef};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}` (expected cls or mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub pooling: Pooling,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: d=64, two layers, four heads, ffn 128, length 128.
    pub fn desk_scale(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            vocab_size,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: crate::tokenization::DEFAULT_MAX_SEQ_LEN,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("embed_dim {} is not divisible by num_heads {}", self.embed_dim, self.num_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.embed_dim, self.ffn_dim, self.max_seq_len);
        let per_layer = 4 * d * d + 3 * d + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        v * d + l * d + 2 * d + self.num_layers * per_layer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        LayerNormParams { gain: Array1::zeros(d), bias: Array1::zeros(d) }
    }
}

/// One post-norm Transformer block. Weights are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    /// No key bias: it adds the same amount to every score in a softmax row.
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub attn_norm: LayerNormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ffn_norm: LayerNormParams,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            attn_norm: LayerNormParams::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ffn_norm: LayerNormParams::zeros(d),
        }
    }

    fn init(d: usize, f: usize, rng: &mut Rng) -> Self {
        LayerParams {
            wq: xavier(d, d, rng),
            bq: Array1::zeros(d),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            bv: Array1::zeros(d),
            wo: xavier(d, d, rng),
            bo: Array1::zeros(d),
            attn_norm: LayerNormParams::new(d),
            w1: xavier(d, f, rng),
            b1: Array1::zeros(f),
            w2: xavier(f, d, rng),
            b2: Array1::zeros(d),
            ffn_norm: LayerNormParams::new(d),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        let p = |n: &str| format!("{prefix}.{n}");
        out.extend([
            mat(p("attn.wq"), &self.wq),
            vec1(p("attn.bq"), &self.bq),
            mat(p("attn.wk"), &self.wk),
            mat(p("attn.wv"), &self.wv),
            vec1(p("attn.bv"), &self.bv),
            mat(p("attn.wo"), &self.wo),
            vec1(p("attn.bo"), &self.bo),
            vec1(p("attn_norm.gain"), &self.attn_norm.gain),
            vec1(p("attn_norm.bias"), &self.attn_norm.bias),
            mat(p("ffn.w1"), &self.w1),
            vec1(p("ffn.b1"), &self.b1),
            mat(p("ffn.w2"), &self.w2),
            vec1(p("ffn.b2"), &self.b2),
            vec1(p("ffn_norm.gain"), &self.ffn_norm.gain),
            vec1(p("ffn_norm.bias"), &self.ffn_norm.bias),
        ]);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.extend([
            mat_mut(&mut self.wq),
            vec_mut(&mut self.bq),
            mat_mut(&mut self.wk),
            mat_mut(&mut self.wv),
            vec_mut(&mut self.bv),
            mat_mut(&mut self.wo),
            vec_mut(&mut self.bo),
            vec_mut(&mut self.attn_norm.gain),
            vec_mut(&mut self.attn_norm.bias),
            mat_mut(&mut self.w1),
            vec_mut(&mut self.b1),
            mat_mut(&mut self.w2),
            vec_mut(&mut self.b2),
            vec_mut(&mut self.ffn_norm.gain),
            vec_mut(&mut self.ffn_norm.bias),
        ]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embed_norm: LayerNormParams,
    pub layers: Vec<LayerParams>,
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.embed_dim, config.ffn_dim);
        let mut rng = seed::rng(config.seed, &[seed::hash_str("encoder")]);
        let token_embedding = xavier(config.vocab_size, d, &mut rng);
        let position_embedding = xavier(config.max_seq_len, d, &mut rng);
        let layers = (0..config.num_layers).map(|_| LayerParams::init(d, f, &mut rng)).collect();
        Ok(EncoderParams { token_embedding, position_embedding, embed_norm: LayerNormParams::new(d), layers })
    }

    /// A zero tree with the same shapes as `config` prescribes.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.embed_dim, config.ffn_dim);
        EncoderParams {
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_seq_len, d)),
            embed_norm: LayerNormParams::zeros(d),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(d, f)).collect(),
        }
    }
}

impl ParamTree for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            mat("embeddings.token", &self.token_embedding),
            mat("embeddings.position", &self.position_embedding),
            vec1("embeddings.norm.gain", &self.embed_norm.gain),
            vec1("embeddings.norm.bias", &self.embed_norm.bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.push_tensors(&format!("layers.{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            mat_mut(&mut self.token_embedding),
            mat_mut(&mut self.position_embedding),
            vec_mut(&mut self.embed_norm.gain),
            vec_mut(&mut self.embed_norm.bias),
        ];
        for layer in &mut self.layers {
            layer.push_tensors_mut(&mut out);
        }
        out
    }
}
