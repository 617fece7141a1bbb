//! BERT-style post-layer-norm transformer encoder with MLM, SPLADE, CLS and
//! cross-encoder heads.
//!
//! Parameters live in a flat list addressed by index; [`Layout`] maps the
//! architectural roles onto those indices. The forward pass is recorded on an
//! [`autograd::Graph`](crate::autograd::Graph) through [`Session`], so every
//! head is differentiable.

mod checkpoint;
mod session;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use session::Session;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::{DenseVector, SparseVector};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{wrap_pair, TokenId};

const INIT_STD: f64 = 0.02;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_true")]
    pub tie_mlm_head: bool,
    /// Initialization of the MLM head's dense transform.
    #[serde(default)]
    pub mlm_transform_init: TransformInit,
    #[serde(default)]
    pub seed: u64,
}

/// `Identity` starts the tied MLM head as a token-identity map, so SPLADE
/// vectors depend on their input from the first step; short desk-scale
/// pretraining does not discover that map on its own. `Normal` is the usual
/// std-0.02 draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformInit {
    #[default]
    Identity,
    Normal,
}

impl EncoderConfig {
    /// Desk-scale default: `hidden = 64 * heads`, `ffn = 4 * hidden`,
    /// 256 positions, tied MLM head.
    pub fn desk(num_layers: usize, num_heads: usize, vocab_size: usize, seed: u64) -> Self {
        let hidden_dim = 64 * num_heads;
        Self {
            num_layers,
            num_heads,
            hidden_dim,
            ffn_dim: 4 * hidden_dim,
            vocab_size,
            max_positions: 256,
            tie_mlm_head: true,
            mlm_transform_init: TransformInit::default(),
            seed,
        }
    }

    /// 6 layers, 16 heads, 768 hidden: the "6L" shape (about 68M
    /// parameters at a 32k vocabulary).
    pub fn six_layer(vocab_size: usize, seed: u64) -> Self {
        Self::full_scale(6, 16, vocab_size, seed)
    }

    /// 12 layers, 12 heads, 768 hidden: the "12L" shape (about 110M
    /// parameters at a 32k vocabulary).
    pub fn twelve_layer(vocab_size: usize, seed: u64) -> Self {
        Self::full_scale(12, 12, vocab_size, seed)
    }

    fn full_scale(num_layers: usize, num_heads: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            num_layers,
            num_heads,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size,
            max_positions: 512,
            tie_mlm_head: true,
            mlm_transform_init: TransformInit::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if self.num_heads < 1 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIAL {
            return bad("vocab_size must be >= 5");
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive");
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        param_shapes(self).iter().map(|(_, (r, c))| r * c).sum()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub token: usize,
    pub position: usize,
    pub segment: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub layers: Vec<LayerParams>,
    pub mlm_w: usize,
    pub mlm_b: usize,
    pub mlm_ln_g: usize,
    pub mlm_ln_b: usize,
    pub mlm_decoder: Option<usize>,
    pub mlm_out_b: usize,
    pub cross_w: usize,
    pub cross_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Identity,
}

fn param_specs(cfg: &EncoderConfig) -> (Vec<(String, (usize, usize), Init)>, Layout) {
    let (h, f, v) = (cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size);
    let mut specs: Vec<(String, (usize, usize), Init)> = Vec::new();
    let mut add = |name: String, shape: (usize, usize), init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let token = add("embeddings.token".into(), (v, h), Init::Normal);
    let position = add("embeddings.position".into(), (cfg.max_positions, h), Init::Normal);
    let segment = add("embeddings.segment".into(), (2, h), Init::Normal);
    let emb_ln_g = add("embeddings.ln.gain".into(), (1, h), Init::Ones);
    let emb_ln_b = add("embeddings.ln.bias".into(), (1, h), Init::Zeros);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        layers.push(LayerParams {
            q_w: add(p("attn.query.weight"), (h, h), Init::Normal),
            q_b: add(p("attn.query.bias"), (1, h), Init::Zeros),
            k_w: add(p("attn.key.weight"), (h, h), Init::Normal),
            k_b: add(p("attn.key.bias"), (1, h), Init::Zeros),
            v_w: add(p("attn.value.weight"), (h, h), Init::Normal),
            v_b: add(p("attn.value.bias"), (1, h), Init::Zeros),
            o_w: add(p("attn.output.weight"), (h, h), Init::Normal),
            o_b: add(p("attn.output.bias"), (1, h), Init::Zeros),
            ln1_g: add(p("attn.ln.gain"), (1, h), Init::Ones),
            ln1_b: add(p("attn.ln.bias"), (1, h), Init::Zeros),
            ff1_w: add(p("ffn.in.weight"), (h, f), Init::Normal),
            ff1_b: add(p("ffn.in.bias"), (1, f), Init::Zeros),
            ff2_w: add(p("ffn.out.weight"), (f, h), Init::Normal),
            ff2_b: add(p("ffn.out.bias"), (1, h), Init::Zeros),
            ln2_g: add(p("ffn.ln.gain"), (1, h), Init::Ones),
            ln2_b: add(p("ffn.ln.bias"), (1, h), Init::Zeros),
        });
    }
    let mlm_init = match cfg.mlm_transform_init {
        TransformInit::Identity => Init::Identity,
        TransformInit::Normal => Init::Normal,
    };
    let mlm_w = add("mlm.transform.weight".into(), (h, h), mlm_init);
    let mlm_b = add("mlm.transform.bias".into(), (1, h), Init::Zeros);
    let mlm_ln_g = add("mlm.ln.gain".into(), (1, h), Init::Ones);
    let mlm_ln_b = add("mlm.ln.bias".into(), (1, h), Init::Zeros);
    let mlm_decoder = (!cfg.tie_mlm_head).then(|| add("mlm.decoder.weight".into(), (v, h), Init::Normal));
    let mlm_out_b = add("mlm.decoder.bias".into(), (1, v), Init::Zeros);
    let cross_w = add("cross.weight".into(), (h, 1), Init::Normal);
    let cross_b = add("cross.bias".into(), (1, 1), Init::Zeros);
    let layout = Layout {
        token,
        position,
        segment,
        emb_ln_g,
        emb_ln_b,
        layers,
        mlm_w,
        mlm_b,
        mlm_ln_g,
        mlm_ln_b,
        mlm_decoder,
        mlm_out_b,
        cross_w,
        cross_b,
    };
    (specs, layout)
}

/// Names and shapes of every parameter, in storage order.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, (usize, usize))> {
    param_specs(cfg).0.into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Standard normal truncated at two standard deviations, by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> EncoderModel<T> {
    /// Fresh model: truncated normal (std 0.02) weights, zero biases, unit
    /// layer-norm gains.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, (r, c), init) in specs {
            let m = match init {
                Init::Zeros => Matrix::zeros(r, c),
                Init::Ones => Matrix::filled(r, c, T::one()),
                Init::Identity => Matrix::from_vec(
                    r,
                    c,
                    (0..r * c).map(|i| if i / c == i % c { T::one() } else { T::zero() }).collect(),
                ),
                Init::Normal => {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| T::of(INIT_STD * truncated_normal(&mut rng))).collect())
                }
            };
            names.push(name);
            params.push(m);
        }
        Ok(Self { config, names, params, layout })
    }

    /// Assembles a model from named tensors, checking that names and shapes
    /// match the layout implied by `config`.
    pub fn from_params(config: EncoderConfig, named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.len(), named.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape, _), (n, m)) in specs.into_iter().zip(named) {
            if name != n || shape != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {n} {:?} does not match expected {name} {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {n} has non-finite values")));
            }
            names.push(name);
            params.push(m);
        }
        Ok(Self { config, names, params, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Zero-filled gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Matrix<T>> {
        self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect()
    }

    pub fn session(&self) -> Session<'_, T> {
        Session::new(self)
    }

    /// Hidden states (`seq_len x hidden_dim`). Masked positions are invisible
    /// to every query.
    pub fn forward(&self, ids: &[TokenId], attention_mask: &[bool]) -> Result<Matrix<T>> {
        let mut s = self.session();
        let h = s.encode(ids, None, attention_mask)?;
        Ok(s.value(h).clone())
    }

    /// MLM logits (`seq_len x vocab_size`) for given hidden states.
    pub fn mlm_logits(&self, hidden: &Matrix<T>) -> Matrix<T> {
        let mut s = self.session();
        let h = s.graph_mut().input(hidden.clone());
        let l = s.mlm_logits(h);
        s.value(l).clone()
    }

    /// SPLADE document/query representation of a token sequence.
    pub fn encode_sparse(&self, ids: &[TokenId]) -> Result<SparseVector> {
        let mask = vec![true; ids.len()];
        let mut s = self.session();
        let h = s.encode(ids, None, &mask)?;
        let logits = s.mlm_logits(h);
        let pooled = s.splade_pool(logits, &mask)?;
        Ok(SparseVector::from_dense(s.value(pooled).as_slice()))
    }

    /// CLS dense representation of a token sequence.
    pub fn encode_dense(&self, ids: &[TokenId]) -> Result<DenseVector> {
        let hidden = self.forward(ids, &vec![true; ids.len()])?;
        cls_pool(&hidden)
    }

    /// Relevance score of `[CLS] query [SEP] doc [SEP]` from the linear head
    /// on the CLS vector. `query_ids`/`doc_ids` are bare subword ids.
    pub fn cross_score(&self, query_ids: &[TokenId], doc_ids: &[TokenId], max_len: usize) -> Result<T> {
        let (ids, segments) = wrap_pair(query_ids, doc_ids, max_len.min(self.config.max_positions).max(3));
        let mask = vec![true; ids.len()];
        let mut s = self.session();
        let h = s.encode(&ids, Some(&segments), &mask)?;
        let score = s.cross_score(h);
        Ok(s.value(score).item())
    }
}

/// Max-pooled `log(1 + relu(logits))` over unmasked positions, special-token
/// dimensions dropped.
pub fn splade_pool<T: Scalar>(logits: &Matrix<T>, attention_mask: &[bool]) -> Result<SparseVector> {
    if attention_mask.len() != logits.rows() {
        return Err(Error::DimensionMismatch { expected: logits.rows(), actual: attention_mask.len() });
    }
    if !attention_mask.iter().any(|&m| m) {
        return Err(Error::AllPositionsMasked);
    }
    let mut pooled = vec![T::zero(); logits.cols()];
    for (r, _) in attention_mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, &x) in pooled.iter_mut().zip(logits.row(r)) {
            if x > *p {
                *p = x;
            }
        }
    }
    let weights: Vec<T> = pooled.into_iter().map(|x| x.ln_1p()).collect();
    Ok(SparseVector::from_dense(&weights))
}

/// Hidden state of position 0.
pub fn cls_pool<T: Scalar>(hidden: &Matrix<T>) -> Result<DenseVector> {
    if hidden.rows() == 0 {
        return Err(Error::AllPositionsMasked);
    }
    Ok(DenseVector::from_row(hidden.row(0)))
}

#[cfg(test)]
mod tests;
