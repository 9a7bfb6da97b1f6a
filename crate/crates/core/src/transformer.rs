//! A minimal deterministic transformer over Bloom digests.
//!
//! The model embeds the `m*n` hash tokens of an n-entity segment, applies `L`
//! identical layers (multi-head attention then a feed-forward block, each
//! followed by a residual connection and layer normalization), and reads out
//! per-function probability distributions: the final embedding at row `(i,j)`
//! is scored against hash function `j`'s block of the output embedding table
//! and softmaxed within that block, so probability mass never leaks across
//! functions or onto special tokens.
//!
//! Everything is written against a `Scalar` float type: training runs at
//! `f32`, gradient-check fixtures at `f64`. Gradients are analytic and
//! deterministic; [`finite_difference_check`] audits them against central
//! differences.

use ndarray::{Array1, Array2};
use num_traits::{FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::HashScheme;

/// Float type the model is generic over.
pub trait Scalar:
    ndarray::NdFloat + FromPrimitive + ToPrimitive + std::iter::Sum + Default
{
}
impl<T: ndarray::NdFloat + FromPrimitive + ToPrimitive + std::iter::Sum + Default> Scalar for T {}

const LN_EPS: f64 = 1e-6;

/// Model shape. `seq_len` is the fixed entity count per segment; the token
/// sequence the layers see has `num_hashes * seq_len` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub num_hashes: usize,
    pub hash_size: usize,
    pub n_specials: usize,
    pub seq_len: usize,
    pub tie_embeddings: bool,
    pub use_positions: bool,
}

impl ModelConfig {
    /// Conventional sizing against a hash scheme: `d_head = d_model / n_heads`,
    /// tied embeddings, no position table.
    pub fn for_scheme(
        scheme: &HashScheme,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        layers: usize,
        seq_len: usize,
    ) -> Self {
        ModelConfig {
            d_model,
            n_heads,
            d_head: d_model / n_heads.max(1),
            d_ff,
            layers,
            num_hashes: scheme.num_hashes(),
            hash_size: scheme.hash_size() as usize,
            n_specials: scheme.specials().len(),
            seq_len,
            tie_embeddings: true,
            use_positions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_heads,
            self.d_head,
            self.d_ff,
            self.num_hashes,
            self.hash_size,
            self.seq_len,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::InvalidArgument(
                "all model dimensions must be at least 1".into(),
            ));
        }
        if self.n_heads * self.d_head > self.d_model {
            return Err(Error::InvalidArgument(format!(
                "n_heads * d_head = {} exceeds d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        Ok(())
    }

    /// Rows of the embedding table: ordinary blocks plus the special block.
    pub fn total_tokens(&self) -> usize {
        self.num_hashes * self.hash_size + self.num_hashes * self.n_specials
    }

    /// Token rows per forward pass.
    pub fn rows(&self) -> usize {
        self.num_hashes * self.seq_len
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut count = self.total_tokens() * self.d_model;
        if !self.tie_embeddings {
            count += self.total_tokens() * self.d_model;
        }
        if self.use_positions {
            count += self.seq_len * self.d_model;
        }
        let per_layer = 4 * self.n_heads * self.d_model * self.d_head // q, k, v, output
            + 2 * self.d_model * self.d_ff + self.d_ff + self.d_model  // feed-forward
            + 4 * self.d_model; // two layer norms
        count + self.layers * per_layer
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query: Vec<Array2<T>>,
    pub key: Vec<Array2<T>>,
    pub value: Vec<Array2<T>>,
    /// Per-head output projection, applied transposed.
    pub output: Vec<Array2<T>>,
    pub ff1: Array2<T>,
    pub ff1_bias: Array1<T>,
    /// Second feed-forward matrix, `(d_model, d_ff)`, applied transposed.
    pub ff2: Array2<T>,
    pub ff2_bias: Array1<T>,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
}

/// All trainable tensors. Also serves as the gradient and Adam-moment
/// container, since those share shapes with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub embedding: Array2<T>,
    pub output_embedding: Option<Array2<T>>,
    pub positions: Option<Array2<T>>,
    pub layers: Vec<LayerParams<T>>,
}

fn zero_layer<T: Scalar>(config: &ModelConfig) -> LayerParams<T> {
    let head = || {
        (0..config.n_heads)
            .map(|_| Array2::zeros((config.d_model, config.d_head)))
            .collect()
    };
    LayerParams {
        query: head(),
        key: head(),
        value: head(),
        output: head(),
        ff1: Array2::zeros((config.d_model, config.d_ff)),
        ff1_bias: Array1::zeros(config.d_ff),
        ff2: Array2::zeros((config.d_model, config.d_ff)),
        ff2_bias: Array1::zeros(config.d_model),
        ln1_gain: Array1::zeros(config.d_model),
        ln1_bias: Array1::zeros(config.d_model),
        ln2_gain: Array1::zeros(config.d_model),
        ln2_bias: Array1::zeros(config.d_model),
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Parameters {
            embedding: Array2::zeros((config.total_tokens(), config.d_model)),
            output_embedding: if config.tie_embeddings {
                None
            } else {
                Some(Array2::zeros((config.total_tokens(), config.d_model)))
            },
            positions: if config.use_positions {
                Some(Array2::zeros((config.seq_len, config.d_model)))
            } else {
                None
            },
            layers: (0..config.layers).map(|_| zero_layer(config)).collect(),
        }
    }

    /// Named flat views of every tensor, in the declared serialization order.
    pub fn param_slices(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        out.push(("embedding".into(), self.embedding.as_slice().unwrap()));
        if let Some(e) = &self.output_embedding {
            out.push(("output_embedding".into(), e.as_slice().unwrap()));
        }
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p.as_slice().unwrap()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, heads) in [
                ("query", &layer.query),
                ("key", &layer.key),
                ("value", &layer.value),
                ("output", &layer.output),
            ] {
                for (a, h) in heads.iter().enumerate() {
                    out.push((format!("layer{l}.{name}{a}"), h.as_slice().unwrap()));
                }
            }
            out.push((format!("layer{l}.ff1"), layer.ff1.as_slice().unwrap()));
            out.push((format!("layer{l}.ff1_bias"), layer.ff1_bias.as_slice().unwrap()));
            out.push((format!("layer{l}.ff2"), layer.ff2.as_slice().unwrap()));
            out.push((format!("layer{l}.ff2_bias"), layer.ff2_bias.as_slice().unwrap()));
            out.push((format!("layer{l}.ln1_gain"), layer.ln1_gain.as_slice().unwrap()));
            out.push((format!("layer{l}.ln1_bias"), layer.ln1_bias.as_slice().unwrap()));
            out.push((format!("layer{l}.ln2_gain"), layer.ln2_gain.as_slice().unwrap()));
            out.push((format!("layer{l}.ln2_bias"), layer.ln2_bias.as_slice().unwrap()));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("embedding".into(), self.embedding.as_slice_mut().unwrap()));
        if let Some(e) = &mut self.output_embedding {
            out.push(("output_embedding".into(), e.as_slice_mut().unwrap()));
        }
        if let Some(p) = &mut self.positions {
            out.push(("positions".into(), p.as_slice_mut().unwrap()));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, heads) in [
                ("query", &mut layer.query),
                ("key", &mut layer.key),
                ("value", &mut layer.value),
                ("output", &mut layer.output),
            ] {
                for (a, h) in heads.iter_mut().enumerate() {
                    out.push((format!("layer{l}.{name}{a}"), h.as_slice_mut().unwrap()));
                }
            }
            out.push((format!("layer{l}.ff1"), layer.ff1.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff1_bias"), layer.ff1_bias.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff2"), layer.ff2.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ff2_bias"), layer.ff2_bias.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln1_gain"), layer.ln1_gain.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln1_bias"), layer.ln1_bias.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_gain"), layer.ln2_gain.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_bias"), layer.ln2_bias.as_slice_mut().unwrap()));
        }
        out
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let mut mine = self.param_slices_mut();
        let theirs = other.param_slices();
        assert_eq!(mine.len(), theirs.len());
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x = *x + y * scale;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, slice) in self.param_slices_mut() {
            for x in slice {
                *x = *x * s;
            }
        }
    }

    /// Euclidean norm over every coordinate, in f64.
    pub fn global_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }
}

/// The model: a config plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization: weights from a truncated normal
    /// (std 0.02, resampled outside two standard deviations), biases zero,
    /// layer-norm gains one. The random stream is drawn in f64 in declared
    /// parameter order, so f32 and f64 models initialized with the same seed
    /// agree up to rounding.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut draw = move || -> f64 {
            loop {
                let x: f64 = StandardNormal.sample(&mut rng);
                if x.abs() <= 2.0 {
                    return x * 0.02;
                }
            }
        };
        let mut params = Parameters::zeros(&config);
        for (name, slice) in params.param_slices_mut() {
            if name.contains("bias") {
                continue;
            }
            if name.contains("ln") {
                // gains
                for x in slice {
                    *x = T::one();
                }
                continue;
            }
            for x in slice {
                *x = T::from_f64(draw()).unwrap();
            }
        }
        Ok(Model { config, params })
    }

    /// The output embedding table: the input table when tied.
    pub fn output_table(&self) -> &Array2<T> {
        self.params
            .output_embedding
            .as_ref()
            .unwrap_or(&self.params.embedding)
    }
}

/// A model input: `num_hashes * seq_len` global tokens (short segments are
/// padded), the number of valid entity positions, and the masked targets as
/// local tokens per hash function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedExample {
    pub tokens: Vec<u32>,
    pub n_valid: usize,
    pub target_positions: Vec<usize>,
    pub targets: Vec<Vec<u32>>,
}

struct LnCache<T> {
    x_hat: Array2<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    input: Array2<T>,
    /// Per head: query, key, value projections and post-softmax weights.
    heads: Vec<(Array2<T>, Array2<T>, Array2<T>, Array2<T>)>,
    ln1: LnCache<T>,
    ln1_out: Array2<T>,
    ff_pre: Array2<T>,
    ln2: LnCache<T>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    /// Output of the last layer (or the embedded input when `layers == 0`).
    pub final_out: Array2<T>,
    tokens: Vec<u32>,
    n_valid: usize,
}

/// Per-function probability distributions at the requested positions.
/// `probs[k][j]` sums to one over hash function `j`'s `hash_size` local
/// tokens; mass outside the block is structurally zero.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub positions: Vec<usize>,
    pub probs: Vec<Vec<Vec<f64>>>,
}

fn layer_norm_forward<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (rows, d) = x.dim();
    let eps = T::from_f64(LN_EPS).unwrap();
    let d_t = T::from_usize(d).unwrap();
    let mut x_hat = Array2::zeros((rows, d));
    let mut out = Array2::zeros((rows, d));
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d_t;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d_t;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (x[[r, c]] - mean) * rs;
            x_hat[[r, c]] = h;
            out[[r, c]] = gain[c] * h + bias[c];
        }
    }
    (out, LnCache { x_hat, rstd })
}

/// Backward of layer norm. Returns the input gradient and accumulates
/// gain/bias gradients.
fn layer_norm_backward<T: Scalar>(
    d_out: &Array2<T>,
    cache: &LnCache<T>,
    gain: &Array1<T>,
    d_gain: &mut Array1<T>,
    d_bias: &mut Array1<T>,
) -> Array2<T> {
    let (rows, d) = d_out.dim();
    let d_t = T::from_usize(d).unwrap();
    let mut d_x = Array2::zeros((rows, d));
    for r in 0..rows {
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for c in 0..d {
            let dh = d_out[[r, c]] * gain[c];
            let h = cache.x_hat[[r, c]];
            sum_dh = sum_dh + dh;
            sum_dh_h = sum_dh_h + dh * h;
            d_gain[c] = d_gain[c] + d_out[[r, c]] * h;
            d_bias[c] = d_bias[c] + d_out[[r, c]];
        }
        let rs = cache.rstd[r];
        for c in 0..d {
            let dh = d_out[[r, c]] * gain[c];
            let h = cache.x_hat[[r, c]];
            d_x[[r, c]] = rs * (dh - (sum_dh + h * sum_dh_h) / d_t);
        }
    }
    d_x
}

/// Row-wise softmax with key masking: columns at or beyond `valid_cols` are
/// treated as minus infinity (padded positions are attended from, never to).
fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, valid_cols: usize) {
    let (rows, cols) = scores.dim();
    for r in 0..rows {
        let mut max = T::neg_infinity();
        for c in 0..valid_cols {
            max = max.max(scores[[r, c]]);
        }
        let mut sum = T::zero();
        for c in 0..cols {
            if c < valid_cols {
                let e = (scores[[r, c]] - max).exp();
                scores[[r, c]] = e;
                sum = sum + e;
            } else {
                scores[[r, c]] = T::zero();
            }
        }
        for c in 0..valid_cols {
            scores[[r, c]] = scores[[r, c]] / sum;
        }
    }
}

impl<T: Scalar> Model<T> {
    fn check_tokens(&self, tokens: &[u32], n_valid: usize) -> Result<()> {
        let cfg = &self.config;
        if tokens.len() != cfg.rows() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tokens ({} hashes x {} positions), got {}",
                cfg.rows(),
                cfg.num_hashes,
                cfg.seq_len,
                tokens.len()
            )));
        }
        if n_valid == 0 || n_valid > cfg.seq_len {
            return Err(Error::InvalidArgument(format!(
                "n_valid {} out of range 1..={}",
                n_valid, cfg.seq_len
            )));
        }
        let total = cfg.total_tokens() as u32;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= total) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} out of range (table has {total} rows)"
            )));
        }
        Ok(())
    }

    /// Runs the layers over a token sequence and keeps the activations needed
    /// for the backward pass.
    pub fn forward(&self, tokens: &[u32], n_valid: usize) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens, n_valid)?;
        let cfg = &self.config;
        let rows = cfg.rows();
        let valid_rows = cfg.num_hashes * n_valid;
        let scale = T::one() / T::from_usize(cfg.d_head).unwrap().sqrt();

        let mut x = Array2::zeros((rows, cfg.d_model));
        for (r, &t) in tokens.iter().enumerate() {
            let emb = self.params.embedding.row(t as usize);
            let mut row = x.row_mut(r);
            row.assign(&emb);
            if let Some(pos) = &self.params.positions {
                let i = r / cfg.num_hashes;
                row += &pos.row(i);
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for layer in &self.params.layers {
            let input = x.clone();
            let mut attn_sum: Array2<T> = Array2::zeros((rows, cfg.d_model));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for a in 0..cfg.n_heads {
                let q = input.dot(&layer.query[a]);
                let k = input.dot(&layer.key[a]);
                let v = input.dot(&layer.value[a]);
                let mut weights = q.dot(&k.t());
                weights.mapv_inplace(|s| s * scale);
                masked_softmax_rows(&mut weights, valid_rows);
                let ctx = weights.dot(&v);
                attn_sum = attn_sum + ctx.dot(&layer.output[a].t());
                heads.push((q, k, v, weights));
            }
            let (ln1_out, ln1) =
                layer_norm_forward(&(&input + &attn_sum), &layer.ln1_gain, &layer.ln1_bias);

            let mut ff_pre = ln1_out.dot(&layer.ff1);
            for r in 0..rows {
                for c in 0..cfg.d_ff {
                    ff_pre[[r, c]] = ff_pre[[r, c]] + layer.ff1_bias[c];
                }
            }
            let hidden = ff_pre.mapv(|v| v.max(T::zero()));
            let mut ff_out = hidden.dot(&layer.ff2.t());
            for r in 0..rows {
                for c in 0..cfg.d_model {
                    ff_out[[r, c]] = ff_out[[r, c]] + layer.ff2_bias[c];
                }
            }
            let (ln2_out, ln2) =
                layer_norm_forward(&(&ln1_out + &ff_out), &layer.ln2_gain, &layer.ln2_bias);

            layers.push(LayerCache {
                input,
                heads,
                ln1,
                ln1_out,
                ff_pre,
                ln2,
            });
            x = ln2_out;
        }

        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward activations".into()));
        }
        Ok(ForwardCache {
            layers,
            final_out: x,
            tokens: tokens.to_vec(),
            n_valid,
        })
    }

    /// Per-function output distributions at the given entity positions,
    /// computed in f64 so each block sums to one to machine precision.
    pub fn predict(&self, cache: &ForwardCache<T>, positions: &[usize]) -> Result<PredictionSet> {
        let cfg = &self.config;
        let table = self.output_table();
        let mut probs = Vec::with_capacity(positions.len());
        for &i in positions {
            if i >= cache.n_valid {
                return Err(Error::InvalidArgument(format!(
                    "position {i} outside the valid prefix ({})",
                    cache.n_valid
                )));
            }
            let mut per_fn = Vec::with_capacity(cfg.num_hashes);
            for j in 0..cfg.num_hashes {
                let y: Vec<f64> = cache
                    .final_out
                    .row(i * cfg.num_hashes + j)
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect();
                let block = j * cfg.hash_size;
                let mut logits = vec![0f64; cfg.hash_size];
                for (t, logit) in logits.iter_mut().enumerate() {
                    let row = table.row(block + t);
                    let row = row.as_slice().unwrap();
                    *logit = row
                        .iter()
                        .zip(&y)
                        .map(|(&e, &yc)| e.to_f64().unwrap() * yc)
                        .sum();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0f64;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                for l in logits.iter_mut() {
                    *l /= sum;
                }
                per_fn.push(logits);
            }
            probs.push(per_fn);
        }
        Ok(PredictionSet {
            positions: positions.to_vec(),
            probs,
        })
    }

    /// Cross-entropy objective over the masked positions: the sum over
    /// (masked position, hash function) of `-log p[target]`.
    pub fn loss(&self, ex: &PaddedExample) -> Result<f64> {
        let cache = self.forward(&ex.tokens, ex.n_valid)?;
        self.output_loss(&cache, ex, None)
    }

    /// Loss plus analytic gradients for every parameter.
    pub fn loss_and_grad(&self, ex: &PaddedExample) -> Result<(f64, Parameters<T>)> {
        let cache = self.forward(&ex.tokens, ex.n_valid)?;
        let mut grads = Parameters::zeros(&self.config);
        let mut d_final: Array2<T> = Array2::zeros(cache.final_out.dim());
        let loss = self.output_loss(&cache, ex, Some((&mut grads, &mut d_final)))?;
        self.backward(&cache, d_final, &mut grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        Ok((loss, grads))
    }

    /// Output-layer loss; when `accum` is given, also writes `dL/d(final)`
    /// and the output-embedding gradient.
    fn output_loss(
        &self,
        cache: &ForwardCache<T>,
        ex: &PaddedExample,
        mut accum: Option<(&mut Parameters<T>, &mut Array2<T>)>,
    ) -> Result<f64> {
        let cfg = &self.config;
        if ex.targets.len() != ex.target_positions.len() {
            return Err(Error::InvalidArgument(
                "targets and target_positions differ in length".into(),
            ));
        }
        let table = self.output_table();
        let mut total = 0f64;
        for (k, &i) in ex.target_positions.iter().enumerate() {
            if i >= ex.n_valid {
                return Err(Error::InvalidArgument(format!(
                    "masked position {i} outside the valid prefix"
                )));
            }
            for j in 0..cfg.num_hashes {
                let target = ex.targets[k][j] as usize;
                if target >= cfg.hash_size {
                    return Err(Error::InvalidArgument(format!(
                        "target token {target} outside block of size {}",
                        cfg.hash_size
                    )));
                }
                let row = i * cfg.num_hashes + j;
                let y = cache.final_out.row(row).to_owned();
                let y_slice = y.as_slice().unwrap();
                let block = j * cfg.hash_size;

                let mut logits: Vec<T> = Vec::with_capacity(cfg.hash_size);
                for t in 0..cfg.hash_size {
                    let r = table.row(block + t);
                    let r = r.as_slice().unwrap();
                    logits.push(
                        r.iter()
                            .zip(y_slice)
                            .map(|(&e, &yc)| e * yc)
                            .sum(),
                    );
                }
                let max = logits.iter().cloned().fold(T::neg_infinity(), |a, b| a.max(b));
                let mut sum = T::zero();
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum = sum + *l;
                }
                let p_target = logits[target] / sum;
                let loss_jk = -(p_target.ln());
                total += loss_jk.to_f64().ok_or_else(|| Error::NonFinite("loss".into()))?;

                if let Some((grads, d_final)) = accum.as_mut() {
                    let out_grad = grads
                        .output_embedding
                        .as_mut()
                        .unwrap_or(&mut grads.embedding);
                    let mut d_y = vec![T::zero(); cfg.d_model];
                    for (t, &exp_l) in logits.iter().enumerate() {
                        let p = exp_l / sum;
                        let d_logit = if t == target { p - T::one() } else { p };
                        let mut g_row = out_grad.row_mut(block + t);
                        let g_row = g_row.as_slice_mut().unwrap();
                        let e_row = table.row(block + t);
                        let e_row = e_row.as_slice().unwrap();
                        for c in 0..cfg.d_model {
                            g_row[c] = g_row[c] + d_logit * y_slice[c];
                            d_y[c] = d_y[c] + d_logit * e_row[c];
                        }
                    }
                    for c in 0..cfg.d_model {
                        d_final[[row, c]] = d_final[[row, c]] + d_y[c];
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(total)
    }

    /// Backpropagates `d_out` (gradient at the final layer output) through the
    /// layers and the embedding lookup, accumulating into `grads`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache<T>,
        mut d_out: Array2<T>,
        grads: &mut Parameters<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let rows = cfg.rows();
        let valid_rows = cfg.num_hashes * cache.n_valid;
        let scale = T::one() / T::from_usize(cfg.d_head).unwrap().sqrt();

        for (l, layer_cache) in cache.layers.iter().enumerate().rev() {
            let layer = &self.params.layers[l];
            let g = &mut grads.layers[l];

            // ln2: d_out -> gradient of (ln1_out + ff_out)
            let d_sum2 = layer_norm_backward(
                &d_out,
                &layer_cache.ln2,
                &layer.ln2_gain,
                &mut g.ln2_gain,
                &mut g.ln2_bias,
            );

            // feed-forward backward
            let hidden = layer_cache.ff_pre.mapv(|v| v.max(T::zero()));
            for c in 0..cfg.d_model {
                let mut acc = T::zero();
                for r in 0..rows {
                    acc = acc + d_sum2[[r, c]];
                }
                g.ff2_bias[c] = g.ff2_bias[c] + acc;
            }
            g.ff2 = &g.ff2 + &d_sum2.t().dot(&hidden);
            let mut d_hidden = d_sum2.dot(&layer.ff2);
            for r in 0..rows {
                for c in 0..cfg.d_ff {
                    if layer_cache.ff_pre[[r, c]] <= T::zero() {
                        d_hidden[[r, c]] = T::zero();
                    }
                }
            }
            for c in 0..cfg.d_ff {
                let mut acc = T::zero();
                for r in 0..rows {
                    acc = acc + d_hidden[[r, c]];
                }
                g.ff1_bias[c] = g.ff1_bias[c] + acc;
            }
            g.ff1 = &g.ff1 + &layer_cache.ln1_out.t().dot(&d_hidden);
            let mut d_ln1_out = d_hidden.dot(&layer.ff1.t());
            // residual into the feed-forward stage
            d_ln1_out = d_ln1_out + &d_sum2;

            // ln1: -> gradient of (input + attention)
            let d_sum1 = layer_norm_backward(
                &d_ln1_out,
                &layer_cache.ln1,
                &layer.ln1_gain,
                &mut g.ln1_gain,
                &mut g.ln1_bias,
            );

            // attention backward
            let input = &layer_cache.input;
            let mut d_input = d_sum1.clone(); // residual path
            for a in 0..cfg.n_heads {
                let (q, k, v, weights) = &layer_cache.heads[a];
                let ctx = weights.dot(v);

                g.output[a] = &g.output[a] + &d_sum1.t().dot(&ctx);
                let d_ctx = d_sum1.dot(&layer.output[a]);

                let mut d_weights = d_ctx.dot(&v.t());
                let d_v = weights.t().dot(&d_ctx);

                // softmax backward, rows; masked columns have zero weight and
                // contribute nothing.
                for r in 0..rows {
                    let mut dot = T::zero();
                    for c in 0..valid_rows {
                        dot = dot + d_weights[[r, c]] * weights[[r, c]];
                    }
                    for c in 0..rows {
                        d_weights[[r, c]] = if c < valid_rows {
                            weights[[r, c]] * (d_weights[[r, c]] - dot)
                        } else {
                            T::zero()
                        };
                    }
                }
                d_weights.mapv_inplace(|x| x * scale);

                let d_q = d_weights.dot(k);
                let d_k = d_weights.t().dot(q);

                g.query[a] = &g.query[a] + &input.t().dot(&d_q);
                g.key[a] = &g.key[a] + &input.t().dot(&d_k);
                g.value[a] = &g.value[a] + &input.t().dot(&d_v);

                d_input = d_input + d_q.dot(&layer.query[a].t());
                d_input = d_input + d_k.dot(&layer.key[a].t());
                d_input = d_input + d_v.dot(&layer.value[a].t());
            }
            d_out = d_input;
        }

        // embedding lookup backward
        for (r, &t) in cache.tokens.iter().enumerate() {
            for c in 0..cfg.d_model {
                grads.embedding[[t as usize, c]] =
                    grads.embedding[[t as usize, c]] + d_out[[r, c]];
            }
        }
        if let Some(d_pos) = &mut grads.positions {
            for r in 0..rows {
                let i = r / cfg.num_hashes;
                for c in 0..cfg.d_model {
                    d_pos[[i, c]] = d_pos[[i, c]] + d_out[[r, c]];
                }
            }
        }
        Ok(())
    }
}

/// Audits analytic gradients against central finite differences with step
/// `h`, at the model's own precision. Returns `(group name, relative error)`
/// per parameter group, where the relative error is
/// `|analytic - fd|_2 / max(|analytic|_2, |fd|_2, 1e-12)`.
pub fn finite_difference_check<T: Scalar>(
    model: &Model<T>,
    ex: &PaddedExample,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, analytic) = model.loss_and_grad(ex)?;
    let mut probe = model.clone();
    let n_groups = analytic.param_slices().len();
    let mut out = Vec::with_capacity(n_groups);
    for gi in 0..n_groups {
        let len = analytic.param_slices()[gi].1.len();
        let name = analytic.param_slices()[gi].0.clone();
        let mut diff_sq = 0f64;
        let mut fd_sq = 0f64;
        let mut an_sq = 0f64;
        for ci in 0..len {
            let orig = probe.params.param_slices()[gi].1[ci];
            let hv = T::from_f64(h).unwrap();

            probe.params.param_slices_mut()[gi].1[ci] = orig + hv;
            let up = probe.loss(ex)?;
            probe.params.param_slices_mut()[gi].1[ci] = orig - hv;
            let down = probe.loss(ex)?;
            probe.params.param_slices_mut()[gi].1[ci] = orig;

            let fd = (up - down) / (2.0 * h);
            let an = analytic.param_slices()[gi].1[ci].to_f64().unwrap();
            diff_sq += (fd - an).powi(2);
            fd_sq += fd * fd;
            an_sq += an * an;
        }
        let denom = fd_sq.sqrt().max(an_sq.sqrt()).max(1e-12);
        out.push((name, diff_sq.sqrt() / denom));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 16,
            layers: 2,
            num_hashes: 2,
            hash_size: 6,
            n_specials: 1,
            seq_len: 4,
            tie_embeddings: true,
            use_positions: false,
        }
    }

    fn example_for(config: &ModelConfig, seed: u64) -> PaddedExample {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(config.rows());
        for _ in 0..config.seq_len {
            for j in 0..config.num_hashes {
                let local = rand::Rng::random_range(&mut rng, 0..config.hash_size as u32);
                tokens.push(j as u32 * config.hash_size as u32 + local);
            }
        }
        PaddedExample {
            tokens,
            n_valid: config.seq_len,
            target_positions: vec![1, 3],
            targets: vec![
                (0..config.num_hashes)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..config.hash_size as u32))
                    .collect(),
                (0..config.num_hashes)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..config.hash_size as u32))
                    .collect(),
            ],
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a: Model<f32> = Model::init(small_config(), 3).unwrap();
        let b: Model<f32> = Model::init(small_config(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let c: Model<f32> = Model::init(small_config(), 4).unwrap();
        assert_ne!(a.params, c.params);
        for layer in &a.params.layers {
            assert!(layer.ln1_gain.iter().all(|&g| g == 1.0));
            assert!(layer.ln2_gain.iter().all(|&g| g == 1.0));
            assert!(layer.ln1_bias.iter().all(|&b| b == 0.0));
            assert!(layer.ff1_bias.iter().all(|&b| b == 0.0));
        }
        // Truncation: no weight beyond two standard deviations.
        for (_, slice) in a.params.param_slices() {
            assert!(slice.iter().all(|&w| w.abs() <= 0.04 + 1e-6 || w == 1.0));
        }
    }

    #[test]
    fn param_count_matches_stored_tensors() {
        for (tie, pos) in [(true, false), (false, false), (true, true), (false, true)] {
            let mut config = small_config();
            config.tie_embeddings = tie;
            config.use_positions = pos;
            let model: Model<f32> = Model::init(config.clone(), 0).unwrap();
            let actual: usize = model
                .params
                .param_slices()
                .iter()
                .map(|(_, s)| s.len())
                .sum();
            assert_eq!(actual, config.param_count(), "tie={tie} pos={pos}");
        }
        // The audit case: d=64, n_heads=4, d_ff=256, L=12, 10,000 tokens.
        let config = ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            layers: 12,
            num_hashes: 2,
            hash_size: 4_990,
            n_specials: 10,
            seq_len: 8,
            tie_embeddings: true,
            use_positions: false,
        };
        assert_eq!(config.total_tokens(), 10_000);
        // tokens*d + L*(4*heads*d*d_head + 2*d*d_ff + d_ff + d + 4*d)
        let expected = 10_000 * 64
            + 12 * (4 * 4 * 64 * 16 + 2 * 64 * 256 + 256 + 64 + 4 * 64);
        assert_eq!(config.param_count(), expected);
    }

    #[test]
    fn depth_zero_with_orthogonal_embeddings_reads_back_tokens() {
        // d = total_tokens and E = I: logits row (i,j) is one-hot at the
        // input token within block j.
        let config = ModelConfig {
            d_model: 8,
            n_heads: 1,
            d_head: 8,
            d_ff: 4,
            layers: 0,
            num_hashes: 2,
            hash_size: 3,
            n_specials: 1,
            seq_len: 1,
            tie_embeddings: true,
            use_positions: false,
        };
        let mut model: Model<f64> = Model::init(config, 0).unwrap();
        model.params.embedding = Array2::eye(8);
        for local0 in 0..3u32 {
            for local1 in 0..3u32 {
                let tokens = vec![local0, 3 + local1];
                let cache = model.forward(&tokens, 1).unwrap();
                let pred = model.predict(&cache, &[0]).unwrap();
                let argmax = |v: &[f64]| {
                    v.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0 as u32
                };
                assert_eq!(argmax(&pred.probs[0][0]), local0);
                assert_eq!(argmax(&pred.probs[0][1]), local1);
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant_without_positions() {
        let config = ModelConfig {
            seq_len: 5,
            ..small_config()
        };
        let model: Model<f64> = Model::init(config.clone(), 7).unwrap();
        let entities: Vec<[u32; 2]> = vec![[0, 7], [1, 8], [2, 9], [3, 10], [4, 11]];
        let perm = [2usize, 0, 4, 1, 3];

        let tokens: Vec<u32> = entities.iter().flatten().copied().collect();
        let permuted: Vec<u32> = perm.iter().flat_map(|&i| entities[i]).collect();

        let base = model.forward(&tokens, 5).unwrap().final_out;
        let moved = model.forward(&permuted, 5).unwrap().final_out;
        for (new_i, &old_i) in perm.iter().enumerate() {
            for j in 0..2 {
                for c in 0..config.d_model {
                    let a = base[[old_i * 2 + j, c]];
                    let b = moved[[new_i * 2 + j, c]];
                    assert!((a - b).abs() < 1e-6, "row ({old_i},{j}) dim {c}: {a} vs {b}");
                }
            }
        }
    }

    /// Straight-line scalar re-implementation of the forward pass, kept
    /// independent of the ndarray-based implementation it checks.
    fn oracle_forward(model: &Model<f64>, tokens: &[u32], n_valid: usize) -> Vec<Vec<f64>> {
        let cfg = &model.config;
        let rows = cfg.rows();
        let d = cfg.d_model;
        let valid = cfg.num_hashes * n_valid;
        let mut x: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                (0..d)
                    .map(|c| {
                        let mut v = model.params.embedding[[tokens[r] as usize, c]];
                        if let Some(pos) = &model.params.positions {
                            v += pos[[r / cfg.num_hashes, c]];
                        }
                        v
                    })
                    .collect()
            })
            .collect();

        let ln = |x: &[f64], gain: &Array1<f64>, bias: &Array1<f64>| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            (0..d)
                .map(|c| gain[c] * (x[c] - mean) * rstd + bias[c])
                .collect()
        };

        for layer in &model.params.layers {
            // attention
            let mut attn = vec![vec![0.0; d]; rows];
            for a in 0..cfg.n_heads {
                let proj = |mat: &Array2<f64>| -> Vec<Vec<f64>> {
                    (0..rows)
                        .map(|r| {
                            (0..cfg.d_head)
                                .map(|h| (0..d).map(|c| x[r][c] * mat[[c, h]]).sum())
                                .collect()
                        })
                        .collect()
                };
                let q = proj(&layer.query[a]);
                let k = proj(&layer.key[a]);
                let v = proj(&layer.value[a]);
                for r in 0..rows {
                    let scores: Vec<f64> = (0..valid)
                        .map(|r2| {
                            (0..cfg.d_head).map(|h| q[r][h] * k[r2][h]).sum::<f64>()
                                / (cfg.d_head as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for h in 0..cfg.d_head {
                        let ctx: f64 = (0..valid).map(|r2| exps[r2] / z * v[r2][h]).sum();
                        for c in 0..d {
                            attn[r][c] += ctx * layer.output[a][[c, h]];
                        }
                    }
                }
            }
            let y1: Vec<Vec<f64>> = (0..rows)
                .map(|r| {
                    let sum: Vec<f64> = (0..d).map(|c| x[r][c] + attn[r][c]).collect();
                    ln(&sum, &layer.ln1_gain, &layer.ln1_bias)
                })
                .collect();
            // feed-forward
            x = (0..rows)
                .map(|r| {
                    let mut out = vec![0.0; d];
                    for f in 0..cfg.d_ff {
                        let pre: f64 = (0..d).map(|c| y1[r][c] * layer.ff1[[c, f]]).sum::<f64>()
                            + layer.ff1_bias[f];
                        let hid = pre.max(0.0);
                        for c in 0..d {
                            out[c] += hid * layer.ff2[[c, f]];
                        }
                    }
                    let sum: Vec<f64> = (0..d)
                        .map(|c| y1[r][c] + out[c] + layer.ff2_bias[c])
                        .collect();
                    ln(&sum, &layer.ln2_gain, &layer.ln2_bias)
                })
                .collect();
        }
        x
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        for seed in [1u64, 2, 3] {
            let model: Model<f64> = Model::init(small_config(), seed).unwrap();
            let ex = example_for(&model.config, seed + 10);
            let got = model.forward(&ex.tokens, ex.n_valid).unwrap().final_out;
            let want = oracle_forward(&model, &ex.tokens, ex.n_valid);
            for r in 0..model.config.rows() {
                for c in 0..model.config.d_model {
                    let rel = (got[[r, c]] - want[r][c]).abs()
                        / want[r][c].abs().max(1e-30);
                    assert!(rel < 1e-10, "row {r} dim {c}: {} vs {}", got[[r, c]], want[r][c]);
                }
            }
        }
    }

    #[test]
    fn forward_with_padding_matches_oracle() {
        let config = ModelConfig {
            use_positions: true,
            ..small_config()
        };
        let model: Model<f64> = Model::init(config, 5).unwrap();
        let mut ex = example_for(&model.config, 20);
        ex.n_valid = 2; // last two positions are padding
        let got = model.forward(&ex.tokens, ex.n_valid).unwrap().final_out;
        let want = oracle_forward(&model, &ex.tokens, ex.n_valid);
        for r in 0..model.config.rows() {
            for c in 0..model.config.d_model {
                assert!((got[[r, c]] - want[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_m_log_h_loss() {
        let config = small_config();
        let mut model: Model<f64> = Model::init(config.clone(), 0).unwrap();
        // Zero embeddings and zero layers' effect is easiest at depth 0.
        let mut config0 = config;
        config0.layers = 0;
        model = Model::init(config0.clone(), 0).unwrap();
        model.params.embedding.fill(0.0);
        let ex = PaddedExample {
            tokens: vec![0, 6, 1, 7, 2, 8, 3, 9],
            n_valid: 4,
            target_positions: vec![2],
            targets: vec![vec![4, 5]],
        };
        let loss = model.loss(&ex).unwrap();
        let expected = 2.0 * (6f64).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn near_one_probability_gives_near_zero_loss() {
        let config = ModelConfig {
            d_model: 3,
            n_heads: 1,
            d_head: 3,
            d_ff: 2,
            layers: 0,
            num_hashes: 1,
            hash_size: 3,
            n_specials: 0,
            seq_len: 1,
            tie_embeddings: true,
            use_positions: false,
        };
        let mut model: Model<f64> = Model::init(config, 0).unwrap();
        model.params.embedding = Array2::eye(3) * 50.0;
        let ex = PaddedExample {
            tokens: vec![1],
            n_valid: 1,
            target_positions: vec![0],
            targets: vec![vec![1]],
        };
        assert!(model.loss(&ex).unwrap() < 1e-12);
    }

    #[test]
    fn hand_computed_three_token_cross_entropy() {
        let config = ModelConfig {
            d_model: 3,
            n_heads: 1,
            d_head: 3,
            d_ff: 2,
            layers: 0,
            num_hashes: 1,
            hash_size: 3,
            n_specials: 0,
            seq_len: 1,
            tie_embeddings: true,
            use_positions: false,
        };
        let mut model: Model<f64> = Model::init(config, 0).unwrap();
        model.params.embedding = Array2::eye(3);
        // y = e_1, logits = (0, 1, 0): loss = ln(e + 2) - 1.
        let ex = PaddedExample {
            tokens: vec![1],
            n_valid: 1,
            target_positions: vec![0],
            targets: vec![vec![1]],
        };
        let want = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((model.loss(&ex).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // Weights are scaled up so no ReLU preactivation sits within the
        // finite-difference step of zero; at 0.02-std init the h=1e-3 stencil
        // straddles kinks and the comparison measures the kink, not the
        // gradient. The seed is pinned to a verified kink-free fixture.
        let mut model: Model<f64> = Model::init(small_config(), 8).unwrap();
        model.params.scale(5.0);
        let ex = PaddedExample {
            tokens: vec![0, 6, 1, 7, 2, 8, 3, 9],
            n_valid: 4,
            target_positions: vec![1, 3],
            targets: vec![vec![4, 5], vec![1, 0]],
        };
        let report = finite_difference_check(&model, &ex, 1e-3).unwrap();
        for (name, rel) in report {
            assert!(rel < 1e-4, "group {name}: relative error {rel}");
        }
    }

    #[test]
    fn gradients_cover_untied_and_position_tables() {
        let config = ModelConfig {
            d_model: 6,
            n_heads: 2,
            d_head: 3,
            d_ff: 8,
            layers: 1,
            num_hashes: 2,
            hash_size: 4,
            n_specials: 1,
            seq_len: 3,
            tie_embeddings: false,
            use_positions: true,
        };
        // Same kink-free scaling as the tied check.
        let mut model: Model<f64> = Model::init(config, 0).unwrap();
        model.params.scale(5.0);
        let ex = PaddedExample {
            tokens: vec![0, 4, 1, 5, 2, 6],
            n_valid: 3,
            target_positions: vec![0, 2],
            targets: vec![vec![3, 2], vec![1, 0]],
        };
        let report = finite_difference_check(&model, &ex, 1e-3).unwrap();
        assert!(report.iter().any(|(n, _)| n == "output_embedding"));
        assert!(report.iter().any(|(n, _)| n == "positions"));
        for (name, rel) in report {
            assert!(rel < 1e-4, "group {name}: relative error {rel}");
        }
    }

    #[test]
    fn tied_gradient_is_sum_of_untied_input_and_output_gradients() {
        let tied_cfg = small_config();
        let untied_cfg = ModelConfig {
            tie_embeddings: false,
            ..tied_cfg.clone()
        };
        let tied: Model<f64> = Model::init(tied_cfg, 21).unwrap();
        let mut untied: Model<f64> = Model::init(untied_cfg, 21).unwrap();
        // Same layer weights and identical input/output tables.
        untied.params.layers = tied.params.layers.clone();
        untied.params.embedding = tied.params.embedding.clone();
        untied.params.output_embedding = Some(tied.params.embedding.clone());

        let ex = example_for(&tied.config, 33);
        let (loss_tied, g_tied) = tied.loss_and_grad(&ex).unwrap();
        let (loss_untied, g_untied) = untied.loss_and_grad(&ex).unwrap();
        assert!((loss_tied - loss_untied).abs() < 1e-12);

        let combined = &g_untied.embedding + g_untied.output_embedding.as_ref().unwrap();
        for (a, b) in g_tied.embedding.iter().zip(combined.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // With untied tables, the input-embedding gradient is nonzero only at
        // rows whose tokens appear in the input.
        let present: std::collections::HashSet<u32> = ex.tokens.iter().copied().collect();
        for t in 0..untied.config.total_tokens() as u32 {
            if !present.contains(&t) {
                let row = g_untied.embedding.row(t as usize);
                assert!(row.iter().all(|&v| v == 0.0), "token {t} has spurious gradient");
            }
        }
    }

    #[test]
    fn predictions_are_normalized_within_blocks() {
        let model: Model<f32> = Model::init(small_config(), 2).unwrap();
        let ex = example_for(&model.config, 8);
        let cache = model.forward(&ex.tokens, ex.n_valid).unwrap();
        let pred = model.predict(&cache, &[0, 1, 2, 3]).unwrap();
        for per_pos in &pred.probs {
            assert_eq!(per_pos.len(), 2);
            for dist in per_pos {
                assert_eq!(dist.len(), 6);
                let sum: f64 = dist.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(dist.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let model: Model<f32> = Model::init(small_config(), 2).unwrap();
        let mut ex = example_for(&model.config, 8);
        ex.tokens[0] = model.config.total_tokens() as u32;
        assert!(matches!(
            model.forward(&ex.tokens, ex.n_valid),
            Err(Error::InvalidArgument(_))
        ));

        let mut bad_target = example_for(&model.config, 8);
        bad_target.targets[0][0] = model.config.hash_size as u32;
        assert!(model.loss(&bad_target).is_err());

        let mut poisoned: Model<f32> = Model::init(small_config(), 2).unwrap();
        poisoned.params.embedding[[0, 0]] = f32::NAN;
        let ex2 = example_for(&poisoned.config, 8);
        assert!(matches!(
            poisoned.forward(&ex2.tokens, ex2.n_valid),
            Err(Error::NonFinite(_))
        ));
    }
}
