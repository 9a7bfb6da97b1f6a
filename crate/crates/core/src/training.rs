//! Optimization loop: Adam with linear warmup and inverse-square-root decay,
//! deterministic batching, checkpointing, and an optional sampled-softmax
//! loss mode for unhashed baselines.
//!
//! The data pipeline is stateless in the step number: every example is
//! derived from `mix_seed(seed, step, slot)`, so resuming from a checkpoint
//! reproduces the uninterrupted trajectory bit for bit.

use std::fs::OpenOptions;
use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, MaskedExample, Page, PAD_NAME};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::hashing::HashScheme;
use crate::inference::BeamParams;
use crate::transformer::{Model, ModelConfig, PaddedExample, Parameters, Scalar};
use crate::util::{self, Reader, Writer};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SBCKPT01";

/// Loss over the output vocabulary: full softmax per hash block, or sampled
/// softmax with uniform negatives (baseline mode for unhashed models, where
/// ids and tokens coincide).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    FullSoftmax,
    SampledSoftmax { num_negatives: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub init_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Steps between metric records; 0 records only the final step.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub mask_rate: f64,
    pub loss_mode: LossMode,
    /// Beam width used for the recall metrics logged during training.
    pub eval_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            init_lr: 2e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 0,
            grad_clip: 1.0,
            mask_rate: 0.15,
            loss_mode: LossMode::FullSoftmax,
            eval_beam: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.warmup_steps == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, total_steps, and warmup_steps must be positive".into(),
            ));
        }
        if self.init_lr <= 0.0 {
            return Err(Error::InvalidArgument("init_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `init_lr` at `warmup_steps`, then inverse-square-root
/// decay: `lr = init_lr * min(step/warmup, sqrt(warmup/step))`.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let w = config.warmup_steps as f64;
    let s = step as f64;
    let factor = (s / w).min((w / s.max(1.0)).sqrt());
    config.init_lr * factor
}

/// One Adam update on a flat parameter group with bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_slices<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let b1 = T::from_f64(beta1).unwrap();
    let b2 = T::from_f64(beta2).unwrap();
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32)).unwrap();
    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32)).unwrap();
    let lr_t = T::from_f64(lr).unwrap();
    let eps = T::from_f64(epsilon).unwrap();
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam first/second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub first: Parameters<T>,
    pub second: Parameters<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        AdamState {
            t: 0,
            first: Parameters::zeros(config),
            second: Parameters::zeros(config),
        }
    }
}

/// Applies one Adam step. A non-finite gradient aborts the step and names
/// the offending parameter group.
pub fn adam_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut AdamState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, slice) in grads.param_slices() {
        if slice.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for {name}")));
        }
    }
    state.t += 1;
    let t = state.t;
    let mut ps = params.param_slices_mut();
    let gs = grads.param_slices();
    let mut ms = state.first.param_slices_mut();
    let mut vs = state.second.param_slices_mut();
    for i in 0..ps.len() {
        adam_update_slices(
            ps[i].1,
            gs[i].1,
            ms[i].1,
            vs[i].1,
            t,
            lr,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
    }
    Ok(())
}

/// Pads a masked example to the model's fixed sequence length with PAD
/// special tokens. Fails if the segment is longer than `seq_len`, or if
/// padding is needed and the scheme has no PAD special.
pub fn pad_example(
    ex: &MaskedExample,
    scheme: &HashScheme,
    seq_len: usize,
) -> Result<PaddedExample> {
    let m = scheme.num_hashes();
    let n_valid = ex.input_tokens.len() / m;
    if n_valid > seq_len {
        return Err(Error::InvalidArgument(format!(
            "segment of {n_valid} entities exceeds the model's seq_len {seq_len}"
        )));
    }
    let mut tokens = ex.input_tokens.clone();
    if n_valid < seq_len {
        let pad_idx = scheme.special_index(PAD_NAME).ok_or_else(|| {
            Error::InvalidArgument("scheme has no PAD special but padding is required".into())
        })?;
        let pad = scheme.special_tokens(pad_idx)?;
        for _ in n_valid..seq_len {
            tokens.extend_from_slice(&pad);
        }
    }
    Ok(PaddedExample {
        tokens,
        n_valid,
        target_positions: ex.target_positions.clone(),
        targets: ex.targets.clone(),
    })
}

/// Where training examples come from: cycled fixed examples, or segments cut
/// on the fly from corpus pages.
pub enum DataSource<'a> {
    Fixed(&'a [MaskedExample]),
    Pages { pages: &'a [Page], n_max: usize },
}

impl DataSource<'_> {
    fn example(
        &self,
        scheme: &HashScheme,
        cfg: &TrainConfig,
        step: u64,
        slot: usize,
    ) -> Result<MaskedExample> {
        match self {
            DataSource::Fixed(examples) => {
                let idx = ((step - 1) as usize * cfg.batch_size + slot) % examples.len();
                Ok(examples[idx].clone())
            }
            DataSource::Pages { pages, n_max } => {
                let mut rng = ChaCha20Rng::seed_from_u64(util::mix_seed(
                    cfg.seed,
                    step,
                    slot as u64,
                ));
                let page = &pages[rng.random_range(0..pages.len())];
                let segment = corpus::cut_segment(page, *n_max, rng.random())?;
                corpus::make_masked_example(&segment, scheme, cfg.mask_rate, rng.random())
            }
        }
    }
}

/// One metrics-log record. Recall fields are NaN when no eval set was given.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub rec1: f64,
    pub rec10: f64,
    pub rec20: f64,
}

impl MetricsRecord {
    pub fn render(&self) -> String {
        format!(
            "step={} loss={:.6} rec1={:.4} rec10={:.4} rec20={:.4}",
            self.step, self.loss, self.rec1, self.rec10, self.rec20
        )
    }
}

pub struct TrainResult {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub step: u64,
    pub metrics: Vec<MetricsRecord>,
    pub final_loss: f64,
}

/// Trains from a fresh optimizer state.
pub fn train(
    model: Model<f32>,
    data: &DataSource,
    scheme: &HashScheme,
    cfg: &TrainConfig,
    eval_examples: &[MaskedExample],
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    let optimizer = AdamState::new(&model.config);
    train_loop(model, optimizer, 0, data, scheme, cfg, eval_examples, out_dir)
}

/// Continues training from a loaded checkpoint; the trajectory matches an
/// uninterrupted run exactly.
pub fn resume(
    checkpoint: Checkpoint,
    data: &DataSource,
    scheme: &HashScheme,
    cfg: &TrainConfig,
    eval_examples: &[MaskedExample],
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    let optimizer = checkpoint.optimizer.ok_or_else(|| {
        Error::InvalidArgument("checkpoint has no optimizer state; cannot resume".into())
    })?;
    train_loop(
        checkpoint.model,
        optimizer,
        checkpoint.step,
        data,
        scheme,
        cfg,
        eval_examples,
        out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut model: Model<f32>,
    mut optimizer: AdamState<f32>,
    start_step: u64,
    data: &DataSource,
    scheme: &HashScheme,
    cfg: &TrainConfig,
    eval_examples: &[MaskedExample],
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics = Vec::new();
    let mut window_loss = 0.0;
    let mut window_count = 0u64;
    let mut final_loss = f64::NAN;

    for step in (start_step + 1)..=cfg.total_steps {
        let mut grads = Parameters::zeros(&model.config);
        let mut batch_loss = 0.0;
        for slot in 0..cfg.batch_size {
            let ex = data.example(scheme, cfg, step, slot)?;
            let padded = pad_example(&ex, scheme, model.config.seq_len)?;
            let (loss, g) = match cfg.loss_mode {
                LossMode::FullSoftmax => model.loss_and_grad(&padded)?,
                LossMode::SampledSoftmax { num_negatives } => sampled_loss_and_grad(
                    &model,
                    &padded,
                    num_negatives,
                    util::mix_seed(cfg.seed, step, 0x5A3F ^ slot as u64),
                )?,
            };
            batch_loss += loss;
            grads.add_scaled(&g, 1.0 / cfg.batch_size as f32);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        final_loss = batch_loss;
        window_loss += batch_loss;
        window_count += 1;

        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale((cfg.grad_clip / norm) as f32);
            }
        }
        adam_step(&mut model.params, &grads, &mut optimizer, lr_at(cfg, step), cfg)?;

        let last = step == cfg.total_steps;
        if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let record = make_record(
                &model,
                scheme,
                cfg,
                eval_examples,
                step,
                window_loss / window_count.max(1) as f64,
            )?;
            if let Some(dir) = out_dir {
                let mut log = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.log"))?;
                writeln!(log, "{}", record.render())?;
            }
            metrics.push(record);
            window_loss = 0.0;
            window_count = 0;
        }
        if let Some(dir) = out_dir {
            if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                let ckpt = Checkpoint {
                    model: model.clone(),
                    optimizer: Some(optimizer.clone()),
                    step,
                    scheme_fingerprint: scheme.fingerprint(),
                };
                ckpt.save(&dir.join(format!("checkpoint_{step:07}.ckpt")))?;
            }
        }
    }

    Ok(TrainResult {
        model,
        optimizer,
        step: cfg.total_steps,
        metrics,
        final_loss,
    })
}

fn make_record(
    model: &Model<f32>,
    scheme: &HashScheme,
    cfg: &TrainConfig,
    eval_examples: &[MaskedExample],
    step: u64,
    loss: f64,
) -> Result<MetricsRecord> {
    let (rec1, rec10, rec20) = if eval_examples.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let beam = BeamParams::new(cfg.eval_beam, 1, 20)?;
        let outcome = evaluation::rank_examples(
            model,
            scheme,
            eval_examples,
            crate::inference::ScoreFunction::LogSum,
            beam,
        )?;
        (
            evaluation::recall_at_k(&outcome.results, &outcome.truths, 1)?,
            evaluation::recall_at_k(&outcome.results, &outcome.truths, 10)?,
            evaluation::recall_at_k(&outcome.results, &outcome.truths, 20)?,
        )
    };
    Ok(MetricsRecord {
        step,
        loss,
        rec1,
        rec10,
        rec20,
    })
}

/// Cross-entropy over `{target} ∪ num_negatives` uniform negatives drawn
/// without replacement (no proposal correction). With `num_negatives =
/// vocab - 1` this is exactly the full softmax loss. Returns the loss and
/// the dense logit gradient (zero outside the sampled set).
pub fn sampled_softmax_loss(
    logits: &[f64],
    target: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let vocab = logits.len();
    if target >= vocab {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside vocabulary of {vocab}"
        )));
    }
    if num_negatives >= vocab {
        return Err(Error::InvalidArgument(format!(
            "num_negatives {num_negatives} must be below the vocabulary size {vocab}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Sample from vocab-1 slots and skip over the target.
    let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, vocab - 1, num_negatives)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    indices.push(target);

    let max = indices
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &i in &indices {
        z += (logits[i] - max).exp();
    }
    let p_target = (logits[target] - max).exp() / z;
    let loss = -p_target.ln();

    let mut grad = vec![0.0; vocab];
    for &i in &indices {
        let p = (logits[i] - max).exp() / z;
        grad[i] += if i == target { p - 1.0 } else { p };
    }
    Ok((loss, grad))
}

/// Forward/backward with the sampled-softmax objective. Only meaningful for
/// unhashed schemes (one hash function, alpha one) where local tokens are
/// entity ids.
fn sampled_loss_and_grad(
    model: &Model<f32>,
    ex: &PaddedExample,
    num_negatives: usize,
    seed: u64,
) -> Result<(f64, Parameters<f32>)> {
    let cfg = &model.config;
    if cfg.num_hashes != 1 {
        return Err(Error::InvalidArgument(
            "sampled softmax requires an unhashed scheme (one hash function)".into(),
        ));
    }
    let cache = model.forward(&ex.tokens, ex.n_valid)?;
    let mut grads = Parameters::zeros(cfg);
    let mut d_final = ndarray::Array2::<f32>::zeros(cache.final_out.dim());
    let table = model.output_table().clone();
    let mut total = 0.0;

    for (k, &i) in ex.target_positions.iter().enumerate() {
        let target = ex.targets[k][0] as usize;
        let y = cache.final_out.row(i).to_owned();
        let logits: Vec<f64> = (0..cfg.hash_size)
            .map(|t| {
                (0..cfg.d_model)
                    .map(|c| y[c] as f64 * table[[t, c]] as f64)
                    .sum()
            })
            .collect();
        let (loss, d_logits) =
            sampled_softmax_loss(&logits, target, num_negatives, util::mix_seed(seed, k as u64, i as u64))?;
        total += loss;

        let out_grad = grads
            .output_embedding
            .as_mut()
            .unwrap_or(&mut grads.embedding);
        let mut d_y: Array1<f32> = Array1::zeros(cfg.d_model);
        for (t, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let dl = dl as f32;
            for c in 0..cfg.d_model {
                out_grad[[t, c]] += dl * y[c];
                d_y[c] += dl * table[[t, c]];
            }
        }
        for c in 0..cfg.d_model {
            d_final[[i, c]] += d_y[c];
        }
    }
    model.backward(&cache, d_final, &mut grads)?;
    Ok((total, grads))
}

/// A saved model: parameters, optional Adam state, the step counter, and the
/// fingerprint of the hash scheme it was trained against.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub step: u64,
    pub scheme_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    scheme_fingerprint: String,
    step: u64,
    optimizer_t: u64,
    has_optimizer: bool,
    model: ModelConfig,
    arrays: Vec<(String, usize)>,
}

impl Checkpoint {
    /// Fails when the checkpoint was trained against a different scheme.
    pub fn verify_scheme(&self, scheme: &HashScheme) -> Result<()> {
        let fp = scheme.fingerprint();
        if fp != self.scheme_fingerprint {
            return Err(Error::Format(format!(
                "checkpoint was trained against scheme {}, got {}",
                self.scheme_fingerprint, fp
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays: Vec<(String, usize)> = self
            .model
            .params
            .param_slices()
            .into_iter()
            .map(|(n, s)| (n, s.len()))
            .collect();
        let manifest = CheckpointManifest {
            version: 1,
            scheme_fingerprint: self.scheme_fingerprint.clone(),
            step: self.step,
            optimizer_t: self.optimizer.as_ref().map_or(0, |o| o.t),
            has_optimizer: self.optimizer.is_some(),
            model: self.model.config.clone(),
            arrays,
        };
        let manifest_json = serde_json::to_string(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;

        let mut w = Writer::new();
        w.str(&manifest_json);
        for (_, slice) in self.model.params.param_slices() {
            w.f32_slice(slice);
        }
        if let Some(opt) = &self.optimizer {
            for (_, slice) in opt.first.param_slices() {
                w.f32_slice(slice);
            }
            for (_, slice) in opt.second.param_slices() {
                w.f32_slice(slice);
            }
        }
        util::write_framed(path, CHECKPOINT_MAGIC, &w.into_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = util::read_framed(path, CHECKPOINT_MAGIC)?;
        let mut r = Reader::new(&payload);
        let manifest: CheckpointManifest = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
        if manifest.version != 1 {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        manifest.model.validate()?;

        let read_params = |r: &mut Reader| -> Result<Parameters<f32>> {
            let mut params = Parameters::<f32>::zeros(&manifest.model);
            for ((name, slice), (want_name, want_len)) in
                params.param_slices_mut().into_iter().zip(&manifest.arrays)
            {
                if &name != want_name || slice.len() != *want_len {
                    return Err(Error::Format(format!(
                        "array layout mismatch: {name}({}) vs {want_name}({want_len})",
                        slice.len()
                    )));
                }
                slice.copy_from_slice(&r.f32_vec(*want_len)?);
            }
            Ok(params)
        };

        let params = read_params(&mut r)?;
        let optimizer = if manifest.has_optimizer {
            let first = read_params(&mut r)?;
            let second = read_params(&mut r)?;
            Some(AdamState {
                t: manifest.optimizer_t,
                first,
                second,
            })
        } else {
            None
        };
        r.finish()?;
        Ok(Checkpoint {
            model: Model {
                config: manifest.model,
                params,
            },
            optimizer,
            step: manifest.step,
            scheme_fingerprint: manifest.scheme_fingerprint,
        })
    }
}
