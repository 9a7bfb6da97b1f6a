//! Recall metrics and desk-scale experiment harnesses.
//!
//! Evaluation queries are masked examples with one held-out entity; the
//! model's per-function distributions are aggregated by beam search and
//! the held-out entity's rank gives recall@k. Harnesses reproduce the
//! qualitative studies at desk scale: recall by frequency decile,
//! beam-width sweeps, the depth-vs-hashing comparison, and random-versus-
//! coherent hashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::{self, MaskedExample, Page};
use crate::error::{Error, Result};
use crate::hashing::{
    build_coherent_function, build_random_scheme, HashScheme, VocabSpec,
};
use crate::inference::{beam_search, BeamParams, RankedResult, ScoreFunction};
use crate::training::{self, DataSource, LossMode, TrainConfig};
use crate::transformer::{Model, ModelConfig};

/// Recall report for one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub examples: usize,
    pub rec1: f64,
    pub rec10: f64,
    pub rec20: f64,
    /// Mean rec@1 per frequency decile, most frequent first; `None` for
    /// deciles no query fell into.
    pub per_decile_rec1: Vec<Option<f64>>,
    pub config_fingerprint: String,
}

/// Ranked results plus ground truth, one entry per masked position.
pub struct RankOutcome {
    pub results: Vec<RankedResult>,
    pub truths: Vec<u32>,
    /// Fraction of (position, hash function) pairs where the argmax local
    /// token equals the true entity's token, averaged over functions.
    pub token_rec1: f64,
}

/// Runs the model over masked examples and ranks the vocabulary for every
/// masked position.
pub fn rank_examples(
    model: &Model<f32>,
    scheme: &HashScheme,
    examples: &[MaskedExample],
    score_fn: ScoreFunction,
    beam: BeamParams,
) -> Result<RankOutcome> {
    let mut results = Vec::new();
    let mut truths = Vec::new();
    let mut token_hits = 0usize;
    let mut token_total = 0usize;
    for ex in examples {
        let padded = training::pad_example(ex, scheme, model.config.seq_len)?;
        let cache = model.forward(&padded.tokens, padded.n_valid)?;
        let pred = model.predict(&cache, &padded.target_positions)?;
        for (k, probs) in pred.probs.iter().enumerate() {
            for (j, dist) in probs.iter().enumerate() {
                let argmax = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u32;
                if argmax == ex.targets[k][j] {
                    token_hits += 1;
                }
                token_total += 1;
            }
            results.push(beam_search(score_fn, probs, scheme, beam)?);
            truths.push(ex.original_ids[k]);
        }
    }
    Ok(RankOutcome {
        results,
        truths,
        token_rec1: token_hits as f64 / token_total.max(1) as f64,
    })
}

/// Fraction of queries whose truth appears in the top-k items.
pub fn recall_at_k(results: &[RankedResult], truths: &[u32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if results.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} results for {} truths",
            results.len(),
            truths.len()
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(truths)
        .filter(|(r, t)| r.items.iter().take(k).any(|i| i == *t))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean rec@1 per label-frequency decile (most frequent decile first).
/// Deciles partition the entities by training-set frequency rank; empty
/// deciles report `None` rather than zero.
pub fn frequency_bucket_recall(
    results: &[RankedResult],
    truths: &[u32],
    train_frequencies: &[u64],
) -> Result<Vec<Option<f64>>> {
    if results.len() != truths.len() {
        return Err(Error::InvalidArgument("results/truths length mismatch".into()));
    }
    let n = train_frequencies.len();
    if let Some(&t) = truths.iter().find(|&&t| t as usize >= n) {
        return Err(Error::InvalidArgument(format!(
            "truth {t} has no frequency entry"
        )));
    }
    // Rank entities by frequency descending, id ascending; decile of an
    // entity is rank * 10 / n.
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        train_frequencies[b as usize]
            .cmp(&train_frequencies[a as usize])
            .then(a.cmp(&b))
    });
    let mut decile_of = vec![0usize; n];
    for (rank, &id) in order.iter().enumerate() {
        decile_of[id as usize] = (rank * 10 / n).min(9);
    }
    let mut hits = vec![0usize; 10];
    let mut totals = vec![0usize; 10];
    for (r, &t) in results.iter().zip(truths) {
        let d = decile_of[t as usize];
        totals[d] += 1;
        if r.items.first() == Some(&t) {
            hits[d] += 1;
        }
    }
    Ok((0..10)
        .map(|d| {
            if totals[d] == 0 {
                None
            } else {
                Some(hits[d] as f64 / totals[d] as f64)
            }
        })
        .collect())
}

/// Full evaluation: recall at 1/10/20 plus per-decile rec@1 when training
/// frequencies are supplied.
pub fn evaluate(
    model: &Model<f32>,
    scheme: &HashScheme,
    examples: &[MaskedExample],
    score_fn: ScoreFunction,
    beam: BeamParams,
    train_frequencies: Option<&[u64]>,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let outcome = rank_examples(model, scheme, examples, score_fn, beam)?;
    let per_decile = match train_frequencies {
        Some(freqs) => frequency_bucket_recall(&outcome.results, &outcome.truths, freqs)?,
        None => vec![None; 10],
    };
    Ok(EvalReport {
        examples: outcome.results.len(),
        rec1: recall_at_k(&outcome.results, &outcome.truths, 1)?,
        rec10: recall_at_k(&outcome.results, &outcome.truths, 10)?,
        rec20: recall_at_k(&outcome.results, &outcome.truths, 20)?,
        per_decile_rec1: per_decile,
        config_fingerprint: config_fingerprint.to_string(),
    })
}

/// One row of a beam-width sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub beam_width: usize,
    /// (k, rec@k) pairs in ascending k.
    pub recalls: Vec<(usize, f64)>,
}

/// Evaluates the same examples at several beam widths (one iteration each,
/// matching how inference is run in practice).
pub fn beam_width_sweep(
    model: &Model<f32>,
    scheme: &HashScheme,
    examples: &[MaskedExample],
    widths: &[usize],
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &b in widths {
        let beam = BeamParams::new(b, 1, ks.iter().copied().max().unwrap_or(1))?;
        let outcome = rank_examples(model, scheme, examples, ScoreFunction::LogSum, beam)?;
        let recalls = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(&outcome.results, &outcome.truths, k)?)))
            .collect::<Result<_>>()?;
        rows.push(SweepRow {
            beam_width: b,
            recalls,
        });
    }
    Ok(rows)
}

/// Shared sizing for the training harnesses below.
#[derive(Debug, Clone)]
pub struct HarnessParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub init_lr: f64,
    pub warmup_steps: u64,
    pub eval_examples: usize,
    pub eval_beam: usize,
}

impl Default for HarnessParams {
    fn default() -> Self {
        HarnessParams {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            seq_len: 16,
            steps: 1500,
            batch_size: 16,
            init_lr: 2e-3,
            warmup_steps: 100,
            eval_examples: 400,
            eval_beam: 20,
        }
    }
}

/// Builds one eval example per test page (cycling when more examples than
/// pages are requested).
pub fn eval_examples_from_pages(
    pages: &[Page],
    scheme: &HashScheme,
    seq_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MaskedExample>> {
    if pages.is_empty() {
        return Err(Error::InvalidArgument("no pages to evaluate on".into()));
    }
    (0..count)
        .map(|i| {
            let mut rng =
                ChaCha20Rng::seed_from_u64(crate::util::mix_seed(seed, i as u64, 0xE7A1));
            let page = &pages[rng.random_range(0..pages.len())];
            let segment = corpus::cut_segment(page, seq_len, rng.random())?;
            corpus::make_eval_example(&segment, scheme, rng.random())
        })
        .collect()
}

fn harness_train_config(params: &HarnessParams, steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: params.batch_size,
        init_lr: params.init_lr,
        warmup_steps: params.warmup_steps.min(steps.max(1)),
        total_steps: steps,
        seed,
        eval_every: 0,
        checkpoint_every: 0,
        loss_mode: LossMode::FullSoftmax,
        eval_beam: params.eval_beam,
        ..TrainConfig::default()
    }
}

/// Trains one model on the train split and reports rec@1 plus token rec@1 on
/// held-out eval examples.
pub fn train_and_score(
    scheme: &HashScheme,
    train_pages: &[Page],
    eval: &[MaskedExample],
    layers: usize,
    params: &HarnessParams,
    seed: u64,
) -> Result<(Model<f32>, f64, f64)> {
    let config = ModelConfig::for_scheme(
        scheme,
        params.d_model,
        params.n_heads,
        params.d_ff,
        layers,
        params.seq_len,
    );
    let model = Model::init(config, seed)?;
    let cfg = harness_train_config(params, params.steps, seed);
    let data = DataSource::Pages {
        pages: train_pages,
        n_max: params.seq_len,
    };
    let result = training::train(model, &data, scheme, &cfg, &[], None)?;
    let beam = BeamParams::new(params.eval_beam, 1, 20)?;
    let outcome = rank_examples(&result.model, scheme, eval, ScoreFunction::LogSum, beam)?;
    let rec1 = recall_at_k(&outcome.results, &outcome.truths, 1)?;
    Ok((result.model, rec1, outcome.token_rec1))
}

/// One depth-study run: a scheme variant at a given depth.
#[derive(Debug, Clone)]
pub struct DepthStudyRow {
    pub hashed: bool,
    pub layers: usize,
    pub seed: u64,
    pub rec1: f64,
}

/// Trains hashed (m=2, given alpha) and unhashed (m=1, alpha=1) models at
/// one and `deep_layers` layers, per seed, on the same corpus split with a
/// matched step budget.
#[allow(clippy::too_many_arguments)]
pub fn depth_study(
    pages: &[Page],
    n_entities: u32,
    alpha: u32,
    deep_layers: usize,
    params: &HarnessParams,
    seeds: &[u64],
    test_frac: f64,
    split_seed: u64,
) -> Result<Vec<DepthStudyRow>> {
    let (train_pages, test_pages) = corpus::split_train_test(pages, test_frac, split_seed);
    let spec = VocabSpec::new(n_entities, &[corpus::MASK_NAME, corpus::PAD_NAME])?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (hashed, m, a) in [(false, 1usize, 1u32), (true, 2, alpha)] {
            let scheme = build_random_scheme(&spec, m, a, seed ^ 0xD5)?;
            let eval = eval_examples_from_pages(
                &test_pages,
                &scheme,
                params.seq_len,
                params.eval_examples,
                seed ^ 0xE7,
            )?;
            for layers in [1usize, deep_layers] {
                let (_, rec1, _) =
                    train_and_score(&scheme, &train_pages, &eval, layers, params, seed)?;
                rows.push(DepthStudyRow {
                    hashed,
                    layers,
                    seed,
                    rec1,
                });
            }
        }
    }
    Ok(rows)
}

/// Scheme construction for the hashing comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeVariant {
    RandomRandom,
    RandomCoherent,
    CoherentCoherent,
}

impl SchemeVariant {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeVariant::RandomRandom => "random+random",
            SchemeVariant::RandomCoherent => "random+coherent",
            SchemeVariant::CoherentCoherent => "coherent+coherent",
        }
    }
}

/// Builds a two-function scheme of the given variant. Coherent functions
/// use the supplied embeddings and are constrained by every previously
/// built function, so complete collisions stay impossible.
pub fn build_variant_scheme(
    variant: SchemeVariant,
    spec: &VocabSpec,
    alpha: u32,
    embeddings: &[Vec<f64>],
    frequencies: &[f64],
    seed: u64,
) -> Result<HashScheme> {
    match variant {
        SchemeVariant::RandomRandom => build_random_scheme(spec, 2, alpha, seed),
        SchemeVariant::RandomCoherent => {
            let first = crate::hashing::build_random_function(spec.n_entities, alpha, seed)?;
            let second = build_coherent_function(embeddings, frequencies, alpha, &[&first])?;
            HashScheme::from_functions(
                spec.n_entities,
                alpha,
                vec![first, second],
                spec.specials.clone(),
            )
        }
        SchemeVariant::CoherentCoherent => {
            let first = build_coherent_function(embeddings, frequencies, alpha, &[])?;
            let second = build_coherent_function(embeddings, frequencies, alpha, &[&first])?;
            HashScheme::from_functions(
                spec.n_entities,
                alpha,
                vec![first, second],
                spec.specials.clone(),
            )
        }
    }
}

/// Cluster-structured embeddings for coherent construction at desk scale:
/// each entity gets its cluster's centroid plus uniform noise, so embedding
/// similarity mirrors a planted co-occurrence structure. Stands in for the
/// externally supplied factorization embeddings.
pub fn planted_embeddings(
    n_entities: u32,
    clusters: u32,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(clusters as usize);
    for c in 0..clusters {
        let mut rng =
            ChaCha20Rng::seed_from_u64(crate::util::mix_seed(seed, c as u64, 0xCE));
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        centroids.push(v.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    (0..n_entities)
        .map(|e| {
            let mut rng =
                ChaCha20Rng::seed_from_u64(crate::util::mix_seed(seed, e as u64, 0xEB));
            let c = &centroids[(e % clusters) as usize];
            c.iter()
                .map(|x| x + noise * (rng.random::<f64>() - 0.5))
                .collect()
        })
        .collect()
}

/// Per-variant outcome of the hashing comparison.
#[derive(Debug, Clone)]
pub struct HashComparisonReport {
    pub variant: SchemeVariant,
    pub seed: u64,
    pub token_rec1: f64,
    pub entity_rec1: f64,
}

/// Trains matched models over random/coherent scheme variants and reports
/// token and entity rec@1. Embeddings for the coherent construction are an
/// external input.
#[allow(clippy::too_many_arguments)]
pub fn hashing_comparison(
    pages: &[Page],
    n_entities: u32,
    alpha: u32,
    embeddings: &[Vec<f64>],
    variants: &[SchemeVariant],
    params: &HarnessParams,
    seeds: &[u64],
    test_frac: f64,
    split_seed: u64,
    layers: usize,
) -> Result<Vec<HashComparisonReport>> {
    let (train_pages, test_pages) = corpus::split_train_test(pages, test_frac, split_seed);
    let frequencies: Vec<f64> = corpus::entity_frequencies(&train_pages, n_entities)
        .into_iter()
        .map(|c| c as f64)
        .collect();
    let spec = VocabSpec::new(n_entities, &[corpus::MASK_NAME, corpus::PAD_NAME])?;
    let mut reports = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let scheme =
                build_variant_scheme(variant, &spec, alpha, embeddings, &frequencies, seed ^ 0xC0)?;
            let eval = eval_examples_from_pages(
                &test_pages,
                &scheme,
                params.seq_len,
                params.eval_examples,
                seed ^ 0xE7,
            )?;
            let (_, entity_rec1, token_rec1) =
                train_and_score(&scheme, &train_pages, &eval, layers, params, seed)?;
            reports.push(HashComparisonReport {
                variant,
                seed,
                token_rec1,
                entity_rec1,
            });
        }
    }
    Ok(reports)
}
