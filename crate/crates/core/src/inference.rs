//! Top-k ranking of the original vocabulary from hashed predictions.
//!
//! Given `m` per-function probability distributions for one masked position,
//! every entity `s` gets an aggregate score `gamma(s) = c(p_1(h_1(s)), ...,
//! p_m(h_m(s)))` for an increasing aggregator `c` (sum of logs by default).
//! [`exhaustive_rank`] scores the whole vocabulary and is the oracle;
//! [`beam_search`] expands only the entities behind the top hash tokens of
//! each function, using the inverse lookup tables, and stops early with a
//! certificate when the running k-th best score already dominates every
//! unscored entity.
//!
//! The certificate is sound for any increasing aggregator: an entity outside
//! the candidate set has every hashed probability strictly below the
//! per-function beam threshold, so its score cannot exceed `c` applied to the
//! thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::hashing::{EntityId, HashScheme};

/// Aggregator over the `m` hashed probabilities of an entity. All variants
/// are increasing: raising any coordinate never lowers the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFunction {
    /// Sum of logs; zero probabilities map to negative infinity, which orders
    /// below every finite score.
    LogSum,
    Min,
    Max,
}

impl ScoreFunction {
    pub fn evaluate(&self, probs: &[f64]) -> f64 {
        match self {
            ScoreFunction::LogSum => probs
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .sum(),
            ScoreFunction::Min => probs.iter().cloned().fold(f64::INFINITY, f64::min),
            ScoreFunction::Max => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "log_sum" => Ok(ScoreFunction::LogSum),
            "min" => Ok(ScoreFunction::Min),
            "max" => Ok(ScoreFunction::Max),
            other => Err(Error::InvalidArgument(format!(
                "unknown score function {other:?} (expected log_sum, min, or max)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreFunction::LogSum => "log_sum",
            ScoreFunction::Min => "min",
            ScoreFunction::Max => "max",
        }
    }
}

/// Beam-search knobs: tokens expanded per function per iteration, the
/// iteration cap, and how many results to return.
#[derive(Debug, Clone, Copy)]
pub struct BeamParams {
    pub beam_width: usize,
    pub max_iterations: usize,
    pub k: usize,
}

impl BeamParams {
    pub fn new(beam_width: usize, max_iterations: usize, k: usize) -> Result<Self> {
        if beam_width == 0 || max_iterations == 0 || k == 0 {
            return Err(Error::InvalidArgument(
                "beam width, iteration cap, and k must all be at least 1".into(),
            ));
        }
        Ok(BeamParams {
            beam_width,
            max_iterations,
            k,
        })
    }
}

/// Ranked entities with bookkeeping. `exact` certifies the items equal the
/// true global top-k (ties broken by ascending id).
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub items: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub exact: bool,
    pub candidates_scored: usize,
    pub iterations_used: usize,
}

fn check_prediction(probs: &[Vec<f64>], scheme: &HashScheme) -> Result<()> {
    if probs.len() != scheme.num_hashes() {
        return Err(Error::InvalidArgument(format!(
            "{} distributions for {} hash functions",
            probs.len(),
            scheme.num_hashes()
        )));
    }
    for (j, p) in probs.iter().enumerate() {
        if p.len() != scheme.hash_size() as usize {
            return Err(Error::InvalidArgument(format!(
                "distribution {j} has {} entries, hash_size is {}",
                p.len(),
                scheme.hash_size()
            )));
        }
    }
    Ok(())
}

/// Aggregate score of one entity under the given prediction.
pub fn gamma(
    score_fn: ScoreFunction,
    probs: &[Vec<f64>],
    scheme: &HashScheme,
    id: EntityId,
) -> Result<f64> {
    check_prediction(probs, scheme)?;
    let hashed: Vec<f64> = (0..scheme.num_hashes())
        .map(|j| Ok(probs[j][scheme.local_token(j, id)? as usize]))
        .collect::<Result<_>>()?;
    Ok(score_fn.evaluate(&hashed))
}

/// Keeps the k best (score, id) pairs, ordered by score descending then id
/// ascending.
struct TopK {
    k: usize,
    entries: Vec<(f64, EntityId)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    fn insert(&mut self, score: f64, id: EntityId) {
        let pos = self
            .entries
            .partition_point(|&(s, i)| s > score || (s == score && i < id));
        if pos < self.k {
            self.entries.insert(pos, (score, id));
            self.entries.truncate(self.k);
        }
    }

    fn kth_score(&self) -> Option<f64> {
        if self.entries.len() == self.k {
            Some(self.entries[self.k - 1].0)
        } else {
            None
        }
    }
}

/// Scores every entity; the O(N) oracle the beam search is checked against.
pub fn exhaustive_rank(
    score_fn: ScoreFunction,
    probs: &[Vec<f64>],
    scheme: &HashScheme,
    k: usize,
) -> Result<RankedResult> {
    check_prediction(probs, scheme)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = scheme.n_entities();
    let mut top = TopK::new(k.min(n as usize));
    for id in 0..n {
        let hashed: Vec<f64> = (0..scheme.num_hashes())
            .map(|j| probs[j][scheme.function(j).token_of(id) as usize])
            .collect();
        top.insert(score_fn.evaluate(&hashed), id);
    }
    Ok(RankedResult {
        items: top.entries.iter().map(|&(_, id)| id).collect(),
        scores: top.entries.iter().map(|&(s, _)| s).collect(),
        exact: true,
        candidates_scored: n as usize,
        iterations_used: 0,
    })
}

/// Iterative beam search over hash tokens.
///
/// At iteration `i` the beam covers the top `i*B` tokens of every function
/// (plus ties at the threshold); their inverse-lookup buckets form the
/// candidate set. New candidates are scored and folded into a running top-k.
/// The search stops with `exact = true` as soon as the k-th best running
/// score is at least `c` of the per-function thresholds — every unscored
/// entity is then dominated — or when the whole vocabulary has been scored.
/// Hitting the iteration cap first returns the best found with
/// `exact = false`.
pub fn beam_search(
    score_fn: ScoreFunction,
    probs: &[Vec<f64>],
    scheme: &HashScheme,
    params: BeamParams,
) -> Result<RankedResult> {
    check_prediction(probs, scheme)?;
    let n = scheme.n_entities() as usize;
    let m = scheme.num_hashes();
    let hash_size = scheme.hash_size() as usize;

    // Sort each function's tokens by probability descending, ties by token id.
    let sorted_tokens: Vec<Vec<u32>> = (0..m)
        .map(|j| {
            let mut order: Vec<u32> = (0..hash_size as u32).collect();
            order.sort_unstable_by(|&a, &b| {
                probs[j][b as usize]
                    .partial_cmp(&probs[j][a as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();

    let mut visited = vec![false; n];
    let mut consumed = vec![0usize; m];
    let mut top = TopK::new(params.k.min(n));
    let mut candidates_scored = 0usize;
    let mut iterations_used = 0usize;
    let mut exact = false;

    'outer: for iter in 1..=params.max_iterations {
        iterations_used = iter;
        let b = (iter * params.beam_width).min(hash_size);

        // Per-function threshold: the b-th largest probability.
        let thresholds: Vec<f64> = (0..m)
            .map(|j| probs[j][sorted_tokens[j][b - 1] as usize])
            .collect();

        // Expand every token at or above the threshold (ties included) and
        // score the entities in its bucket.
        for j in 0..m {
            while consumed[j] < hash_size {
                let token = sorted_tokens[j][consumed[j]];
                if probs[j][token as usize] < thresholds[j] {
                    break;
                }
                for &id in scheme.inverse_lookup(j, token)? {
                    if !visited[id as usize] {
                        visited[id as usize] = true;
                        let hashed: Vec<f64> = (0..m)
                            .map(|jj| probs[jj][scheme.function(jj).token_of(id) as usize])
                            .collect();
                        top.insert(score_fn.evaluate(&hashed), id);
                        candidates_scored += 1;
                    }
                }
                consumed[j] += 1;
            }
        }

        if candidates_scored >= n {
            exact = true;
            break 'outer;
        }
        let bound = score_fn.evaluate(&thresholds);
        if let Some(kth) = top.kth_score() {
            if kth >= bound {
                exact = true;
                break 'outer;
            }
        }
    }

    Ok(RankedResult {
        items: top.entries.iter().map(|&(_, id)| id).collect(),
        scores: top.entries.iter().map(|&(s, _)| s).collect(),
        exact,
        candidates_scored,
        iterations_used,
    })
}

/// Brute-force audit of a beam-search certificate: when `exact` is claimed,
/// no entity outside the returned items may outscore the k-th item (ties
/// resolved by ascending id). Results without a certificate pass vacuously.
pub fn certificate_check(
    result: &RankedResult,
    probs: &[Vec<f64>],
    scheme: &HashScheme,
    score_fn: ScoreFunction,
) -> Result<bool> {
    if !result.exact {
        return Ok(true);
    }
    let Some((&kth_score, &kth_id)) = result.scores.last().zip(result.items.last()) else {
        return Ok(false);
    };
    for id in 0..scheme.n_entities() {
        if result.items.contains(&id) {
            continue;
        }
        let score = gamma(score_fn, probs, scheme, id)?;
        if score > kth_score || (score == kth_score && id < kth_id) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Synthetic per-function distributions for benchmarks and randomized tests:
/// softmax of `sharpness`-scaled standard normals, so higher sharpness gives
/// more peaked distributions.
pub fn random_prediction(
    num_hashes: usize,
    hash_size: usize,
    sharpness: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..num_hashes)
        .map(|_| {
            let logits: Vec<f64> = (0..hash_size)
                .map(|_| {
                    // Box-Muller from two uniforms keeps this free of
                    // distribution-crate coupling in hot bench loops.
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * sharpness
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for e in exps.iter_mut() {
                *e /= sum;
            }
            exps
        })
        .collect()
}
