//! Corpus ingestion and masked-example generation.
//!
//! A corpus is a list of pages, each an ordered list of entity ids. Training
//! examples are cut as random contiguous segments (up to a maximum length),
//! 15% of positions are selected as prediction targets, and each selected
//! position is perturbed the way BERT perturbs masked words: replaced by the
//! MASK tokens with probability 0.8, by a random entity's tokens with 0.1,
//! or left unchanged with 0.1. Perturbation is per entity: all `m` hash
//! tokens of a position always come from the same source.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::hashing::{EntityId, GlobalTokenId, HashScheme, LocalTokenId};
use crate::util::{self, Reader, Writer};

pub const MASK_NAME: &str = "MASK";
pub const PAD_NAME: &str = "PAD";

const CACHE_MAGIC: &[u8; 8] = b"SBDATA01";

/// One corpus page: an ordered entity-id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub entities: Vec<EntityId>,
}

/// A hashed training or evaluation example.
///
/// `input_tokens` is the Bloom digest of the (possibly perturbed) segment,
/// laid out position-major: tokens `i*m..(i+1)*m` belong to segment position
/// `i`. Targets are the true entities' local hash tokens, recorded per masked
/// position regardless of how the input was perturbed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_tokens: Vec<GlobalTokenId>,
    pub target_positions: Vec<usize>,
    /// `targets[k][j]` is the local token of the k-th masked entity under
    /// hash function `j`.
    pub targets: Vec<Vec<LocalTokenId>>,
    pub original_ids: Vec<EntityId>,
}

impl MaskedExample {
    /// Segment length in entities.
    pub fn len(&self, num_hashes: usize) -> usize {
        self.input_tokens.len() / num_hashes
    }
}

/// Parses a corpus file: one page per line, whitespace-separated entity ids.
pub fn load_corpus(path: &Path) -> Result<Vec<Page>> {
    let file = File::open(path)?;
    let mut pages = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entities = Vec::new();
        for field in line.split_whitespace() {
            let id: u32 = field.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("expected a non-negative integer entity id, got {field:?}"),
            })?;
            entities.push(id);
        }
        pages.push(Page { entities });
    }
    Ok(pages)
}

pub fn save_corpus(pages: &[Page], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for page in pages {
        let line: Vec<String> = page.entities.iter().map(|e| e.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Splits pages into disjoint train and test sets, deterministically in
/// `seed`. The test set holds `round(test_frac * len)` pages.
pub fn split_train_test(pages: &[Page], test_frac: f64, seed: u64) -> (Vec<Page>, Vec<Page>) {
    let mut order: Vec<usize> = (0..pages.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(util::mix_seed(seed, 0x5911, 0));
    order.shuffle(&mut rng);
    let n_test = ((pages.len() as f64) * test_frac).round() as usize;
    let n_test = n_test.min(pages.len());
    let test: Vec<Page> = order[..n_test].iter().map(|&i| pages[i].clone()).collect();
    let train: Vec<Page> = order[n_test..].iter().map(|&i| pages[i].clone()).collect();
    (train, test)
}

/// Cuts a uniformly-placed contiguous segment of length `min(n_max, |page|)`.
pub fn cut_segment(page: &Page, n_max: usize, seed: u64) -> Result<Vec<EntityId>> {
    if page.entities.is_empty() {
        return Err(Error::InvalidArgument("cannot cut a segment from an empty page".into()));
    }
    let len = page.entities.len().min(n_max);
    let starts = page.entities.len() - len + 1;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start = rng.random_range(0..starts);
    Ok(page.entities[start..start + len].to_vec())
}

/// Number of masked positions for a segment of length `n` at `mask_rate`:
/// nearest integer, at least one.
pub fn masked_count(n: usize, mask_rate: f64) -> usize {
    ((n as f64 * mask_rate).round() as usize).max(1)
}

fn true_targets(segment: &[EntityId], scheme: &HashScheme, i: usize) -> Result<Vec<LocalTokenId>> {
    (0..scheme.num_hashes())
        .map(|j| scheme.local_token(j, segment[i]))
        .collect()
}

/// Builds a training example: selects `max(1, round(mask_rate * n))` target
/// positions without replacement, perturbs each with the 0.8 / 0.1 / 0.1
/// MASK / random-entity / unchanged split, and records the true entities'
/// hash tokens as targets.
pub fn make_masked_example(
    segment: &[EntityId],
    scheme: &HashScheme,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedExample> {
    if segment.is_empty() {
        return Err(Error::InvalidArgument("empty segment".into()));
    }
    let mask_idx = scheme
        .special_index(MASK_NAME)
        .ok_or_else(|| Error::InvalidArgument("scheme has no MASK special".into()))?;
    let mask_tokens = scheme.special_tokens(mask_idx)?;

    let n = segment.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    let mut selected: Vec<usize> = positions[..masked_count(n, mask_rate)].to_vec();
    selected.sort_unstable();

    let mut input_tokens = Vec::with_capacity(n * scheme.num_hashes());
    for &id in segment {
        input_tokens.extend(scheme.hash_entity(id)?);
    }

    let mut targets = Vec::with_capacity(selected.len());
    let mut original_ids = Vec::with_capacity(selected.len());
    for &i in &selected {
        targets.push(true_targets(segment, scheme, i)?);
        original_ids.push(segment[i]);

        let roll: f64 = rng.random();
        let replacement = if roll < 0.8 {
            Some(mask_tokens.clone())
        } else if roll < 0.9 {
            let random_id = rng.random_range(0..scheme.n_entities());
            Some(scheme.hash_entity(random_id)?)
        } else {
            None // left unchanged
        };
        if let Some(tokens) = replacement {
            let m = scheme.num_hashes();
            input_tokens[i * m..(i + 1) * m].copy_from_slice(&tokens);
        }
    }

    Ok(MaskedExample {
        input_tokens,
        target_positions: selected,
        targets,
        original_ids,
    })
}

/// Builds an evaluation example: exactly one uniformly-chosen position is
/// held out and always replaced by the MASK tokens.
pub fn make_eval_example(
    segment: &[EntityId],
    scheme: &HashScheme,
    seed: u64,
) -> Result<MaskedExample> {
    if segment.is_empty() {
        return Err(Error::InvalidArgument("empty segment".into()));
    }
    let mask_idx = scheme
        .special_index(MASK_NAME)
        .ok_or_else(|| Error::InvalidArgument("scheme has no MASK special".into()))?;
    let mask_tokens = scheme.special_tokens(mask_idx)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let i = rng.random_range(0..segment.len());

    let mut input_tokens = Vec::with_capacity(segment.len() * scheme.num_hashes());
    for &id in segment {
        input_tokens.extend(scheme.hash_entity(id)?);
    }
    let m = scheme.num_hashes();
    input_tokens[i * m..(i + 1) * m].copy_from_slice(&mask_tokens);

    Ok(MaskedExample {
        input_tokens,
        target_positions: vec![i],
        targets: vec![true_targets(segment, scheme, i)?],
        original_ids: vec![segment[i]],
    })
}

/// Materializes examples to a versioned, checksummed binary cache bound to a
/// scheme fingerprint.
pub fn save_examples(
    examples: &[MaskedExample],
    scheme_fingerprint: &str,
    num_hashes: usize,
    path: &Path,
) -> Result<()> {
    let mut w = Writer::new();
    w.str(scheme_fingerprint);
    w.u32(num_hashes as u32);
    w.u32(examples.len() as u32);
    for ex in examples {
        w.u32(ex.input_tokens.len() as u32);
        w.u32_slice(&ex.input_tokens);
        w.u32(ex.target_positions.len() as u32);
        for &p in &ex.target_positions {
            w.u32(p as u32);
        }
        for t in &ex.targets {
            w.u32_slice(t);
        }
        w.u32_slice(&ex.original_ids);
    }
    util::write_framed(path, CACHE_MAGIC, &w.into_bytes())
}

/// Loads a cache written by [`save_examples`], returning the examples and
/// the scheme fingerprint they were built against.
pub fn load_examples(path: &Path) -> Result<(Vec<MaskedExample>, String)> {
    let payload = util::read_framed(path, CACHE_MAGIC)?;
    let mut r = Reader::new(&payload);
    let fingerprint = r.str()?;
    let num_hashes = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let n_tokens = r.u32()? as usize;
        let input_tokens = r.u32_vec(n_tokens)?;
        let n_masked = r.u32()? as usize;
        let mut target_positions = Vec::with_capacity(n_masked);
        for _ in 0..n_masked {
            target_positions.push(r.u32()? as usize);
        }
        let mut targets = Vec::with_capacity(n_masked);
        for _ in 0..n_masked {
            targets.push(r.u32_vec(num_hashes)?);
        }
        let original_ids = r.u32_vec(n_masked)?;
        examples.push(MaskedExample {
            input_tokens,
            target_positions,
            targets,
            original_ids,
        });
    }
    r.finish()?;
    Ok((examples, fingerprint))
}

/// Parameters of the synthetic corpus generator.
///
/// Entities follow a Zipf frequency profile and are spread round-robin over
/// planted co-occurrence clusters; every page samples its entities from a
/// single cluster, so a held-out entity is predictable from its neighbors.
///
/// In `paired` mode the cluster members form fixed partner pairs and pages
/// always contain both halves of every sampled pair. A held-out entity is
/// then identified exactly by the partner left behind in the context, which
/// gives the prediction task a signal beyond bare frequency.
#[derive(Debug, Clone)]
pub struct SyntheticParams {
    pub n_entities: u32,
    pub n_pages: usize,
    pub n_clusters: u32,
    pub zipf_exponent: f64,
    pub min_page_len: usize,
    pub max_page_len: usize,
    pub paired: bool,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_entities: 10_000,
            n_pages: 2_000,
            n_clusters: 50,
            zipf_exponent: 1.0,
            min_page_len: 20,
            max_page_len: 40,
            paired: false,
            seed: 0,
        }
    }
}

/// Partner of `id` under the paired-corpus bijection: cluster members pair
/// up by adjacent local index (the `2t`-th member with the `2t+1`-th).
pub fn paired_partner(id: EntityId, n_entities: u32, n_clusters: u32) -> EntityId {
    let local = id / n_clusters;
    let partner_local = if local % 2 == 0 { local + 1 } else { local - 1 };
    let partner = partner_local * n_clusters + id % n_clusters;
    if partner < n_entities {
        partner
    } else {
        id // unpaired tail member of an odd-sized cluster
    }
}

/// Samples an index from `weights` proportionally via a precomputed
/// cumulative sum.
fn sample_cumulative(cumulative: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let total = *cumulative.last().unwrap();
    let x: f64 = rng.random_range(0.0..total);
    match cumulative.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
        Ok(i) => i + 1,
        Err(i) => i,
    }
    .min(cumulative.len() - 1)
}

/// Generates a deterministic synthetic corpus with planted cluster structure.
pub fn generate_synthetic_corpus(params: &SyntheticParams) -> Result<Vec<Page>> {
    let n = params.n_entities as usize;
    let k = params.n_clusters as usize;
    if n == 0 || k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= clusters <= entities, got {k} clusters over {n} entities"
        )));
    }
    if params.min_page_len == 0 || params.min_page_len > params.max_page_len {
        return Err(Error::InvalidArgument("bad page length range".into()));
    }

    // Entity id doubles as global frequency rank; weight 1/(id+1)^s.
    // Cluster of entity e is e % k, so every cluster spans the frequency range.
    let weight = |id: usize| 1.0 / ((id + 1) as f64).powf(params.zipf_exponent);
    let mut cluster_members: Vec<Vec<u32>> = vec![Vec::new(); k];
    for id in 0..n {
        cluster_members[id % k].push(id as u32);
    }
    let cluster_cumulative: Vec<Vec<f64>> = cluster_members
        .iter()
        .map(|members| {
            let mut acc = 0.0;
            members
                .iter()
                .map(|&id| {
                    acc += weight(id as usize);
                    acc
                })
                .collect()
        })
        .collect();
    let mut global_cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for id in 0..n {
        acc += weight(id);
        global_cumulative.push(acc);
    }

    let mut pages = Vec::with_capacity(params.n_pages);
    for page_idx in 0..params.n_pages {
        let mut rng =
            ChaCha20Rng::seed_from_u64(util::mix_seed(params.seed, page_idx as u64, 0xC0DE));
        // The page's cluster is the cluster of a global Zipf draw, so cluster
        // usage follows the same frequency profile as the entities.
        let first = sample_cumulative(&global_cumulative, &mut rng) as u32;
        let cluster = (first as usize) % k;
        let len = rng.random_range(params.min_page_len..=params.max_page_len);
        let mut entities = Vec::with_capacity(len + 1);
        if params.paired {
            // Pairs sit adjacent so segment cuts rarely split them; the
            // model treats the segment as a set either way.
            entities.push(first);
            entities.push(paired_partner(first, params.n_entities, params.n_clusters));
            while entities.len() < len {
                let pick = sample_cumulative(&cluster_cumulative[cluster], &mut rng);
                let e = cluster_members[cluster][pick];
                entities.push(e);
                entities.push(paired_partner(e, params.n_entities, params.n_clusters));
            }
        } else {
            entities.push(first);
            while entities.len() < len {
                let pick = sample_cumulative(&cluster_cumulative[cluster], &mut rng);
                entities.push(cluster_members[cluster][pick]);
            }
        }
        pages.push(Page { entities });
    }
    Ok(pages)
}

/// Entity occurrence counts over a page set.
pub fn entity_frequencies(pages: &[Page], n_entities: u32) -> Vec<u64> {
    let mut counts = vec![0u64; n_entities as usize];
    for page in pages {
        for &e in &page.entities {
            counts[e as usize] += 1;
        }
    }
    counts
}
