//! Multi-hash vocabulary schemes.
//!
//! A scheme maps each of `N` entity ids to `m` hash tokens drawn from a much
//! smaller token space (one disjoint block of `hash_size` tokens per hash
//! function), the way a Bloom filter maps a key to several bit positions.
//! Buckets are evenly sized (`alpha` entities per token, off by at most one
//! when `alpha` does not divide `N`), no two entities collide under every
//! function at once, and special tokens such as `MASK` get dedicated
//! collision-free tokens in a trailing block.
//!
//! Random schemes are built by chunking a seeded permutation of the
//! vocabulary; coherent hash functions group embedding-similar entities into
//! the same bucket instead.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::util::{self, Reader, Writer};

pub type EntityId = u32;
/// Token id local to one hash function, in `0..hash_size`.
pub type LocalTokenId = u32;
/// Token id in the combined embedding table: function `j` occupies block
/// `j*hash_size..(j+1)*hash_size`, specials follow in a trailing block.
pub type GlobalTokenId = u32;

const SCHEME_MAGIC: &[u8; 8] = b"SBSCHM01";
const REDRAW_ATTEMPTS: u64 = 64;

/// Vocabulary description: `n_entities` ordinary ids plus named specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabSpec {
    pub n_entities: u32,
    pub specials: Vec<String>,
}

impl VocabSpec {
    pub fn new(n_entities: u32, specials: &[&str]) -> Result<Self> {
        let spec = VocabSpec {
            n_entities,
            specials: specials.iter().map(|s| s.to_string()).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.n_entities == 0 {
            return Err(Error::InvalidArgument("vocabulary must be non-empty".into()));
        }
        for (i, a) in self.specials.iter().enumerate() {
            if self.specials[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate special token name {a:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One hash function: a forward array over entity ids plus its inverse
/// buckets (each sorted ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashFunction {
    forward: Vec<LocalTokenId>,
    inverse: Vec<Vec<EntityId>>,
}

impl HashFunction {
    /// Builds the inverse table from a forward array. Tokens must lie in
    /// `0..hash_size`.
    pub fn from_forward(forward: Vec<LocalTokenId>, hash_size: u32) -> Result<Self> {
        let mut inverse = vec![Vec::new(); hash_size as usize];
        for (id, &token) in forward.iter().enumerate() {
            if token >= hash_size {
                return Err(Error::InvalidArgument(format!(
                    "entity {id} maps to token {token}, outside 0..{hash_size}"
                )));
            }
            inverse[token as usize].push(id as EntityId);
        }
        // Push order is ascending id order already, but keep the contract explicit.
        for bucket in &mut inverse {
            bucket.sort_unstable();
        }
        Ok(HashFunction { forward, inverse })
    }

    pub fn token_of(&self, id: EntityId) -> LocalTokenId {
        self.forward[id as usize]
    }

    pub fn forward(&self) -> &[LocalTokenId] {
        &self.forward
    }

    pub fn bucket(&self, token: LocalTokenId) -> &[EntityId] {
        &self.inverse[token as usize]
    }

    pub fn n_buckets(&self) -> usize {
        self.inverse.len()
    }
}

/// An m-function hash scheme over a vocabulary, immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashScheme {
    n_entities: u32,
    num_hashes: usize,
    alpha: u32,
    hash_size: u32,
    functions: Vec<HashFunction>,
    specials: Vec<String>,
}

/// Buckets per function for `n` entities at collision factor `alpha`.
pub fn hash_size_for(n_entities: u32, alpha: u32) -> u32 {
    n_entities.div_ceil(alpha)
}

impl HashScheme {
    /// Assembles and validates a scheme from prebuilt hash functions.
    ///
    /// Checks the partition and round-trip properties, bucket evenness (a
    /// single short trailing bucket is tolerated, which coherent construction
    /// can produce when `alpha` does not divide `N`), and the absence of
    /// complete collisions.
    pub fn from_functions(
        n_entities: u32,
        alpha: u32,
        functions: Vec<HashFunction>,
        specials: Vec<String>,
    ) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::InvalidArgument("need at least one hash function".into()));
        }
        let hash_size = hash_size_for(n_entities, alpha);
        let scheme = HashScheme {
            n_entities,
            num_hashes: functions.len(),
            alpha,
            hash_size,
            functions,
            specials,
        };
        VocabSpec {
            n_entities,
            specials: scheme.specials.clone(),
        }
        .validate()?;
        scheme.validate()?;
        Ok(scheme)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_entities as usize;
        for (j, f) in self.functions.iter().enumerate() {
            if f.forward.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "function {j}: forward array has length {}, expected {n}",
                    f.forward.len()
                )));
            }
            if f.n_buckets() != self.hash_size as usize {
                return Err(Error::InvalidArgument(format!(
                    "function {j}: {} buckets, expected {}",
                    f.n_buckets(),
                    self.hash_size
                )));
            }
            let mut seen = 0usize;
            let mut short_buckets = 0usize;
            for (t, bucket) in f.inverse.iter().enumerate() {
                seen += bucket.len();
                if bucket.len() > self.alpha as usize {
                    return Err(Error::InvalidArgument(format!(
                        "function {j}: bucket {t} has {} entities, alpha is {}",
                        bucket.len(),
                        self.alpha
                    )));
                }
                if (bucket.len() as u32) + 1 < self.alpha {
                    short_buckets += 1;
                }
            }
            if seen != n {
                return Err(Error::InvalidArgument(format!(
                    "function {j}: buckets cover {seen} ids, expected {n}"
                )));
            }
            if short_buckets > 1 {
                return Err(Error::InvalidArgument(format!(
                    "function {j}: {short_buckets} buckets fall below alpha-1"
                )));
            }
        }
        let forwards: Vec<Vec<LocalTokenId>> =
            self.functions.iter().map(|f| f.forward.clone()).collect();
        if let Some(&(a, b)) = complete_collision_pairs(&forwards, self.n_entities).first() {
            return Err(Error::InfeasibleScheme(format!(
                "entities {a} and {b} collide under every hash function"
            )));
        }
        Ok(())
    }

    pub fn n_entities(&self) -> u32 {
        self.n_entities
    }

    /// Number of hash functions (`m`).
    pub fn num_hashes(&self) -> usize {
        self.num_hashes
    }

    /// Collisions per bucket.
    pub fn alpha(&self) -> u32 {
        self.alpha
    }

    /// Tokens per hash function.
    pub fn hash_size(&self) -> u32 {
        self.hash_size
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    /// Total ordinary tokens across all functions.
    pub fn ordinary_tokens(&self) -> u32 {
        self.num_hashes as u32 * self.hash_size
    }

    /// Ordinary tokens plus the trailing special block.
    pub fn total_tokens(&self) -> u32 {
        self.ordinary_tokens() + (self.num_hashes * self.specials.len()) as u32
    }

    pub fn function(&self, j: usize) -> &HashFunction {
        &self.functions[j]
    }

    /// Local token of `id` under function `j`.
    pub fn local_token(&self, j: usize, id: EntityId) -> Result<LocalTokenId> {
        self.check_id(id)?;
        Ok(self.functions[j].token_of(id))
    }

    pub fn global_from_local(&self, j: usize, token: LocalTokenId) -> GlobalTokenId {
        j as u32 * self.hash_size + token
    }

    /// The m global tokens of an ordinary entity (its Bloom digest).
    pub fn hash_entity(&self, id: EntityId) -> Result<Vec<GlobalTokenId>> {
        self.check_id(id)?;
        Ok((0..self.num_hashes)
            .map(|j| self.global_from_local(j, self.functions[j].token_of(id)))
            .collect())
    }

    pub fn special_index(&self, name: &str) -> Option<usize> {
        self.specials.iter().position(|s| s == name)
    }

    /// The m dedicated global tokens of special `k`; these never collide with
    /// ordinary tokens or with other specials.
    pub fn special_tokens(&self, k: usize) -> Result<Vec<GlobalTokenId>> {
        if k >= self.specials.len() {
            return Err(Error::InvalidArgument(format!(
                "special index {k} out of range ({} specials)",
                self.specials.len()
            )));
        }
        let base = self.ordinary_tokens() + (k * self.num_hashes) as u32;
        Ok((0..self.num_hashes as u32).map(|j| base + j).collect())
    }

    /// Entities in bucket `token` of function `j`, sorted ascending.
    pub fn inverse_lookup(&self, j: usize, token: LocalTokenId) -> Result<&[EntityId]> {
        if j >= self.num_hashes {
            return Err(Error::InvalidArgument(format!(
                "hash function index {j} out of range (m={})",
                self.num_hashes
            )));
        }
        if token >= self.hash_size {
            return Err(Error::InvalidArgument(format!(
                "token {token} out of range (hash_size={})",
                self.hash_size
            )));
        }
        Ok(self.functions[j].bucket(token))
    }

    fn check_id(&self, id: EntityId) -> Result<()> {
        if id >= self.n_entities {
            return Err(Error::InvalidArgument(format!(
                "entity id {id} out of range (N={})",
                self.n_entities
            )));
        }
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.n_entities);
        w.u32(self.num_hashes as u32);
        w.u32(self.alpha);
        w.u32(self.hash_size);
        w.u32(self.specials.len() as u32);
        for s in &self.specials {
            w.str(s);
        }
        for f in &self.functions {
            w.u32_slice(&f.forward);
        }
        w.into_bytes()
    }

    /// Short stable digest identifying this scheme; embedded in checkpoints
    /// and example caches so mismatched artifacts are rejected at load.
    pub fn fingerprint(&self) -> String {
        util::fingerprint_bytes(&self.payload())
    }

    /// Writes the scheme as a versioned, checksummed binary file. Inverse
    /// tables are rebuilt on load rather than stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_framed(path, SCHEME_MAGIC, &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = util::read_framed(path, SCHEME_MAGIC)?;
        let mut r = Reader::new(&payload);
        let n_entities = r.u32()?;
        let num_hashes = r.u32()? as usize;
        let alpha = r.u32()?;
        let hash_size = r.u32()?;
        let n_specials = r.u32()? as usize;
        let mut specials = Vec::with_capacity(n_specials);
        for _ in 0..n_specials {
            specials.push(r.str()?);
        }
        if hash_size != hash_size_for(n_entities, alpha) {
            return Err(Error::Format(format!(
                "inconsistent header: hash_size {hash_size} for N={n_entities}, alpha={alpha}"
            )));
        }
        let mut functions = Vec::with_capacity(num_hashes);
        for _ in 0..num_hashes {
            let forward = r.u32_vec(n_entities as usize)?;
            functions.push(HashFunction::from_forward(forward, hash_size)?);
        }
        r.finish()?;
        HashScheme::from_functions(n_entities, alpha, functions, specials)
    }
}

/// Builds a random scheme: each function chunks a seeded permutation of the
/// vocabulary into equal buckets, then complete collisions are repaired by
/// swapping entities between buckets of the last function.
///
/// For two functions the expected number of complete collisions in a fresh
/// draw is about `(alpha-1)^2 / 2` regardless of `N`, so at realistic alpha
/// collisions are always present and local repair is required; re-drawing
/// whole permutations would loop forever. Repair preserves bucket sizes
/// exactly. If 64 repair passes leave collisions, the parameters are
/// declared infeasible.
pub fn build_random_scheme(
    spec: &VocabSpec,
    num_hashes: usize,
    alpha: u32,
    seed: u64,
) -> Result<HashScheme> {
    spec.validate()?;
    let n = spec.n_entities;
    if num_hashes == 0 {
        return Err(Error::InvalidArgument("need at least one hash function".into()));
    }
    if alpha == 0 || alpha > n {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in 1..={n}, got {alpha}"
        )));
    }
    let hash_size = hash_size_for(n, alpha);
    check_even_buckets(n, alpha)?;
    // Pigeonhole: fewer token tuples than entities forces complete collisions.
    if (hash_size as u128).pow(num_hashes as u32) < n as u128 {
        return Err(Error::InfeasibleScheme(format!(
            "{num_hashes} functions of {hash_size} tokens cannot separate {n} entities"
        )));
    }
    if num_hashes == 1 && alpha > 1 && n > 1 {
        return Err(Error::InfeasibleScheme(
            "a single hash function with alpha > 1 always has complete collisions".into(),
        ));
    }

    let mut forwards: Vec<Vec<LocalTokenId>> = (0..num_hashes)
        .map(|j| random_forward(n, alpha, util::mix_seed(seed, j as u64, 0)))
        .collect();
    repair_complete_collisions(&mut forwards, n, seed)?;

    let functions = forwards
        .into_iter()
        .map(|f| HashFunction::from_forward(f, hash_size))
        .collect::<Result<_>>()?;
    HashScheme::from_functions(n, alpha, functions, spec.specials.clone())
}

/// Sorts entity ids by their full token tuple and reports adjacent duplicates:
/// pairs of entities that agree under every function.
fn complete_collision_pairs(forwards: &[Vec<LocalTokenId>], n: u32) -> Vec<(EntityId, EntityId)> {
    let mut order: Vec<u32> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        forwards
            .iter()
            .map(|f| f[a as usize].cmp(&f[b as usize]))
            .find(|c| c.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
        .windows(2)
        .filter(|w| {
            forwards
                .iter()
                .all(|f| f[w[0] as usize] == f[w[1] as usize])
        })
        .map(|w| (w[0], w[1]))
        .collect()
}

/// Eliminates complete collisions by swapping the second member of each
/// colliding pair with a partner in a different bucket of the last function.
/// A swap is applied only if it creates no new collision: the exchanged
/// tokens must be absent from the other entity's prefix group (the entities
/// agreeing with it on every function but the last), so each valid swap
/// strictly reduces the collision count and bucket sizes never change.
/// Partners are drawn from a seeded stream; unresolved pairs are retried on
/// the next pass (bounded at 64).
fn repair_complete_collisions(
    forwards: &mut [Vec<LocalTokenId>],
    n: u32,
    seed: u64,
) -> Result<()> {
    let last = forwards.len() - 1;

    // Group entities by their tokens under every function except the last.
    let prefix = &forwards[..last];
    let mut order: Vec<u32> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        prefix
            .iter()
            .map(|f| f[a as usize].cmp(&f[b as usize]))
            .find(|c| c.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let same_prefix = |a: u32, b: u32| {
        prefix
            .iter()
            .all(|f| f[a as usize] == f[b as usize])
    };
    let mut group_of = vec![0u32; n as usize];
    let mut groups: Vec<Vec<u32>> = Vec::new();
    for &id in &order {
        let open_new = match groups.last() {
            Some(g) => !same_prefix(g[0], id),
            None => true,
        };
        if open_new {
            groups.push(Vec::new());
        }
        group_of[id as usize] = groups.len() as u32 - 1;
        groups.last_mut().unwrap().push(id);
    }

    for pass in 0..REDRAW_ATTEMPTS {
        let collisions = complete_collision_pairs(forwards, n);
        if collisions.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha20Rng::seed_from_u64(util::mix_seed(seed, 0x5EAF, pass));
        for (_, mover) in collisions {
            let t_mover = forwards[last][mover as usize];
            for _ in 0..64 {
                let partner = rng.random_range(0..n);
                let t_partner = forwards[last][partner as usize];
                if t_partner == t_mover {
                    continue;
                }
                // The incoming token must be new to each side's prefix group.
                let mover_ok = groups[group_of[mover as usize] as usize]
                    .iter()
                    .all(|&e| e == mover || forwards[last][e as usize] != t_partner);
                let partner_ok = groups[group_of[partner as usize] as usize]
                    .iter()
                    .all(|&e| e == partner || forwards[last][e as usize] != t_mover);
                if mover_ok && partner_ok {
                    forwards[last][mover as usize] = t_partner;
                    forwards[last][partner as usize] = t_mover;
                    break;
                }
            }
        }
    }
    if complete_collision_pairs(forwards, n).is_empty() {
        Ok(())
    } else {
        Err(Error::InfeasibleScheme(format!(
            "complete collisions persisted after {REDRAW_ATTEMPTS} repair passes (N={n})"
        )))
    }
}

/// `ceil(N/alpha)` buckets of sizes alpha and alpha-1 must be able to cover
/// exactly N entities.
fn check_even_buckets(n: u32, alpha: u32) -> Result<()> {
    let hash_size = hash_size_for(n, alpha) as u64;
    if (n as u64) < hash_size * (alpha as u64 - 1) {
        return Err(Error::InfeasibleScheme(format!(
            "alpha {alpha} cannot split {n} entities into buckets of {alpha} or {}",
            alpha - 1
        )));
    }
    Ok(())
}

/// One equal-bucket random hash function (a chunked seeded permutation);
/// used standalone when mixing random and coherent functions in one scheme.
pub fn build_random_function(n: u32, alpha: u32, seed: u64) -> Result<HashFunction> {
    if alpha == 0 || alpha > n {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in 1..={n}, got {alpha}"
        )));
    }
    check_even_buckets(n, alpha)?;
    HashFunction::from_forward(random_forward(n, alpha, seed), hash_size_for(n, alpha))
}

fn random_forward(n: u32, alpha: u32, seed: u64) -> Vec<LocalTokenId> {
    let hash_size = hash_size_for(n, alpha);
    // deficit buckets hold alpha-1 entities; the rest hold alpha.
    let deficit = (hash_size as u64 * alpha as u64 - n as u64) as u32;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut perm: Vec<EntityId> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut forward = vec![0u32; n as usize];
    let mut next = 0usize;
    for token in 0..hash_size {
        let size = if token < hash_size - deficit {
            alpha
        } else {
            alpha - 1
        } as usize;
        for &id in &perm[next..next + size] {
            forward[id as usize] = token;
        }
        next += size;
    }
    debug_assert_eq!(next, n as usize);
    forward
}

/// Builds one coherent hash function: entities are visited in decreasing
/// frequency order, and each unassigned entity opens a bucket holding itself
/// plus its `alpha-1` nearest unassigned neighbors by cosine similarity.
///
/// Candidates that share a bucket (under any function in `constraints`) with
/// a member already in the bucket being filled are skipped, so no entity pair
/// collides both here and in a constraint function. If the constraints leave
/// no eligible candidate while unassigned entities remain, the offending
/// bucket is reported and construction fails.
pub fn build_coherent_function(
    embeddings: &[Vec<f64>],
    frequencies: &[f64],
    alpha: u32,
    constraints: &[&HashFunction],
) -> Result<HashFunction> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty embedding matrix".into()));
    }
    if frequencies.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} frequencies for {} embeddings",
            frequencies.len(),
            n
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|row| row.len() != dim) {
        return Err(Error::InvalidArgument("ragged embedding matrix".into()));
    }
    for c in constraints {
        if c.forward.len() != n {
            return Err(Error::InvalidArgument(
                "constraint function covers a different vocabulary size".into(),
            ));
        }
    }
    if alpha == 0 || alpha as usize > n {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in 1..={n}, got {alpha}"
        )));
    }

    // Unit-normalize once so cosine similarity is a dot product.
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|row| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row.clone()
            }
        })
        .collect();

    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        frequencies[b as usize]
            .partial_cmp(&frequencies[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let hash_size = hash_size_for(n as u32, alpha);
    let mut assigned = vec![false; n];
    let mut remaining = n;
    let mut forward = vec![0u32; n];
    let mut next_token: u32 = 0;

    for &seed_id in &order {
        if assigned[seed_id as usize] {
            continue;
        }
        if next_token >= hash_size {
            return Err(Error::InfeasibleScheme(format!(
                "coherent construction needs more than {hash_size} buckets"
            )));
        }
        let mut members = vec![seed_id];
        assigned[seed_id as usize] = true;
        remaining -= 1;

        if members.len() < alpha as usize && remaining > 0 {
            // Rank every still-unassigned entity by similarity to the seed.
            let seed_vec = &unit[seed_id as usize];
            let mut candidates: Vec<(f64, u32)> = (0..n as u32)
                .filter(|&id| !assigned[id as usize])
                .map(|id| {
                    let sim: f64 = unit[id as usize]
                        .iter()
                        .zip(seed_vec)
                        .map(|(a, b)| a * b)
                        .sum();
                    (sim, id)
                })
                .collect();
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });

            for &(_, cand) in &candidates {
                if members.len() == alpha as usize {
                    break;
                }
                let conflict = constraints.iter().any(|c| {
                    members
                        .iter()
                        .any(|&mm| c.forward[cand as usize] == c.forward[mm as usize])
                });
                if conflict {
                    continue;
                }
                members.push(cand);
                assigned[cand as usize] = true;
                remaining -= 1;
            }
        }

        if members.len() < alpha as usize && remaining > 0 {
            return Err(Error::InfeasibleScheme(format!(
                "bucket {next_token} (seed entity {seed_id}) has only {} of {alpha} members: \
                 every remaining entity violates the constraint",
                members.len()
            )));
        }
        for &id in &members {
            forward[id as usize] = next_token;
        }
        next_token += 1;
    }

    HashFunction::from_forward(forward, hash_size)
}
