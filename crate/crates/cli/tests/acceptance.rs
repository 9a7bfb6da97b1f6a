//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line. Run with
//! `cargo test -p superbloom-cli --test acceptance -- --nocapture`.
//!
//! The trend criteria (8-10) train small models on a synthetic clustered
//! corpus; they are the slow part of the suite and share fixtures where the
//! criteria allow it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use superbloom_core::corpus::{
    self, cut_segment, generate_synthetic_corpus, make_eval_example, make_masked_example,
    MaskedExample, SyntheticParams, MASK_NAME, PAD_NAME,
};
use superbloom_core::evaluation::{
    self, beam_width_sweep, depth_study, hashing_comparison, HarnessParams, SchemeVariant,
};
use superbloom_core::hashing::{build_random_scheme, HashScheme, VocabSpec};
use superbloom_core::inference::{
    beam_search, certificate_check, exhaustive_rank, random_prediction, BeamParams, ScoreFunction,
};
use superbloom_core::training::{self, DataSource, TrainConfig};
use superbloom_core::transformer::{finite_difference_check, Model, ModelConfig, PaddedExample};
use superbloom_core::util::mix_seed;

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

fn scheme_with(n: u32, m: usize, alpha: u32, seed: u64) -> HashScheme {
    let spec = VocabSpec::new(n, &[MASK_NAME, PAD_NAME]).unwrap();
    build_random_scheme(&spec, m, alpha, seed).unwrap()
}

#[test]
fn criterion_01_beam_search_exactness() {
    let start = Instant::now();
    let mut instances = 0usize;
    for (ai, &alpha) in [5u32, 10, 20].iter().enumerate() {
        let scheme = scheme_with(1000, 2, alpha, 11 + ai as u64);
        for k in [1usize, 10] {
            for score_fn in [ScoreFunction::LogSum, ScoreFunction::Min, ScoreFunction::Max] {
                for seed in 0..12u64 {
                    let probs = random_prediction(
                        2,
                        scheme.hash_size() as usize,
                        4.0,
                        mix_seed(seed, ai as u64, k as u64),
                    );
                    let oracle = exhaustive_rank(score_fn, &probs, &scheme, k).unwrap();
                    let beam = beam_search(
                        score_fn,
                        &probs,
                        &scheme,
                        BeamParams::new(k, usize::MAX, k).unwrap(),
                    )
                    .unwrap();
                    assert!(beam.exact, "unbounded beam must certify");
                    assert_eq!(beam.items, oracle.items, "alpha={alpha} k={k} seed={seed}");
                    assert_eq!(beam.scores, oracle.scores);
                    instances += 1;
                }
            }
        }
    }
    assert!(instances >= 200, "only {instances} instances");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        "criterion 1 (beam-search exactness)",
        format!("{instances} instances identical to the oracle in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_certificate_soundness() {
    let start = Instant::now();
    let mut certified = 0usize;
    let mut total = 0usize;
    for (ai, &alpha) in [5u32, 10, 20].iter().enumerate() {
        let scheme = scheme_with(1000, 2, alpha, 11 + ai as u64);
        for k in [1usize, 10] {
            for score_fn in [ScoreFunction::LogSum, ScoreFunction::Min, ScoreFunction::Max] {
                for seed in 0..12u64 {
                    let probs = random_prediction(
                        2,
                        scheme.hash_size() as usize,
                        4.0,
                        mix_seed(seed, ai as u64, k as u64),
                    );
                    for iters in [1usize, 2] {
                        let beam = beam_search(
                            score_fn,
                            &probs,
                            &scheme,
                            BeamParams::new(k, iters, k).unwrap(),
                        )
                        .unwrap();
                        total += 1;
                        assert!(
                            certificate_check(&beam, &probs, &scheme, score_fn).unwrap(),
                            "false certificate: alpha={alpha} k={k} iters={iters} seed={seed}"
                        );
                        if beam.exact {
                            certified += 1;
                            let oracle = exhaustive_rank(score_fn, &probs, &scheme, k).unwrap();
                            assert_eq!(beam.items, oracle.items);
                            assert_eq!(beam.scores, oracle.scores);
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        "criterion 2 (certificate soundness)",
        format!("{certified}/{total} runs certified, all confirmed by full scan, in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_beam_efficiency() {
    let start = Instant::now();
    let scheme = scheme_with(100_000, 2, 50, 5);
    let n = scheme.n_entities() as usize;
    let queries: Vec<Vec<Vec<f64>>> = (0..40)
        .map(|q| random_prediction(2, scheme.hash_size() as usize, 6.0, 900 + q))
        .collect();
    let params = BeamParams::new(20, 1, 20).unwrap();

    let beam_start = Instant::now();
    let mut scored = 0usize;
    let mut beam_tops = Vec::new();
    for probs in &queries {
        let r = beam_search(ScoreFunction::LogSum, probs, &scheme, params).unwrap();
        scored += r.candidates_scored;
        beam_tops.push(r);
    }
    let beam_time = beam_start.elapsed();

    let oracle_start = Instant::now();
    let mut oracle_tops = Vec::new();
    for probs in &queries {
        oracle_tops.push(exhaustive_rank(ScoreFunction::LogSum, probs, &scheme, 20).unwrap());
    }
    let oracle_time = oracle_start.elapsed();

    let frac = scored as f64 / (queries.len() * n) as f64;
    assert!(
        frac <= 0.05,
        "beam scored {:.2}% of ids, budget is 5%",
        frac * 100.0
    );
    let speedup = oracle_time.as_secs_f64() / beam_time.as_secs_f64();
    assert!(speedup >= 2.0, "speedup {speedup:.2}x below 2x");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
    pass(
        "criterion 3 (beam efficiency)",
        format!(
            "scored {:.2}% of N per query, {speedup:.1}x faster than exhaustive, in {elapsed:.2?}",
            frac * 100.0
        ),
    );
}

#[test]
fn criterion_04_gradient_correctness() {
    let start = Instant::now();
    let config = ModelConfig {
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
    };
    // Weights scaled so no ReLU preactivation sits within the h=1e-3 stencil;
    // the seed is pinned to a verified kink-free fixture.
    let mut model: Model<f64> = Model::init(config, 8).unwrap();
    model.params.scale(5.0);
    let ex = PaddedExample {
        tokens: vec![0, 6, 1, 7, 2, 8, 3, 9],
        n_valid: 4,
        target_positions: vec![1, 3],
        targets: vec![vec![4, 5], vec![1, 0]],
    };
    let report = finite_difference_check(&model, &ex, 1e-3).unwrap();
    let mut worst: (String, f64) = ("-".into(), 0.0);
    for (name, rel) in report {
        assert!(rel < 1e-4, "group {name}: relative error {rel}");
        if rel > worst.1 {
            worst = (name, rel);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
    pass(
        "criterion 4 (gradient correctness)",
        format!(
            "all parameter groups under 1e-4; worst {} at {:.2e}, in {elapsed:.2?}",
            worst.0, worst.1
        ),
    );
}

#[test]
fn criterion_05_hash_scheme_invariants() {
    let start = Instant::now();
    let mut combos = 0usize;
    let mut rng_state = 0xFEEDu64;
    let mut next = move || {
        rng_state = mix_seed(rng_state, 1, 2);
        rng_state
    };
    while combos < 50 {
        let n = 100 + (next() % 9_901) as u32; // 100..=10_000
        let m = 2 + (next() % 2) as usize; // 2 or 3
        let max_alpha = ((n as f64).sqrt() / 1.5).floor().max(1.0) as u32;
        let alpha = 1 + (next() % max_alpha.min(24) as u64) as u32;
        let scheme = match build_random_scheme(
            &VocabSpec::new(n, &[MASK_NAME]).unwrap(),
            m,
            alpha,
            next(),
        ) {
            Ok(s) => s,
            Err(_) => continue, // infeasible draw; not part of the 50
        };
        combos += 1;

        for j in 0..m {
            let mut sizes = Vec::new();
            let mut seen = vec![false; n as usize];
            for t in 0..scheme.hash_size() {
                let bucket = scheme.inverse_lookup(j, t).unwrap();
                sizes.push(bucket.len());
                for &id in bucket {
                    assert!(!seen[id as usize], "duplicate id {id}");
                    seen[id as usize] = true;
                }
            }
            assert!(seen.iter().all(|&x| x), "partition misses ids");
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            assert!(max - min <= 1, "bucket sizes differ by {}", max - min);
        }
        for id in 0..n {
            for (j, &g) in scheme.hash_entity(id).unwrap().iter().enumerate() {
                let local = g - j as u32 * scheme.hash_size();
                assert!(scheme
                    .inverse_lookup(j, local)
                    .unwrap()
                    .binary_search(&id)
                    .is_ok());
            }
        }
        // Exhaustive O(N^2) pair scan, independent of the library's own
        // collision detection.
        let forwards: Vec<Vec<u32>> = (0..m)
            .map(|j| {
                (0..n)
                    .map(|id| scheme.local_token(j, id).unwrap())
                    .collect()
            })
            .collect();
        for a in 0..n {
            for b in (a + 1)..n {
                let all_equal = (0..m).all(|j| forwards[j][a as usize] == forwards[j][b as usize]);
                assert!(!all_equal, "complete collision {a},{b} at N={n} m={m} alpha={alpha}");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        "criterion 5 (hash-scheme invariants)",
        format!("50 random (N, m, alpha) combinations clean in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_06_masking_statistics() {
    let start = Instant::now();
    let scheme = scheme_with(5_000, 2, 10, 3);
    let pages = generate_synthetic_corpus(&SyntheticParams {
        n_entities: 5_000,
        n_pages: 500,
        n_clusters: 25,
        seed: 17,
        ..SyntheticParams::default()
    })
    .unwrap();
    let mask_tokens = scheme
        .special_tokens(scheme.special_index(MASK_NAME).unwrap())
        .unwrap();

    let mut positions_total = 0u64;
    let mut masked_total = 0u64;
    let (mut n_mask, mut n_random, mut n_unchanged) = (0u64, 0u64, 0u64);
    let examples = 100_000u64;
    for i in 0..examples {
        let page = &pages[(mix_seed(7, i, 0) % pages.len() as u64) as usize];
        let segment = cut_segment(page, 32, mix_seed(7, i, 1)).unwrap();
        let ex = make_masked_example(&segment, &scheme, 0.15, mix_seed(7, i, 2)).unwrap();
        positions_total += segment.len() as u64;
        masked_total += ex.target_positions.len() as u64;
        for (k, &pos) in ex.target_positions.iter().enumerate() {
            let got = &ex.input_tokens[pos * 2..pos * 2 + 2];
            let truth = scheme.hash_entity(ex.original_ids[k]).unwrap();
            if got == mask_tokens.as_slice() {
                n_mask += 1;
            } else if got == truth.as_slice() {
                n_unchanged += 1;
            } else {
                n_random += 1;
            }
        }
    }
    let masked_frac = masked_total as f64 / positions_total as f64;
    assert!(
        (masked_frac - 0.15).abs() <= 0.01,
        "masked fraction {masked_frac}"
    );
    let frac = |x: u64| x as f64 / masked_total as f64;
    assert!((frac(n_mask) - 0.8).abs() <= 0.02, "MASK {}", frac(n_mask));
    assert!((frac(n_random) - 0.1).abs() <= 0.02, "random {}", frac(n_random));
    assert!(
        (frac(n_unchanged) - 0.1).abs() <= 0.02,
        "unchanged {}",
        frac(n_unchanged)
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
    pass(
        "criterion 6 (masking statistics)",
        format!(
            "masked {:.2}%, split {:.3}/{:.3}/{:.3} over {examples} examples in {elapsed:.2?}",
            masked_frac * 100.0,
            frac(n_mask),
            frac(n_random),
            frac(n_unchanged)
        ),
    );
}

#[test]
fn criterion_07_overfit_sanity() {
    let start = Instant::now();
    let scheme = scheme_with(500, 2, 10, 21);
    let config = ModelConfig::for_scheme(&scheme, 32, 2, 64, 2, 8);
    let model = Model::init(config, 4).unwrap();

    // 32 fixed examples, one masked position each.
    let examples: Vec<MaskedExample> = (0..32u64)
        .map(|i| {
            let segment: Vec<u32> = (0..8).map(|p| ((i * 31 + p * 7) % 500) as u32).collect();
            make_eval_example(&segment, &scheme, i).unwrap()
        })
        .collect();

    // Initial loss on random init: within 5% of m * ln(hash_size).
    let mut initial = 0.0;
    for ex in &examples {
        let padded = training::pad_example(ex, &scheme, 8).unwrap();
        initial += model.loss(&padded).unwrap();
    }
    initial /= examples.len() as f64;
    let expected = 2.0 * (scheme.hash_size() as f64).ln();
    assert!(
        (initial - expected).abs() / expected <= 0.05,
        "initial loss {initial} vs m*ln(H) {expected}"
    );

    let cfg = TrainConfig {
        batch_size: 32,
        total_steps: 2000,
        warmup_steps: 100,
        init_lr: 3e-3,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let result = training::train(
        model,
        &DataSource::Fixed(&examples),
        &scheme,
        &cfg,
        &[],
        None,
    )
    .unwrap();
    assert!(
        result.final_loss < 0.05,
        "training loss {} after 2000 steps",
        result.final_loss
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    pass(
        "criterion 7 (overfit sanity)",
        format!(
            "initial loss {initial:.3} (target {expected:.3}), final {:.4} < 0.05, in {elapsed:.2?}",
            result.final_loss
        ),
    );
}

/// Corpus for the depth criterion: planted clusters over 20,000 entities
/// with a Zipf frequency profile. Cluster count and segment length are set
/// so context disambiguation is required but learnable at this model size.
fn depth_corpus() -> &'static Vec<corpus::Page> {
    static CORPUS: OnceLock<Vec<corpus::Page>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        generate_synthetic_corpus(&SyntheticParams {
            n_entities: 20_000,
            n_pages: 6_000,
            n_clusters: 1_200,
            zipf_exponent: 1.0,
            min_page_len: 12,
            max_page_len: 24,
            paired: false,
            seed: 100,
        })
        .unwrap()
    })
}

fn depth_harness() -> HarnessParams {
    HarnessParams {
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        seq_len: 8,
        steps: 3500,
        batch_size: 16,
        init_lr: 2e-3,
        warmup_steps: 100,
        eval_examples: 800,
        eval_beam: 20,
    }
}

#[test]
fn criterion_08_depth_trend() {
    let start = Instant::now();
    let pages = depth_corpus();
    let rows = depth_study(pages, 20_000, 20, 4, &depth_harness(), &[0, 1, 2], 0.1, 42).unwrap();
    let find = |hashed: bool, layers: usize, seed: u64| {
        rows.iter()
            .find(|r| r.hashed == hashed && r.layers == layers && r.seed == seed)
            .unwrap()
            .rec1
    };
    let mut wins = 0;
    let mut detail = String::new();
    for seed in [0u64, 1, 2] {
        let hashed_gap = find(true, 4, seed) - find(true, 1, seed);
        let unhashed_gap = find(false, 4, seed) - find(false, 1, seed);
        let ok = hashed_gap >= 1.5 * unhashed_gap && hashed_gap > 0.0;
        if ok {
            wins += 1;
        }
        detail.push_str(&format!(
            "seed {seed}: hashed {:.3}->{:.3} (gap {:.3}), unhashed {:.3}->{:.3} (gap {:.3}) {} | ",
            find(true, 1, seed),
            find(true, 4, seed),
            hashed_gap,
            find(false, 1, seed),
            find(false, 4, seed),
            unhashed_gap,
            if ok { "ok" } else { "MISS" },
        ));
    }
    let elapsed = start.elapsed();
    assert!(wins >= 2, "depth trend held in only {wins}/3 seeds: {detail}");
    assert!(elapsed.as_secs() < 7200, "took {elapsed:?}");
    pass(
        "criterion 8 (depth trend)",
        format!("{wins}/3 seeds, {detail}in {elapsed:.0?}"),
    );
}

/// A trained hashed checkpoint for the beam-width sweep.
struct SweepFixture {
    model: Model<f32>,
    scheme: HashScheme,
    eval: Vec<MaskedExample>,
}

fn sweep_fixture() -> &'static SweepFixture {
    static FIXTURE: OnceLock<SweepFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let pages = depth_corpus();
        let (train_pages, test_pages) = corpus::split_train_test(pages, 0.1, 42);
        let scheme = scheme_with(20_000, 2, 20, 0 ^ 0xD5);
        // Longer schedule than the depth study: the sweep needs a
        // well-converged checkpoint whose top-1 token already carries the
        // answer, the operating point the width comparison is about.
        let params = HarnessParams {
            steps: 6_000,
            ..depth_harness()
        };
        let eval = evaluation::eval_examples_from_pages(
            &test_pages,
            &scheme,
            params.seq_len,
            params.eval_examples,
            0 ^ 0xE7,
        )
        .unwrap();
        let (model, _, _) =
            evaluation::train_and_score(&scheme, &train_pages, &eval, 4, &params, 0).unwrap();
        SweepFixture {
            model,
            scheme,
            eval,
        }
    })
}

#[test]
fn criterion_09_beam_width_trend() {
    let fixture = sweep_fixture();
    let start = Instant::now();
    let rows = beam_width_sweep(
        &fixture.model,
        &fixture.scheme,
        &fixture.eval,
        &[1, 10, 20, 100],
        &[1, 10, 20],
    )
    .unwrap();
    let rec = |b: usize, k: usize| {
        rows.iter()
            .find(|r| r.beam_width == b)
            .unwrap()
            .recalls
            .iter()
            .find(|&&(kk, _)| kk == k)
            .unwrap()
            .1
    };
    assert!(
        rec(20, 20) >= rec(1, 20),
        "rec@20 at B=20 ({}) below B=1 ({})",
        rec(20, 20),
        rec(1, 20)
    );
    for k in [1usize, 10, 20] {
        let diff = (rec(100, k) - rec(k, k)).abs();
        assert!(
            diff <= 0.01,
            "rec@{k}: B={k} gives {}, B=100 gives {} (diff {diff})",
            rec(k, k),
            rec(100, k)
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    pass(
        "criterion 9 (beam-width trend)",
        format!(
            "rec@20: B=1 {:.3} <= B=20 {:.3}; B=k within 1% of B=100 for k in {{1,10,20}}, in {elapsed:.2?}",
            rec(1, 20),
            rec(20, 20)
        ),
    );
}

#[test]
fn criterion_10_hashing_comparison_trend() {
    let start = Instant::now();
    // Paired corpus: the held-out entity is identified by the partner left
    // in the context, so discrimination between similar entities carries
    // real signal beyond frequency. Embeddings resolve clusters but not
    // partners, which is what packs confusable entities into one coherent
    // bucket. The embedding seed is pinned to a constraint-feasible draw.
    let pages: &'static Vec<corpus::Page> = {
        static CORPUS: OnceLock<Vec<corpus::Page>> = OnceLock::new();
        CORPUS.get_or_init(|| {
            generate_synthetic_corpus(&SyntheticParams {
                n_entities: 10_000,
                n_pages: 5_000,
                n_clusters: 500,
                zipf_exponent: 1.0,
                min_page_len: 16,
                max_page_len: 28,
                paired: true,
                seed: 200,
            })
            .unwrap()
        })
    };
    let embeddings = evaluation::planted_embeddings(10_000, 500, 16, 0.25, 8);
    let params = HarnessParams {
        d_model: 64,
        n_heads: 4,
        d_ff: 128,
        seq_len: 12,
        steps: 5000,
        batch_size: 16,
        init_lr: 2e-3,
        warmup_steps: 100,
        eval_examples: 800,
        eval_beam: 20,
    };
    let reports = hashing_comparison(
        pages,
        10_000,
        10,
        &embeddings,
        &[SchemeVariant::RandomRandom, SchemeVariant::CoherentCoherent],
        &params,
        &[0, 1, 2],
        0.1,
        42,
        4,
    )
    .unwrap();
    let find = |variant: SchemeVariant, seed: u64| {
        reports
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .unwrap()
    };
    let mut wins = 0;
    let mut detail = String::new();
    for seed in [0u64, 1, 2] {
        let random = find(SchemeVariant::RandomRandom, seed);
        let coherent = find(SchemeVariant::CoherentCoherent, seed);
        let ok = coherent.token_rec1 > random.token_rec1
            && coherent.entity_rec1 < random.entity_rec1;
        if ok {
            wins += 1;
        }
        detail.push_str(&format!(
            "seed {seed}: token {:.3} vs {:.3}, entity {:.3} vs {:.3} {} | ",
            coherent.token_rec1,
            random.token_rec1,
            coherent.entity_rec1,
            random.entity_rec1,
            if ok { "ok" } else { "MISS" },
        ));
    }
    let elapsed = start.elapsed();
    assert!(wins >= 2, "hashing trend held in only {wins}/3 seeds: {detail}");
    assert!(elapsed.as_secs() < 7200, "took {elapsed:?}");
    pass(
        "criterion 10 (hashing-comparison trend)",
        format!("{wins}/3 seeds, {detail}in {elapsed:.0?}"),
    );
}

fn superbloom() -> Command {
    Command::new(env!("CARGO_BIN_EXE_superbloom"))
}

fn run_ok(cmd: &mut Command) -> Vec<u8> {
    let out = cmd.output().expect("spawn superbloom");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn criterion_11_cli_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |path: PathBuf| path.into_os_string().into_string().unwrap();

    // build-hash twice: identical scheme bytes.
    for out in ["a.scheme", "b.scheme"] {
        run_ok(superbloom().args([
            "build-hash",
            "--vocab-size",
            "3000",
            "--m",
            "2",
            "--alpha",
            "15",
            "--seed",
            "9",
            "--out",
            &s(p(out)),
        ]));
    }
    assert_eq!(read(&p("a.scheme")), read(&p("b.scheme")), "build-hash differs");

    // synth-corpus twice.
    for out in ["a.txt", "b.txt"] {
        run_ok(superbloom().args([
            "synth-corpus",
            "--entities",
            "3000",
            "--pages",
            "400",
            "--clusters",
            "30",
            "--seed",
            "3",
            "--out",
            &s(p(out)),
        ]));
    }
    assert_eq!(read(&p("a.txt")), read(&p("b.txt")), "synth-corpus differs");

    // prepare-data twice.
    for out in ["a.examples", "b.examples"] {
        run_ok(superbloom().args([
            "prepare-data",
            "--corpus",
            &s(p("a.txt")),
            "--scheme",
            &s(p("a.scheme")),
            "--mode",
            "train",
            "--count",
            "500",
            "--seed",
            "4",
            "--out",
            &s(p(out)),
        ]));
    }
    assert_eq!(
        read(&p("a.examples")),
        read(&p("b.examples")),
        "prepare-data differs"
    );

    // train twice (short single-threaded run): identical checkpoints and
    // metrics logs.
    let common = [
        "--set",
        "scheme.vocab_size=3000",
        "--set",
        "scheme.alpha=15",
        "--set",
        "train.total_steps=25",
        "--set",
        "train.warmup_steps=5",
        "--set",
        "train.eval_every=25",
        "--set",
        "train.eval_examples=40",
        "--set",
        "model.seq_len=8",
        "--set",
        "model.layers=1",
    ];
    for root in ["runs_a", "runs_b"] {
        run_ok(
            superbloom()
                .args([
                    "train",
                    "--corpus",
                    &s(p("a.txt")),
                    "--scheme",
                    &s(p("a.scheme")),
                    "--out-dir",
                    &s(p(root)),
                ])
                .args(common),
        );
    }
    let run_name = std::fs::read_dir(p("runs_a"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .file_name();
    let ckpt_a = p("runs_a").join(&run_name).join("checkpoint_0000025.ckpt");
    let ckpt_b = p("runs_b").join(&run_name).join("checkpoint_0000025.ckpt");
    assert_eq!(read(&ckpt_a), read(&ckpt_b), "train checkpoints differ");
    assert_eq!(
        read(&p("runs_a").join(&run_name).join("metrics.log")),
        read(&p("runs_b").join(&run_name).join("metrics.log")),
        "metrics logs differ"
    );

    // eval twice.
    for out in ["a.kv", "b.kv"] {
        run_ok(superbloom().args([
            "eval",
            "--checkpoint",
            &s(ckpt_a.clone()),
            "--corpus",
            &s(p("a.txt")),
            "--scheme",
            &s(p("a.scheme")),
            "--examples",
            "60",
            "--seed",
            "2",
            "--out",
            &s(p(out)),
        ]));
    }
    assert_eq!(read(&p("a.kv")), read(&p("b.kv")), "eval reports differ");

    // infer twice.
    std::fs::write(p("queries.txt"), "10 20 ? 40\n7 ? 9 11 13\n").unwrap();
    let infer_out: Vec<Vec<u8>> = ["a.infer", "b.infer"]
        .iter()
        .map(|out| {
            run_ok(superbloom().args([
                "infer",
                "--checkpoint",
                &s(ckpt_a.clone()),
                "--scheme",
                &s(p("a.scheme")),
                "--input",
                &s(p("queries.txt")),
                "--k",
                "5",
                "--out",
                &s(p(out)),
            ]));
            read(&p(out))
        })
        .collect();
    assert_eq!(infer_out[0], infer_out[1], "infer outputs differ");

    let elapsed = start.elapsed();
    pass(
        "criterion 11 (determinism)",
        format!(
            "build-hash, prepare-data, train, eval, infer all byte-identical across reruns, in {elapsed:.2?}"
        ),
    );
}
