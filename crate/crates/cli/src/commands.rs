//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use superbloom_core::corpus::{self, MaskedExample, SyntheticParams};
use superbloom_core::evaluation;
use superbloom_core::hashing::{
    build_coherent_function, build_random_function, build_random_scheme, HashFunction,
};
use superbloom_core::inference::{
    beam_search, exhaustive_rank, random_prediction, BeamParams, ScoreFunction,
};
use superbloom_core::training::{self, Checkpoint, DataSource};
use superbloom_core::transformer::Model;
use superbloom_core::util::mix_seed;
use superbloom_core::{Error, HashScheme, Result, VocabSpec};

use crate::config::RunConfig;
use crate::Command;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildHash {
            vocab_size,
            vocab_file,
            m,
            alpha,
            seed,
            specials,
            coherent_embeddings,
            coherent_count,
            frequencies,
            constraint_scheme,
            out,
        } => build_hash(
            vocab_size,
            vocab_file,
            m,
            alpha,
            seed,
            &specials,
            coherent_embeddings,
            coherent_count,
            frequencies,
            constraint_scheme,
            &out,
        ),
        Command::SynthCorpus {
            entities,
            pages,
            clusters,
            zipf_s,
            min_len,
            max_len,
            paired,
            seed,
            out,
        } => {
            let params = SyntheticParams {
                n_entities: entities,
                n_pages: pages,
                n_clusters: clusters,
                zipf_exponent: zipf_s,
                min_page_len: min_len,
                max_page_len: max_len,
                paired,
                seed,
            };
            let corpus = corpus::generate_synthetic_corpus(&params)?;
            corpus::save_corpus(&corpus, &out)?;
            println!(
                "wrote {} pages over {} entities ({} clusters, zipf {}) to {}",
                pages,
                entities,
                clusters,
                zipf_s,
                out.display()
            );
            Ok(())
        }
        Command::PrepareData {
            corpus: corpus_path,
            scheme,
            mode,
            count,
            n_max,
            mask_rate,
            test_frac,
            seed,
            out,
        } => prepare_data(
            &corpus_path,
            &scheme,
            &mode,
            count,
            n_max,
            mask_rate,
            test_frac,
            seed,
            &out,
        ),
        Command::Train {
            config,
            sets,
            corpus,
            scheme,
            out_dir,
            resume,
        } => train(config.as_deref(), &sets, &corpus, &scheme, out_dir, resume),
        Command::Eval {
            checkpoint,
            corpus,
            scheme,
            k,
            beam,
            iters,
            examples,
            test_frac,
            seed,
            out,
        } => eval(
            &checkpoint,
            &corpus,
            &scheme,
            &k,
            beam,
            iters,
            examples,
            test_frac,
            seed,
            out.as_deref(),
        ),
        Command::Infer {
            checkpoint,
            scheme,
            input,
            k,
            beam,
            iters,
            score_fn,
            names,
            out,
        } => infer(
            &checkpoint,
            &scheme,
            &input,
            k,
            beam,
            iters,
            &score_fn,
            names.as_deref(),
            out.as_deref(),
        ),
        Command::Bench {
            scheme,
            checkpoint,
            corpus,
            random_predictions,
            beam,
            iters,
            k,
            queries,
            sharpness,
            seed,
        } => bench(
            &scheme,
            checkpoint.as_deref(),
            corpus.as_deref(),
            random_predictions,
            beam,
            iters,
            k,
            queries,
            sharpness,
            seed,
        ),
    }
}

fn load_float_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|f| {
                f.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("expected a float, got {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn build_hash(
    vocab_size: Option<u32>,
    vocab_file: Option<PathBuf>,
    m: usize,
    alpha: u32,
    seed: u64,
    specials: &str,
    coherent_embeddings: Option<PathBuf>,
    coherent_count: Option<usize>,
    frequencies: Option<PathBuf>,
    constraint_scheme: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let n = match (vocab_size, vocab_file) {
        (Some(n), None) => n,
        (None, Some(path)) => {
            let file = File::open(&path)?;
            BufReader::new(file).lines().count() as u32
        }
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --vocab-size and --vocab-file is required".into(),
            ))
        }
    };
    let special_names: Vec<&str> = specials
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let spec = VocabSpec::new(n, &special_names)?;

    let external_constraints: Vec<HashFunction> = match constraint_scheme {
        Some(path) => {
            let constraint = HashScheme::load(&path)?;
            if constraint.n_entities() != n {
                return Err(Error::InvalidArgument(format!(
                    "constraint scheme covers {} entities, expected {n}",
                    constraint.n_entities()
                )));
            }
            (0..constraint.num_hashes())
                .map(|j| constraint.function(j).clone())
                .collect()
        }
        None => Vec::new(),
    };

    let scheme = match coherent_embeddings {
        None => {
            if coherent_count.unwrap_or(0) > 0 {
                return Err(Error::InvalidArgument(
                    "--coherent-count needs --coherent-embeddings".into(),
                ));
            }
            build_random_scheme(&spec, m, alpha, seed)?
        }
        Some(emb_path) => {
            let embeddings = load_float_rows(&emb_path)?;
            if embeddings.len() != n as usize {
                return Err(Error::InvalidArgument(format!(
                    "{} embedding rows for {n} entities",
                    embeddings.len()
                )));
            }
            let freqs: Vec<f64> = match frequencies {
                Some(path) => {
                    let rows = load_float_rows(&path)?;
                    rows.into_iter().flatten().collect()
                }
                None => vec![1.0; n as usize],
            };
            if freqs.len() != n as usize {
                return Err(Error::InvalidArgument(format!(
                    "{} frequency entries for {n} entities",
                    freqs.len()
                )));
            }
            let coherent = coherent_count.unwrap_or(m).min(m);
            // The first m-coherent functions are random; every coherent
            // function is constrained by all functions built before it plus
            // any external constraint scheme.
            let mut functions: Vec<HashFunction> = (0..m - coherent)
                .map(|j| build_random_function(n, alpha, mix_seed(seed, j as u64, 0)))
                .collect::<Result<_>>()?;
            for _ in 0..coherent {
                let constraints: Vec<&HashFunction> =
                    external_constraints.iter().chain(functions.iter()).collect();
                functions.push(build_coherent_function(
                    &embeddings,
                    &freqs,
                    alpha,
                    &constraints,
                )?);
            }
            HashScheme::from_functions(
                n,
                alpha,
                functions,
                special_names.iter().map(|s| s.to_string()).collect(),
            )?
        }
    };

    scheme.save(out)?;
    println!(
        "scheme: N={} m={} alpha={} hash_size={} ordinary_tokens={} total_tokens={}",
        scheme.n_entities(),
        scheme.num_hashes(),
        scheme.alpha(),
        scheme.hash_size(),
        scheme.ordinary_tokens(),
        scheme.total_tokens()
    );
    println!("fingerprint: {}", scheme.fingerprint());
    for j in 0..scheme.num_hashes() {
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for t in 0..scheme.hash_size() {
            *histogram
                .entry(scheme.inverse_lookup(j, t)?.len())
                .or_insert(0) += 1;
        }
        let rendered: Vec<String> = histogram
            .iter()
            .map(|(size, count)| format!("{count} buckets of {size}"))
            .collect();
        println!("function {j}: {}", rendered.join(", "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prepare_data(
    corpus_path: &Path,
    scheme_path: &Path,
    mode: &str,
    count: usize,
    n_max: usize,
    mask_rate: f64,
    test_frac: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let scheme = HashScheme::load(scheme_path)?;
    let pages = corpus::load_corpus(corpus_path)?;
    let (train_pages, test_pages) = corpus::split_train_test(&pages, test_frac, seed);
    let examples: Vec<MaskedExample> = match mode {
        "train" => (0..count)
            .map(|i| {
                let pick = rand_stream(seed, i as u64);
                let page = &train_pages[(pick % train_pages.len() as u64) as usize];
                let segment = corpus::cut_segment(page, n_max, mix_seed(seed, i as u64, 1))?;
                corpus::make_masked_example(
                    &segment,
                    &scheme,
                    mask_rate,
                    mix_seed(seed, i as u64, 2),
                )
            })
            .collect::<Result<_>>()?,
        "eval" => evaluation::eval_examples_from_pages(&test_pages, &scheme, n_max, count, seed)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "mode must be train or eval, got {other:?}"
            )))
        }
    };
    corpus::save_examples(&examples, &scheme.fingerprint(), scheme.num_hashes(), out)?;
    println!(
        "wrote {} {mode} examples to {} (scheme {})",
        examples.len(),
        out.display(),
        scheme.fingerprint()
    );
    Ok(())
}

fn rand_stream(seed: u64, index: u64) -> u64 {
    mix_seed(seed, index, 0xDA7A)
}

fn train(
    config_path: Option<&Path>,
    sets: &[String],
    corpus_path: &Path,
    scheme_path: &Path,
    out_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let config = RunConfig::load(config_path, sets)?;
    let scheme = HashScheme::load(scheme_path)?;
    let pages = corpus::load_corpus(corpus_path)?;
    let (train_pages, test_pages) =
        corpus::split_train_test(&pages, config.train.test_frac, config.seed);
    if train_pages.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }

    let root = out_dir
        .or_else(|| std::env::var_os("SUPERBLOOM_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run_dir = root.join(config.fingerprint());
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), config.render())?;

    let eval_examples = if test_pages.is_empty() || config.train.eval_examples == 0 {
        Vec::new()
    } else {
        evaluation::eval_examples_from_pages(
            &test_pages,
            &scheme,
            config.model.seq_len,
            config.train.eval_examples,
            config.seed,
        )?
    };

    let train_cfg = config.train_config()?;
    let data = DataSource::Pages {
        pages: &train_pages,
        n_max: config.model.seq_len.min(config.train.n_max),
    };

    println!("run directory: {}", run_dir.display());
    let result = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            ckpt.verify_scheme(&scheme)?;
            println!("resuming from step {}", ckpt.step);
            training::resume(ckpt, &data, &scheme, &train_cfg, &eval_examples, Some(&run_dir))?
        }
        None => {
            let model_cfg = config.model_config(&scheme)?;
            let model = Model::init(model_cfg, config.seed)?;
            training::train(model, &data, &scheme, &train_cfg, &eval_examples, Some(&run_dir))?
        }
    };

    for record in &result.metrics {
        println!("{}", record.render());
    }
    println!(
        "finished at step {} with loss {:.6}",
        result.step, result.final_loss
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint_path: &Path,
    corpus_path: &Path,
    scheme_path: &Path,
    ks: &str,
    beam: usize,
    iters: usize,
    examples: usize,
    test_frac: f64,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let scheme = HashScheme::load(scheme_path)?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    checkpoint.verify_scheme(&scheme)?;
    let model = checkpoint.model;

    let ks: Vec<usize> = ks
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad k value {s:?}")))
        })
        .collect::<Result<_>>()?;
    let max_k = ks.iter().copied().max().unwrap_or(1);

    let pages = corpus::load_corpus(corpus_path)?;
    let (train_pages, test_pages) = corpus::split_train_test(&pages, test_frac, seed);
    let eval_examples = evaluation::eval_examples_from_pages(
        &test_pages,
        &scheme,
        model.config.seq_len,
        examples,
        seed,
    )?;
    let frequencies = corpus::entity_frequencies(&train_pages, scheme.n_entities());

    let outcome = evaluation::rank_examples(
        &model,
        &scheme,
        &eval_examples,
        ScoreFunction::LogSum,
        BeamParams::new(beam, iters, max_k)?,
    )?;
    let per_decile =
        evaluation::frequency_bucket_recall(&outcome.results, &outcome.truths, &frequencies)?;

    let mut kv: Vec<(String, String)> = vec![
        ("examples".into(), outcome.results.len().to_string()),
        ("beam".into(), beam.to_string()),
        ("iters".into(), iters.to_string()),
        ("token_rec1".into(), format!("{:.6}", outcome.token_rec1)),
    ];
    println!("examples evaluated: {}", outcome.results.len());
    println!("token rec@1: {:.4}", outcome.token_rec1);
    println!("{:>6} {:>10}", "k", "rec@k");
    for &k in &ks {
        let r = evaluation::recall_at_k(&outcome.results, &outcome.truths, k)?;
        println!("{k:>6} {r:>10.4}");
        kv.push((format!("rec{k}"), format!("{r:.6}")));
    }
    println!("{:>6} {:>10}", "decile", "rec@1");
    for (d, r) in per_decile.iter().enumerate() {
        match r {
            Some(r) => {
                println!("{:>6} {r:>10.4}", d + 1);
                kv.push((format!("decile{}_rec1", d + 1), format!("{r:.6}")));
            }
            None => println!("{:>6} {:>10}", d + 1, "-"),
        }
    }
    if let Some(path) = out {
        let mut file = BufWriter::new(File::create(path)?);
        for (key, value) in &kv {
            writeln!(file, "{key}={value}")?;
        }
    }
    Ok(())
}

/// Parses one query line: entity ids with a single `?` or `[MASK]` slot.
fn parse_query(line: &str, line_no: usize, n_entities: u32) -> Result<(Vec<u32>, usize)> {
    let mut ids = Vec::new();
    let mut slot = None;
    for field in line.split_whitespace() {
        if field == "?" || field == "[MASK]" {
            if slot.is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "more than one masked slot".into(),
                });
            }
            slot = Some(ids.len());
            ids.push(0); // placeholder, replaced by MASK tokens
        } else {
            let id: u32 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("expected an entity id or ?, got {field:?}"),
            })?;
            if id >= n_entities {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("entity id {id} out of range (N={n_entities})"),
                });
            }
            ids.push(id);
        }
    }
    let slot = slot.ok_or(Error::Parse {
        line: line_no,
        msg: "query has no masked slot (use ? or [MASK])".into(),
    })?;
    Ok((ids, slot))
}

#[allow(clippy::too_many_arguments)]
fn infer(
    checkpoint_path: &Path,
    scheme_path: &Path,
    input: &Path,
    k: usize,
    beam: usize,
    iters: usize,
    score_fn: &str,
    names: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let scheme = HashScheme::load(scheme_path)?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    checkpoint.verify_scheme(&scheme)?;
    let model = checkpoint.model;
    let score_fn = ScoreFunction::parse(score_fn)?;
    let params = BeamParams::new(beam, iters, k)?;
    let names: Option<Vec<String>> = match names {
        Some(path) => {
            let file = File::open(path)?;
            Some(BufReader::new(file).lines().collect::<std::io::Result<_>>()?)
        }
        None => None,
    };
    let render_id = |id: u32| -> String {
        match &names {
            Some(list) => list
                .get(id as usize)
                .cloned()
                .unwrap_or_else(|| id.to_string()),
            None => id.to_string(),
        }
    };

    let mask_idx = scheme
        .special_index(corpus::MASK_NAME)
        .ok_or_else(|| Error::InvalidArgument("scheme has no MASK special".into()))?;
    let mask_tokens = scheme.special_tokens(mask_idx)?;

    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };

    let file = File::open(input)?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (ids, slot) = parse_query(&line, idx + 1, scheme.n_entities())?;
        let m = scheme.num_hashes();
        let mut tokens = Vec::with_capacity(ids.len() * m);
        for (i, &id) in ids.iter().enumerate() {
            if i == slot {
                tokens.extend_from_slice(&mask_tokens);
            } else {
                tokens.extend(scheme.hash_entity(id)?);
            }
        }
        let example = MaskedExample {
            input_tokens: tokens,
            target_positions: vec![slot],
            targets: vec![vec![0; m]],
            original_ids: vec![0],
        };
        let padded = training::pad_example(&example, &scheme, model.config.seq_len)?;
        let cache = model.forward(&padded.tokens, padded.n_valid)?;
        let pred = model.predict(&cache, &[slot])?;
        let result = beam_search(score_fn, &pred.probs[0], &scheme, params)?;

        let rendered: Vec<String> = result
            .items
            .iter()
            .zip(&result.scores)
            .map(|(&id, score)| format!("{}:{score:.4}", render_id(id)))
            .collect();
        writeln!(
            sink,
            "query={} exact={} scored={} top={}",
            idx + 1,
            result.exact as u8,
            result.candidates_scored,
            rendered.join(",")
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    scheme_path: &Path,
    checkpoint: Option<&Path>,
    corpus_path: Option<&Path>,
    random_predictions: bool,
    beam: usize,
    iters: usize,
    k: usize,
    queries: usize,
    sharpness: f64,
    seed: u64,
) -> Result<()> {
    let scheme = HashScheme::load(scheme_path)?;
    let m = scheme.num_hashes();
    let hash_size = scheme.hash_size() as usize;

    let predictions: Vec<Vec<Vec<f64>>> = if random_predictions {
        (0..queries)
            .map(|q| random_prediction(m, hash_size, sharpness, mix_seed(seed, q as u64, 0xBE)))
            .collect()
    } else {
        let (Some(ckpt_path), Some(corpus_path)) = (checkpoint, corpus_path) else {
            return Err(Error::InvalidArgument(
                "bench needs either --random-predictions or --checkpoint with --corpus".into(),
            ));
        };
        let checkpoint = Checkpoint::load(ckpt_path)?;
        checkpoint.verify_scheme(&scheme)?;
        let model = checkpoint.model;
        let pages = corpus::load_corpus(corpus_path)?;
        let examples = evaluation::eval_examples_from_pages(
            &pages,
            &scheme,
            model.config.seq_len,
            queries,
            seed,
        )?;
        let mut preds = Vec::with_capacity(queries);
        for ex in &examples {
            let padded = training::pad_example(ex, &scheme, model.config.seq_len)?;
            let cache = model.forward(&padded.tokens, padded.n_valid)?;
            let pred = model.predict(&cache, &padded.target_positions)?;
            preds.push(pred.probs[0].clone());
        }
        preds
    };

    let params = BeamParams::new(beam, iters, k)?;
    let mut beam_scored = 0usize;
    let mut beam_exact = 0usize;
    let start = Instant::now();
    let mut beam_results = Vec::with_capacity(predictions.len());
    for probs in &predictions {
        let r = beam_search(ScoreFunction::LogSum, probs, &scheme, params)?;
        beam_scored += r.candidates_scored;
        beam_exact += r.exact as usize;
        beam_results.push(r);
    }
    let beam_time = start.elapsed();

    let start = Instant::now();
    let mut oracle_results = Vec::with_capacity(predictions.len());
    for probs in &predictions {
        oracle_results.push(exhaustive_rank(ScoreFunction::LogSum, probs, &scheme, k)?);
    }
    let oracle_time = start.elapsed();

    let agree = beam_results
        .iter()
        .zip(&oracle_results)
        .filter(|(b, o)| b.items.first() == o.items.first())
        .count();

    let n = scheme.n_entities() as usize;
    let queries = predictions.len().max(1);
    println!("queries: {queries}  N={n}  beam={beam}  iters={iters}  k={k}");
    println!(
        "beam:       scored {:.1} candidates/query ({:.2}% of N), {} exact, {:.3?} total",
        beam_scored as f64 / queries as f64,
        100.0 * beam_scored as f64 / (queries * n) as f64,
        beam_exact,
        beam_time
    );
    println!(
        "exhaustive: scored {n} candidates/query (100% of N), {:.3?} total",
        oracle_time
    );
    println!(
        "speedup: {:.2}x  top-1 agreement: {agree}/{queries}",
        oracle_time.as_secs_f64() / beam_time.as_secs_f64().max(1e-12)
    );
    Ok(())
}
