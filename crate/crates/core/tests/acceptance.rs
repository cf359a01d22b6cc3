//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

use batcher::batching::{batch_diverse, batch_similar, Batch, BatchingStrategy, ClusterAssignment, ClusterParams};
use batcher::costeval::{api_cost, labeling_cost, to_cents};
use batcher::features::{extract_structure_features, Similarity};
use batcher::llm::{standard_prompting_tokens, MockOracle, DEFAULT_TASK_DESCRIPTION};
use batcher::pipeline::{self, BackendConfig, RunConfig, REPORT_FILE};
use batcher::selection::{greedy_weighted_set_cover, harmonic, select_topk_batch, CoverInstance, SelectionStrategy};
use batcher::serialize::{count_tokens, serialize_pair};
use batcher::synth::{generate, write_magellan, DatasetPaths, SynthData, SynthSpec};
use batcher::{EntityPair, EntityRecord, MatchLabel};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn in_memory_config(seed: u64) -> RunConfig {
    RunConfig::new(seed, DatasetPaths::in_dir(Path::new("unused")), "unused")
}

fn split(data: SynthData, n_questions: usize) -> (Vec<EntityPair>, Vec<EntityPair>) {
    let mut pairs = data.pairs;
    let pool = pairs.split_off(n_questions);
    (pairs, pool)
}

fn mock_for(questions: &[EntityPair], seed: u64) -> MockOracle {
    let gold: Vec<MatchLabel> = questions.iter().map(|q| q.gold.unwrap()).collect();
    MockOracle::from_labels(&gold, 0.0, seed).unwrap()
}

fn cost_arithmetic() -> Outcome {
    let api = api_cost(500_000 * 360, Decimal::new(1, 2)).map_err(|e| e.to_string())?;
    let label = labeling_cost(8);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = generate(&SynthSpec {
        n_pairs: 100,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let paths = write_magellan(&dir.path().join("data"), &data.pairs).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        selection: SelectionStrategy::Fixed,
        ..RunConfig::new(1, paths, dir.path().join("out"))
    };
    let ledger = pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?.ledger;

    let api_ok = (api - Decimal::new(1800, 0)).abs() <= Decimal::new(5, 3);
    check(
        api_ok && label == Decimal::new(64, 3) && to_cents(ledger.label_dollars()) == Decimal::new(6, 2),
        format!(
            "api_cost = ${api}, labeling_cost(8) = ${label}, fixed-run label spend ${} -> ${}",
            ledger.label_dollars(),
            to_cents(ledger.label_dollars())
        ),
    )
}

fn token_saving() -> Outcome {
    let data = generate(&SynthSpec {
        n_pairs: 640,
        seed: 11,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let (questions, pool) = split(data, 240);
    let per_pair = questions
        .iter()
        .map(|p| count_tokens(&serialize_pair(p)))
        .sum::<usize>() as f64
        / 240.0;

    let cfg = in_memory_config(11);
    let outcome =
        pipeline::run(&cfg, "synthetic", &questions, &pool, &mock_for(&questions, 11)).map_err(|e| e.to_string())?;
    let batched = outcome.ledger.api_tokens as f64;

    let plan = pipeline::plan(&cfg, &questions, &pool).map_err(|e| e.to_string())?;
    let mut per_question = Vec::with_capacity(questions.len());
    for (i, q) in questions.iter().enumerate() {
        let single = Batch {
            id: i,
            questions: vec![i],
        };
        let demos =
            select_topk_batch(&single, &plan.question_vectors, &plan.pool.vectors, 8).map_err(|e| e.to_string())?;
        per_question.push((
            q.unlabeled(),
            demos.into_iter().map(|d| (d, &pool[d])).collect::<Vec<_>>(),
        ));
    }
    let standard = standard_prompting_tokens(
        DEFAULT_TASK_DESCRIPTION,
        per_question.iter().map(|(q, d)| (q, d.clone())),
        cfg.tokenizer,
    )
    .map_err(|e| e.to_string())? as f64;

    let ratio = standard / batched;
    check(
        ratio >= 4.0,
        format!("{per_pair:.1} tokens/pair, standard {standard} vs batched {batched} tokens, ratio {ratio:.2} (need >= 4.0)"),
    )
}

/// Minimum total weight of a subfamily covering everything the full family covers.
fn exhaustive_optimum(inst: &CoverInstance) -> f64 {
    let m = inst.candidate_sets.len();
    let coverable: BTreeSet<usize> = inst.candidate_sets.iter().flatten().copied().collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        let mut covered = BTreeSet::new();
        let mut w = 0.0;
        for (j, set) in inst.candidate_sets.iter().enumerate() {
            if mask & (1 << j) != 0 {
                covered.extend(set.iter().copied());
                w += inst.weights[j];
            }
        }
        if covered == coverable && w < best {
            best = w;
        }
    }
    best
}

fn random_family(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<usize>> {
    (0..m)
        .map(|_| {
            let density = rng.gen_range(0.1..0.7);
            (0..n).filter(|_| rng.gen_bool(density)).collect()
        })
        .collect()
}

fn greedy_unit_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut violations, mut worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let m = rng.gen_range(1..=8);
        let inst = CoverInstance::unit((0..n).collect(), random_family(&mut rng, n, m)).map_err(|e| e.to_string())?;
        let greedy = greedy_weighted_set_cover(&inst).selected.len() as f64;
        let opt = exhaustive_optimum(&inst);
        let k = inst.candidate_sets.iter().map(Vec::len).max().unwrap_or(0);
        if greedy > harmonic(k) * opt + 1e-9 {
            violations += 1;
        }
        if opt > 0.0 {
            worst = worst.max(greedy / opt);
        }
    }
    check(
        violations == 0,
        format!("1000 instances, {violations} violations, worst greedy/OPT {worst:.3}"),
    )
}

/// `ln n - ln ln n + 3`; for a single question greedy picks the cheapest covering
/// set, so the factor is 1 there (the expression is undefined at n = 1).
fn batch_cover_envelope(n: usize) -> f64 {
    if n <= 1 {
        1.0
    } else {
        let ln = (n as f64).ln();
        ln - ln.ln() + 3.0
    }
}

fn weighted_batch_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut violations, mut worst) = (0, 0.0f64);
    for i in 0..500 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=10);
        let sets = if i % 2 == 0 {
            random_family(&mut rng, n, m)
        } else {
            // questions and demos in the unit square, coverage within radius t
            let qs: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
            let t = rng.gen_range(0.15..0.6);
            (0..m)
                .map(|_| {
                    let d: (f64, f64) = (rng.gen(), rng.gen());
                    (0..n)
                        .filter(|&q| ((qs[q].0 - d.0).powi(2) + (qs[q].1 - d.1).powi(2)).sqrt() < t)
                        .collect()
                })
                .collect()
        };
        let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(40..160) as f64).collect();
        let inst = CoverInstance::new((0..n).collect(), sets, weights).map_err(|e| e.to_string())?;
        let greedy = greedy_weighted_set_cover(&inst).total_weight(&inst);
        let opt = exhaustive_optimum(&inst);
        if greedy > batch_cover_envelope(n) * opt + 1e-9 {
            violations += 1;
        }
        if opt > 0.0 {
            worst = worst.max(greedy / opt);
        }
    }
    check(
        violations == 0,
        format!("500 instances, {violations} violations, worst greedy/OPT {worst:.3}"),
    )
}

fn trace_fidelity() -> Outcome {
    // C_a = {0, 1}, C_b = {2, 3, 4}, C_c = {5, 6, 7, 8}
    let labels = vec![0, 0, 1, 1, 1, 2, 2, 2, 2];
    let clusters =
        ClusterAssignment::from_labels(labels.clone(), ClusterParams::new(1.0, 1).map_err(|e| e.to_string())?);
    let profile = |batches: &[Batch]| -> Vec<Vec<usize>> {
        batches
            .iter()
            .map(|b| {
                let mut c: Vec<usize> = b.questions.iter().map(|&q| labels[q]).collect();
                c.sort_unstable();
                c
            })
            .collect()
    };
    let similar = profile(&batch_similar(&clusters, 3, 0).map_err(|e| e.to_string())?);
    let diverse = profile(&batch_diverse(&clusters, 3, 0).map_err(|e| e.to_string())?);
    let ok = similar == vec![vec![1, 1, 1], vec![2, 2, 2], vec![0, 0, 2]]
        && diverse == vec![vec![0, 1, 2], vec![0, 1, 2], vec![1, 2, 2]];
    check(
        ok,
        format!("similar {similar:?}, diverse {diverse:?} (cluster ids: 0 = C_a, 1 = C_b, 2 = C_c)"),
    )
}

fn structure_fidelity() -> Outcome {
    let pair = |l: [(&str, &str); 3], r: [(&str, &str); 3]| {
        EntityPair::new(EntityRecord::new("l", l), EntityRecord::new("r", r), None).unwrap()
    };
    let q1 = pair(
        [
            ("title", "Rashi"),
            ("album", "Here Comes the Fuzz"),
            ("genre", "Dance,Music,Hip-Hop"),
        ],
        [
            ("title", "Rashi"),
            ("album", "Here Comes The Fuzz [Explicit]"),
            ("genre", "Music"),
        ],
    );
    let q2 = pair(
        [
            ("title", "Snap"),
            ("album", "Here Comes the Fuzz"),
            ("genre", "Hip-Hop,Music"),
        ],
        [("title", "Lose Control"), ("album", ""), ("genre", "Alternative")],
    );
    let v1 = extract_structure_features(&q1, Similarity::Lr).values;
    let v2 = extract_structure_features(&q2, Similarity::Lr).values;
    let close =
        |v: &[f64], want: &[f64]| v.len() == want.len() && v.iter().zip(want).all(|(a, b)| (a - b).abs() <= 0.05);
    check(
        close(&v1, &[1.0, 0.73, 0.42]) && close(&v2, &[0.33, 0.0, 0.46]),
        format!("q1 {v1:.3?} vs [1, 0.73, 0.42]; q2 {v2:.3?} vs [0.33, 0, 0.46]"),
    )
}

fn oracle_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // 12 clusters: the 8th-percentile threshold then sits at inter-cluster scale, so the
    // 120-demo pool reaches every one of the 40 questions
    let spec = SynthSpec {
        n_pairs: 200,
        n_clusters: 12,
        seed: 7,
        ..SynthSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let paths = write_magellan(&dir.path().join("data"), &data.pairs).map_err(|e| e.to_string())?;
    let base = RunConfig::new(7, paths, dir.path().join("sweep"));
    let entries = pipeline::sweep(&base).map_err(|e| e.to_string())?;
    let bad: Vec<String> = entries
        .iter()
        .filter(|e| e.outcome.report.metrics.f1 != 1.0 || !e.outcome.report.uncovered.is_empty())
        .map(|e| {
            format!(
                "{}-{} F1 {} uncovered {:?}",
                e.config.batching.name(),
                e.config.selection.name(),
                e.outcome.report.metrics.f1,
                e.outcome.report.uncovered
            )
        })
        .collect();
    check(
        entries.len() == 12 && bad.is_empty(),
        format!(
            "{} configurations, {} with F1 < 1 or uncovered questions {bad:?}",
            entries.len(),
            bad.len()
        ),
    )
}

fn labeling_dominance() -> Outcome {
    let data = generate(&SynthSpec {
        n_pairs: 800,
        seed: 8,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let (questions, pool) = split(data, 400);
    let unique = |selection| -> Result<usize, String> {
        let cfg = RunConfig {
            selection,
            batching: BatchingStrategy::Diverse,
            ..in_memory_config(8)
        };
        Ok(pipeline::plan(&cfg, &questions, &pool)
            .map_err(|e| e.to_string())?
            .selection
            .unique_demos()
            .len())
    };
    let cover = unique(SelectionStrategy::Cover)?;
    let topk = unique(SelectionStrategy::TopkQuestion)?;
    let share = cover as f64 / topk as f64;
    check(
        share <= 0.20,
        format!(
            "cover labels {cover} demos, topk_question labels {topk} ({:.1}%, need <= 20%)",
            share * 100.0
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = generate(&SynthSpec {
        n_pairs: 200,
        seed: 9,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let paths = write_magellan(&dir.path().join("data"), &data.pairs).map_err(|e| e.to_string())?;
    let cache = dir.path().join("cache.jsonl");
    let recording = RunConfig {
        backend: BackendConfig::Mock { flip: 0.25 },
        record: Some(cache.clone()),
        ..RunConfig::new(9, paths, dir.path().join("record"))
    };
    pipeline::run_pipeline(&recording).map_err(|e| e.to_string())?;

    let mut reports = Vec::new();
    for run in ["replay1", "replay2"] {
        let cfg = RunConfig {
            backend: BackendConfig::Replay { cache: cache.clone() },
            record: None,
            output_dir: dir.path().join(run),
            ..recording.clone()
        };
        pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(cfg.output_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?);
    }
    check(
        reports[0] == reports[1] && !reports[0].is_empty(),
        format!(
            "two replay runs: {} and {} bytes, identical = {}",
            reports[0].len(),
            reports[1].len(),
            reports[0] == reports[1]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("cost arithmetic", Duration::from_secs(5), cost_arithmetic),
        ("token saving (b=8, cover)", Duration::from_secs(10), token_saving),
        ("greedy unit-cover bound", Duration::from_secs(30), greedy_unit_bound),
        (
            "weighted batch-cover bound",
            Duration::from_secs(30),
            weighted_batch_bound,
        ),
        ("batching trace fidelity", Duration::from_secs(1), trace_fidelity),
        ("structure-feature fidelity", Duration::from_secs(1), structure_fidelity),
        (
            "oracle round trip, 12 configs",
            Duration::from_secs(60),
            oracle_round_trip,
        ),
        ("labeling-cost dominance", Duration::from_secs(60), labeling_dominance),
        ("replay determinism", Duration::from_secs(10), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let (status, detail) = match result {
            Ok(d) if took <= *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; took {took:.2?}, budget {budget:?}")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} [{}] {name}: {detail} ({took:.2?})", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
