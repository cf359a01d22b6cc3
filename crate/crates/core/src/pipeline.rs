//! End-to-end orchestration: extract, cluster, batch, select, label, prompt,
//! complete, parse, evaluate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::batching::{
    batch_random, cluster_questions, make_batches, Batch, BatchingStrategy, ClusterParams, DEFAULT_BATCH_SIZE,
    DEFAULT_EPS_PERCENTILE, DEFAULT_MIN_PTS,
};
use crate::costeval::{dollars, evaluate, CostLedger, LedgerSummary, MetricsReport, SharedLedger};
use crate::data::{load_dataset, split_dataset, Dataset, EntityPair, MatchLabel, SplitSpec};
use crate::error::{Error, Result};
use crate::features::{Extractor, FeatureVector, HashingEmbedder};
use crate::llm::{
    build_batch_prompt, complete, parse_batch_answers, prompt_digest, Answer, Backend, CompletionConfig, HttpBackend,
    MockOracle, PromptBundle, RecordingBackend, ReplayBackend, DEFAULT_TASK_DESCRIPTION,
};
use crate::selection::worklist::Worklist;
use crate::selection::{
    select_demonstrations, DemonstrationPool, Selection, SelectionParams, SelectionStrategy, DEFAULT_COVER_PERCENTILE,
    DEFAULT_K,
};
use crate::serialize::Tokenizer;
use crate::synth::DatasetPaths;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const TRACE_FILE: &str = "batches.trace.jsonl";
pub const WORKLIST_FILE: &str = "worklist.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Neighborhood radius; when unset it is the `eps_percentile` of pairwise distances.
    pub eps: Option<f64>,
    pub eps_percentile: f64,
    pub min_pts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: None,
            eps_percentile: DEFAULT_EPS_PERCENTILE,
            min_pts: DEFAULT_MIN_PTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Answers from gold labels with flip noise.
    Mock {
        #[serde(default)]
        flip: f64,
    },
    /// Serves completions from a JSON-lines cache.
    Replay { cache: PathBuf },
    /// OpenAI-compatible chat completions; the key is read from `api_key_env`.
    Http {
        base_url: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout() -> u64 {
    60
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { flip: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Demonstration labels come from the dataset (simulation).
    #[default]
    Gold,
    /// Demonstration labels come from the worklist file filled by `batcher label`.
    Worklist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pricing {
    /// Dollars per 1000 prompt tokens.
    pub price_per_1k: f64,
    pub output_price_per_1k: Option<f64>,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing {
            price_per_1k: 0.01,
            output_price_per_1k: None,
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_concurrency() -> usize {
    4
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetPaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub extractor: Extractor,
    #[serde(default)]
    pub batching: BatchingStrategy,
    #[serde(default)]
    pub selection: SelectionStrategy,
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub labels: LabelSource,
    /// Defaults to `worklist.tsv` in the output directory.
    #[serde(default)]
    pub worklist: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    #[serde(default)]
    pub task_description: Option<String>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Append every completion to this replay cache.
    #[serde(default)]
    pub record: Option<PathBuf>,
    #[serde(default)]
    pub pricing: Pricing,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub completion: CompletionConfig,
}

fn default_b() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_percentile() -> f64 {
    DEFAULT_COVER_PERCENTILE
}

impl RunConfig {
    /// Defaults for everything but the seed, data and output locations.
    pub fn new(seed: u64, dataset: DatasetPaths, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed,
            dataset,
            output_dir: output_dir.into(),
            extractor: Extractor::default(),
            batching: BatchingStrategy::default(),
            selection: SelectionStrategy::default(),
            b: DEFAULT_BATCH_SIZE,
            k: DEFAULT_K,
            percentile: DEFAULT_COVER_PERCENTILE,
            split: default_split(),
            labels: LabelSource::default(),
            worklist: None,
            tokenizer: Tokenizer::default(),
            task_description: None,
            concurrency: default_concurrency(),
            record: None,
            pricing: Pricing::default(),
            cluster: ClusterConfig::default(),
            backend: BackendConfig::default(),
            completion: CompletionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.b == 0 {
            return bad("b must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return bad(format!("percentile must be in (0, 100], got {}", self.percentile));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if let BackendConfig::Mock { flip } = self.backend {
            if !(0.0..=1.0).contains(&flip) {
                return bad(format!("mock flip must be in [0, 1], got {flip}"));
            }
        }
        if !(self.cluster.eps_percentile > 0.0 && self.cluster.eps_percentile <= 100.0) {
            return bad(format!(
                "eps_percentile must be in (0, 100], got {}",
                self.cluster.eps_percentile
            ));
        }
        if self.cluster.min_pts == 0 {
            return bad("min_pts must be at least 1".into());
        }
        if let Some(eps) = self.cluster.eps {
            ClusterParams::new(eps, self.cluster.min_pts)?;
        }
        SplitSpec::new(self.split, self.seed)?;
        self.completion.validate()?;
        self.ledger()?;
        Ok(())
    }

    pub fn worklist_path(&self) -> PathBuf {
        self.worklist
            .clone()
            .unwrap_or_else(|| self.output_dir.join(WORKLIST_FILE))
    }

    fn description(&self) -> &str {
        self.task_description.as_deref().unwrap_or(DEFAULT_TASK_DESCRIPTION)
    }

    fn ledger(&self) -> Result<CostLedger> {
        let mut ledger = CostLedger::new(dollars(self.pricing.price_per_1k)?);
        ledger.output_price_per_1k = self.pricing.output_price_per_1k.map(dollars).transpose()?;
        Ok(ledger)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Features, batches and demonstrations for one configuration, before any labeling.
#[derive(Debug, Clone)]
pub struct Plan {
    pub question_vectors: Vec<FeatureVector>,
    pub pool: DemonstrationPool,
    pub cluster_params: Option<ClusterParams>,
    pub batches: Vec<Batch>,
    pub selection: Selection,
}

pub fn plan(cfg: &RunConfig, questions: &[EntityPair], pool: &[EntityPair]) -> Result<Plan> {
    if questions.is_empty() || pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let embedder = HashingEmbedder::default();
    let question_vectors = cfg.extractor.extract_all(questions, &embedder)?;
    let pool_vectors = cfg.extractor.extract_all(pool, &embedder)?;
    let pool = DemonstrationPool::new(pool.to_vec(), pool_vectors)?;

    let (cluster_params, batches) = match cfg.batching {
        BatchingStrategy::Random => {
            let ids: Vec<usize> = (0..questions.len()).collect();
            (None, batch_random(&ids, cfg.b, cfg.seed)?)
        }
        strategy => {
            let params = match cfg.cluster.eps {
                Some(eps) => ClusterParams::new(eps, cfg.cluster.min_pts)?,
                None if question_vectors.len() < 2 => ClusterParams::new(0.0, cfg.cluster.min_pts)?,
                None => ClusterParams::from_percentile(
                    &question_vectors,
                    cfg.cluster.eps_percentile,
                    cfg.cluster.min_pts,
                    cfg.seed,
                )?,
            };
            let clusters = cluster_questions(&question_vectors, params)?;
            (Some(params), make_batches(strategy, &clusters, cfg.b, cfg.seed)?)
        }
    };

    let params = SelectionParams {
        strategy: cfg.selection,
        k: cfg.k,
        percentile: cfg.percentile,
        seed: cfg.seed,
    };
    let selection = select_demonstrations(&params, &batches, &question_vectors, &pool, cfg.tokenizer)?;
    Ok(Plan {
        question_vectors,
        pool,
        cluster_params,
        batches,
        selection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub extractor: Extractor,
    pub batching: BatchingStrategy,
    pub selection: SelectionStrategy,
    pub b: usize,
    pub k: usize,
    pub seed: u64,
    pub model: String,
    pub questions: usize,
    pub batches: usize,
    pub unique_demos: usize,
    pub cluster_eps: Option<f64>,
    pub cover_threshold: Option<f64>,
    /// Questions no selected demonstration lies within the cover threshold of.
    pub uncovered: Vec<usize>,
    pub metrics: MetricsReport,
    pub cost: LedgerSummary,
}

impl RunReport {
    pub fn render(&self) -> String {
        let m = &self.metrics;
        let c = &self.cost;
        let mut out = format!(
            "{} [{} / {} / {}] b={} k={} seed={}\n",
            self.dataset,
            self.batching.name(),
            self.selection.name(),
            serde_json::to_value(self.extractor)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            self.b,
            self.k,
            self.seed
        );
        out += &format!(
            "  questions {}  batches {}  demos labeled {}  uncovered {}\n",
            self.questions,
            self.batches,
            self.unique_demos,
            self.uncovered.len()
        );
        out += &format!(
            "  P {:.4}  R {:.4}  F1 {:.4}  (tp {} fp {} fn {} tn {}, unparsable {})\n",
            m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, m.tn, m.unparsable_count
        );
        out += &format!(
            "  tokens {}{}  api ${:.4}  labeling ${:.4}  total ${:.4}{}\n",
            c.api_tokens,
            if c.approximate_tokens { " (approx.)" } else { "" },
            c.api_dollars,
            c.label_dollars,
            c.total_dollars,
            if c.output_tokens_priced {
                ""
            } else {
                "  (output tokens not priced)"
            }
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub batch_id: usize,
    pub questions: Vec<usize>,
    pub demos: Vec<usize>,
    pub prompt_digest: String,
    pub prompt_tokens: usize,
    pub completion: String,
    pub answers: Vec<Option<MatchLabel>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub ledger: CostLedger,
    pub traces: Vec<BatchTrace>,
    pub worklist: Worklist,
}

/// Demonstration labels for the plan's selected demos.
///
/// In worklist mode the worklist file is created or refreshed; any selected
/// demo still unlabeled there stops the run.
fn resolve_labels(cfg: &RunConfig, plan: &Plan) -> Result<(Worklist, BTreeMap<usize, MatchLabel>)> {
    let unique = plan.selection.unique_demos();
    let mut worklist = Worklist::from_pool(&unique, &plan.pool.demos);
    match cfg.labels {
        LabelSource::Gold => {
            for e in &mut worklist.entries {
                e.label = plan.pool.demos[e.pool_index].gold;
            }
            if let Some(e) = worklist.entries.iter().find(|e| e.label.is_none()) {
                return Err(Error::UnlabeledDemo(e.pool_index));
            }
        }
        LabelSource::Worklist => {
            let path = cfg.worklist_path();
            if path.exists() {
                worklist.absorb(&Worklist::read(&path)?);
            }
            let missing = worklist.unlabeled();
            if missing > 0 {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                worklist.write(&path)?;
                return Err(Error::LabelsMissing {
                    missing,
                    worklist: path,
                });
            }
        }
    }
    let labels = worklist.labels();
    Ok((worklist, labels))
}

fn dispatch(
    cfg: &RunConfig,
    bundles: &[PromptBundle],
    backend: &dyn Backend,
    ledger: &SharedLedger,
) -> Result<Vec<String>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..bundles.len()).map(|_| None).collect());
    let workers = cfg.concurrency.min(bundles.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= bundles.len() {
                    break;
                }
                let r = complete(&bundles[i], &cfg.completion, backend, ledger, cfg.tokenizer);
                let failed = r.is_err();
                results.lock().expect("result lock poisoned")[i] = Some(r);
                if failed {
                    next.store(bundles.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(bundles.len());
    for r in results.into_inner().expect("result lock poisoned") {
        match r {
            Some(r) => out.push(r?),
            None => unreachable!("a batch was skipped without an earlier failure"),
        }
    }
    Ok(out)
}

/// Run one configuration over in-memory questions and demonstration pool.
pub fn run(
    cfg: &RunConfig,
    dataset_name: &str,
    questions: &[EntityPair],
    pool: &[EntityPair],
    backend: &dyn Backend,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let gold: Vec<MatchLabel> = questions
        .iter()
        .enumerate()
        .map(|(i, q)| {
            q.gold
                .ok_or_else(|| Error::InvalidParam(format!("question {i} has no gold label to evaluate against")))
        })
        .collect::<Result<_>>()?;

    let plan = plan(cfg, questions, pool)?;
    let (worklist, labels) = resolve_labels(cfg, &plan)?;
    let unique_demos = plan.selection.unique_demos().len();

    let mut ledger = cfg.ledger()?;
    ledger.charge_labels(unique_demos);
    let shared = SharedLedger::new(ledger);

    let mut bundles = Vec::with_capacity(plan.batches.len());
    for (batch, assignment) in plan.batches.iter().zip(&plan.selection.assignments) {
        let demos: Vec<EntityPair> = assignment
            .demo_indices
            .iter()
            .map(|&d| {
                let mut pair = plan.pool.demos[d].clone();
                pair.gold = labels.get(&d).copied();
                pair
            })
            .collect();
        let demo_refs: Vec<(usize, &EntityPair)> = assignment.demo_indices.iter().copied().zip(&demos).collect();
        let unlabeled: Vec<EntityPair> = batch.questions.iter().map(|&q| questions[q].unlabeled()).collect();
        let question_refs: Vec<(usize, &EntityPair)> = batch.questions.iter().copied().zip(&unlabeled).collect();
        bundles.push(build_batch_prompt(
            batch.id,
            cfg.description(),
            &demo_refs,
            &question_refs,
            cfg.tokenizer,
        )?);
    }

    let completions = dispatch(cfg, &bundles, backend, &shared)?;

    let mut answers = vec![Answer::Unparsable; questions.len()];
    let mut traces = Vec::with_capacity(bundles.len());
    for ((bundle, raw), assignment) in bundles.iter().zip(completions).zip(&plan.selection.assignments) {
        let parsed = parse_batch_answers(&raw, &bundle.question_order);
        for (&q, &a) in bundle.question_order.iter().zip(&parsed.answers) {
            answers[q] = a;
        }
        traces.push(BatchTrace {
            batch_id: bundle.batch_id,
            questions: bundle.question_order.clone(),
            demos: assignment.demo_indices.clone(),
            prompt_digest: prompt_digest(&bundle.text),
            prompt_tokens: bundle.token_count,
            completion: raw,
            answers: parsed
                .answers
                .iter()
                .map(|a| match a {
                    Answer::Label(l) => Some(*l),
                    Answer::Unparsable => None,
                })
                .collect(),
        });
    }

    let metrics = evaluate(&answers, &gold)?;
    let ledger = shared.into_inner();
    let report = RunReport {
        dataset: dataset_name.to_string(),
        extractor: cfg.extractor,
        batching: cfg.batching,
        selection: cfg.selection,
        b: cfg.b,
        k: cfg.k,
        seed: cfg.seed,
        model: cfg.completion.model_name.clone(),
        questions: questions.len(),
        batches: plan.batches.len(),
        unique_demos,
        cluster_eps: plan.cluster_params.map(|p| p.eps),
        cover_threshold: plan.selection.threshold.map(|t| t.t),
        uncovered: plan.selection.uncovered(),
        metrics,
        cost: ledger.summary(cfg.tokenizer.is_approximate()),
    };
    Ok(RunOutcome {
        report,
        ledger,
        traces,
        worklist,
    })
}

/// The run's questions (test split) and demonstration pool (train split).
#[derive(Debug, Clone)]
pub struct Workload {
    pub name: String,
    pub questions: Vec<EntityPair>,
    pub pool: Vec<EntityPair>,
}

pub fn load_workload(cfg: &RunConfig) -> Result<Workload> {
    let ds: Dataset = load_dataset(&cfg.dataset.table_a, &cfg.dataset.table_b, &cfg.dataset.pairs)?;
    let (train, _valid, test) = split_dataset(&ds, &SplitSpec::new(cfg.split, cfg.seed)?)?;
    Ok(Workload {
        name: ds.name,
        questions: test.pairs,
        pool: train.pairs,
    })
}

pub fn build_backend(cfg: &RunConfig, questions: &[EntityPair]) -> Result<Box<dyn Backend>> {
    let inner: Box<dyn Backend> = match &cfg.backend {
        BackendConfig::Mock { flip } => {
            let gold = questions
                .iter()
                .enumerate()
                .filter_map(|(i, q)| q.gold.map(|g| (i, g)))
                .collect();
            Box::new(MockOracle::new(gold, *flip, cfg.seed)?)
        }
        BackendConfig::Replay { cache } => Box::new(ReplayBackend::load(cache)?),
        BackendConfig::Http {
            base_url,
            api_key_env,
            timeout_secs,
        } => {
            let key = std::env::var(api_key_env).ok().filter(|k| !k.is_empty());
            Box::new(HttpBackend::new(
                base_url.clone(),
                key,
                Duration::from_secs(*timeout_secs),
            ))
        }
    };
    Ok(match &cfg.record {
        Some(path) => Box::new(RecordingBackend::new(inner, path)?),
        None => inner,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Write the snapshot, report, ledger, trace and worklist into `cfg.output_dir`.
pub fn write_outputs(cfg: &RunConfig, outcome: &RunOutcome) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
    write_file(&dir.join(REPORT_FILE), &to_json(&outcome.report)?)?;
    write_file(&dir.join(LEDGER_FILE), &to_json(&outcome.ledger)?)?;
    let mut trace = String::new();
    for t in &outcome.traces {
        trace += &serde_json::to_string(t).map_err(|e| Error::Serde(e.to_string()))?;
        trace.push('\n');
    }
    write_file(&dir.join(TRACE_FILE), &trace)?;
    outcome.worklist.write(&cfg.worklist_path())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Load, split, run and write outputs for one configuration.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let workload = load_workload(cfg)?;
    let backend = build_backend(cfg, &workload.questions)?;
    let outcome = run(cfg, &workload.name, &workload.questions, &workload.pool, &*backend)?;
    write_outputs(cfg, &outcome)?;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: RunConfig,
    pub outcome: RunOutcome,
}

/// Run every batching x selection combination with a fresh backend and ledger each,
/// writing into `<output_dir>/<batching>-<selection>/`.
pub fn sweep(base: &RunConfig) -> Result<Vec<SweepEntry>> {
    base.validate()?;
    let workload = load_workload(base)?;
    let mut out = Vec::new();
    for batching in BatchingStrategy::ALL {
        for selection in SelectionStrategy::ALL {
            let mut cfg = base.clone();
            cfg.batching = batching;
            cfg.selection = selection;
            cfg.output_dir = base
                .output_dir
                .join(format!("{}-{}", batching.name(), selection.name()));
            if base.worklist.is_none() {
                cfg.worklist = None;
            }
            let backend = build_backend(&cfg, &workload.questions)?;
            let outcome = run(&cfg, &workload.name, &workload.questions, &workload.pool, &*backend)?;
            write_outputs(&cfg, &outcome)?;
            out.push(SweepEntry { config: cfg, outcome });
        }
    }
    Ok(out)
}
