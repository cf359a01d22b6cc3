use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use batcher::data::DatasetStats;
use batcher::pipeline::{self, RunConfig, RunReport, REPORT_FILE};
use batcher::selection::worklist::label_interactive;
use batcher::synth::{generate, write_magellan, SynthSpec};
use batcher::{load_dataset, split_dataset, Error, SplitSpec};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_LABELS: u8 = 3;

#[derive(Parser)]
#[command(name = "batcher", version, about = "Batch prompting for entity resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset, validate it and print its statistics and split sizes.
    Ingest {
        #[arg(long)]
        table_a: PathBuf,
        #[arg(long)]
        table_b: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Run one configuration end to end.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        #[arg(long)]
        json: bool,
    },
    /// Label the demonstrations listed in a worklist file, one at a time.
    Label { worklist: PathBuf },
    /// Sweep all batching x selection combinations with the mock oracle.
    Simulate {
        #[command(flatten)]
        opts: RunOpts,
        /// Generate a clustered synthetic dataset of this many pairs into <output_dir>/data.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
    },
    /// Print stored results: a report.json, a run directory, or a sweep directory.
    Report {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

/// Flags override the config file.
#[derive(Args, Clone, Default)]
struct RunOpts {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    table_a: Option<PathBuf>,
    #[arg(long)]
    table_b: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// lr, jac or semantic
    #[arg(long)]
    extractor: Option<String>,
    /// random, similar or diverse
    #[arg(long)]
    batching: Option<String>,
    /// fixed, topk_batch, topk_question or cover
    #[arg(long)]
    selection: Option<String>,
    /// Questions per batch.
    #[arg(short = 'b', long = "batch-size")]
    b: Option<usize>,
    /// Demonstrations per batch for the fixed and top-k strategies.
    #[arg(short = 'k', long = "demos")]
    k: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// gold or worklist
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    worklist: Option<PathBuf>,
    /// cl100k or approximate
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Use the mock oracle with this flip probability.
    #[arg(long, conflicts_with_all = ["replay", "base_url"])]
    flip: Option<f64>,
    /// Serve completions from this replay cache.
    #[arg(long, conflicts_with = "base_url")]
    replay: Option<PathBuf>,
    /// Call an OpenAI-compatible endpoint; the key comes from --api-key-env.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, requires = "base_url")]
    api_key_env: Option<String>,
    /// Append every completion to this replay cache.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    price_per_1k: Option<f64>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Labels(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam(_) => Failure::Config(e.into()),
            Error::LabelsMissing { .. } => Failure::Labels(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn set(table: &mut Table, path: &[&str], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty key path");
    let mut t = table;
    for key in parents {
        t = t
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("config section is a table");
    }
    t.insert(last.to_string(), value);
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl RunOpts {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(config_err)?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing {}", path.display()))
                    .map_err(config_err)?
            }
            None => Table::new(),
        };
        let t = &mut table;
        let s = |v: &str| Value::String(v.to_string());
        if let Some(v) = self.seed {
            let v = i64::try_from(v).map_err(config_err)?;
            set(t, &["seed"], Value::Integer(v));
        }
        if let Some(v) = &self.output_dir {
            set(t, &["output_dir"], path_value(v));
        }
        for (key, v) in [
            ("table_a", &self.table_a),
            ("table_b", &self.table_b),
            ("pairs", &self.pairs),
        ] {
            if let Some(v) = v {
                set(t, &["dataset", key], path_value(v));
            }
        }
        for (key, v) in [
            ("extractor", &self.extractor),
            ("batching", &self.batching),
            ("selection", &self.selection),
            ("labels", &self.labels),
            ("tokenizer", &self.tokenizer),
        ] {
            if let Some(v) = v {
                set(t, &[key], s(v));
            }
        }
        for (key, v) in [("b", self.b), ("k", self.k), ("concurrency", self.concurrency)] {
            if let Some(v) = v {
                set(t, &[key], Value::Integer(v as i64));
            }
        }
        if let Some(v) = self.percentile {
            set(t, &["percentile"], Value::Float(v));
        }
        if let Some(v) = self.eps {
            set(t, &["cluster", "eps"], Value::Float(v));
        }
        if let Some(v) = self.min_pts {
            set(t, &["cluster", "min_pts"], Value::Integer(v as i64));
        }
        if let Some(v) = &self.worklist {
            set(t, &["worklist"], path_value(v));
        }
        if let Some(v) = &self.record {
            set(t, &["record"], path_value(v));
        }
        if let Some(flip) = self.flip {
            let mut b = Table::new();
            b.insert("kind".into(), s("mock"));
            b.insert("flip".into(), Value::Float(flip));
            t.insert("backend".into(), Value::Table(b));
        }
        if let Some(cache) = &self.replay {
            let mut b = Table::new();
            b.insert("kind".into(), s("replay"));
            b.insert("cache".into(), path_value(cache));
            t.insert("backend".into(), Value::Table(b));
        }
        if let Some(url) = &self.base_url {
            let mut b = Table::new();
            b.insert("kind".into(), s("http"));
            b.insert("base_url".into(), s(url));
            if let Some(env) = &self.api_key_env {
                b.insert("api_key_env".into(), s(env));
            }
            t.insert("backend".into(), Value::Table(b));
        }
        if let Some(v) = &self.model {
            set(t, &["completion", "model_name"], s(v));
        }
        if let Some(v) = self.temperature {
            set(t, &["completion", "temperature"], Value::Float(v));
        }
        if let Some(v) = self.price_per_1k {
            set(t, &["pricing", "price_per_1k"], Value::Float(v));
        }

        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .context("invalid configuration")
            .map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(value: serde_json::Result<serde_json::Value>) -> Result<(), Failure> {
    println!(
        "{}",
        serde_json::to_string_pretty(&value.map_err(runtime_err)?).map_err(runtime_err)?
    );
    Ok(())
}

fn ingest(a: &Path, b: &Path, pairs: &Path, seed: u64, json: bool) -> Result<(), Failure> {
    let ds = load_dataset(a, b, pairs)?;
    let stats = DatasetStats::from(&ds);
    let (train, valid, test) = split_dataset(&ds, &SplitSpec::standard(seed))?;
    let sizes = [train.len(), valid.len(), test.len()];
    if json {
        return print_json(Ok(
            serde_json::json!({ "stats": stats, "split": sizes, "schema": ds.schema }),
        ));
    }
    println!(
        "{}: {} pairs, {} matches, {} attributes ({})",
        stats.name,
        stats.pairs,
        stats.matches,
        stats.attributes,
        ds.schema.join(", ")
    );
    println!(
        "split (seed {seed}): train {} / valid {} / test {}",
        sizes[0], sizes[1], sizes[2]
    );
    Ok(())
}

fn run(opts: &RunOpts, json: bool) -> Result<(), Failure> {
    let cfg = opts.resolve()?;
    let outcome = pipeline::run_pipeline(&cfg)?;
    if json {
        return print_json(serde_json::to_value(&outcome.report));
    }
    print!("{}", outcome.report.render());
    println!("  outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn label(path: &Path) -> Result<(), Failure> {
    if !path.exists() {
        return Err(config_err(anyhow::anyhow!(
            "worklist {} does not exist",
            path.display()
        )));
    }
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let session = label_interactive(path, stdin.lock(), stdout.lock())?;
    println!(
        "labeled {}, skipped {}, {} still unlabeled in {}",
        session.labeled,
        session.skipped,
        session.remaining,
        path.display()
    );
    Ok(())
}

fn summary_line(r: &RunReport) -> String {
    format!(
        "{:<9} {:<14} {:>6.4} {:>9} {:>9.4} {:>9.4} {:>6} {:>9}",
        r.batching.name(),
        r.selection.name(),
        r.metrics.f1,
        r.cost.api_tokens,
        r.cost.api_dollars,
        r.cost.label_dollars,
        r.unique_demos,
        r.uncovered.len()
    )
}

const SUMMARY_HEADER: &str = "batching  selection          F1    tokens      api$    label$  demos uncovered";

fn simulate(opts: &RunOpts, synthetic: Option<usize>, clusters: usize) -> Result<(), Failure> {
    let mut cfg = match synthetic {
        Some(n) => {
            let out = opts
                .output_dir
                .clone()
                .ok_or_else(|| config_err(anyhow::anyhow!("--synthetic needs --output-dir")))?;
            let seed = opts.seed.unwrap_or(0);
            let data = generate(&SynthSpec {
                n_pairs: n,
                n_clusters: clusters,
                seed,
                ..SynthSpec::default()
            })?;
            let paths = write_magellan(&out.join("data"), &data.pairs)?;
            let with_data = RunOpts {
                table_a: Some(paths.table_a),
                table_b: Some(paths.table_b),
                pairs: Some(paths.pairs),
                seed: Some(seed),
                ..opts.clone()
            };
            with_data.resolve()?
        }
        None => opts.resolve()?,
    };
    if !matches!(cfg.backend, pipeline::BackendConfig::Mock { .. }) {
        cfg.backend = pipeline::BackendConfig::Mock { flip: 0.0 };
    }
    let entries = pipeline::sweep(&cfg)?;
    println!("{SUMMARY_HEADER}");
    for e in &entries {
        println!("{}", summary_line(&e.outcome.report));
    }
    println!("{} reports under {}", entries.len(), cfg.output_dir.display());
    Ok(())
}

fn report(path: &Path, json: bool) -> Result<(), Failure> {
    let mut files = Vec::new();
    if path.is_file() {
        files.push(path.to_path_buf());
    } else if path.join(REPORT_FILE).is_file() {
        files.push(path.join(REPORT_FILE));
    } else if path.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(runtime_err)?
            .filter_map(|e| e.ok().map(|e| e.path().join(REPORT_FILE)))
            .filter(|p| p.is_file())
            .collect();
        dirs.sort();
        files = dirs;
    }
    if files.is_empty() {
        return Err(runtime_err(anyhow::anyhow!(
            "no {REPORT_FILE} found at {}",
            path.display()
        )));
    }
    let reports = files
        .iter()
        .map(|f| pipeline::read_report(f))
        .collect::<Result<Vec<_>, _>>()?;
    if json {
        return print_json(serde_json::to_value(&reports));
    }
    if let [single] = reports.as_slice() {
        print!("{}", single.render());
    } else {
        println!("{SUMMARY_HEADER}");
        for r in &reports {
            println!("{}", summary_line(r));
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest {
            table_a,
            table_b,
            pairs,
            seed,
            json,
        } => ingest(&table_a, &table_b, &pairs, seed, json),
        Command::Run { opts, json } => run(&opts, json),
        Command::Label { worklist } => label(&worklist),
        Command::Simulate {
            opts,
            synthetic,
            clusters,
        } => simulate(&opts, synthetic, clusters),
        Command::Report { path, json } => report(&path, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = dispatch(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, err) = match f {
                Failure::Config(e) => (EXIT_CONFIG, e),
                Failure::Runtime(e) => (EXIT_RUNTIME, e),
                Failure::Labels(e) => (EXIT_LABELS, e),
            };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
