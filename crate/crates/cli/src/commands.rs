use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ultragcn::dataset::{load_fragment, DatasetError};
use ultragcn::graph::CooccurrenceGraph;
use ultragcn::model::ModelError;
use ultragcn::oracle::{self, DenseGraph, OracleError};
use ultragcn::synthetic::{self, SyntheticConfig};
use ultragcn::training::{fit_with, TrainError, SELECTION_CUTOFF};
use ultragcn::{
    assemble, evaluate as run_eval, AssembleOptions, BipartiteGraph, EmbeddingModel, EvalReport,
    InteractionDataset, NeighborIndex, Split, TrainConfig,
};

use crate::config::RunConfig;

/// Environment variable naming the neighbor-index cache directory.
pub const CACHE_ENV: &str = "ULTRAGCN_CACHE_DIR";

/// Process exit code per failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Io = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, msg: impl std::fmt::Display) -> Self {
        Failure {
            kind,
            error: anyhow!("{msg}"),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure {
            kind: Kind::Data,
            error: e.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Config(_) => Kind::Config,
            TrainError::NonFinite { .. } => Kind::Numeric,
            _ => Kind::Data,
        };
        Failure {
            kind,
            error: e.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::NonFinite => Kind::Numeric,
            _ => Kind::Data,
        };
        Failure {
            kind,
            error: e.into(),
        }
    }
}

trait OrFail<T> {
    fn or_fail(self, kind: Kind, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self, kind: Kind, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind,
            error: e.into().context(what()),
        })
    }
}

pub fn init_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .or_fail(Kind::Config, || format!("cannot start {n} worker threads"))?;
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<InteractionDataset, Failure> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| Failure::new(Kind::Config, format!("missing {flag}")))
    };
    let train_path = need(&cfg.data.train, "--data-train")?;
    let test_path = need(&cfg.data.test, "--data-test")?;
    let format = cfg.data.format;
    let train = load_fragment(&train_path, format)?;
    let test = load_fragment(&test_path, format)?;
    let valid = cfg
        .data
        .valid
        .as_ref()
        .map(|p| load_fragment(p, format))
        .transpose()?;
    let options = AssembleOptions {
        valid_fraction: cfg.data.valid_fraction,
        seed: cfg.data.split_seed,
    };
    let (dataset, warnings) = assemble(&train, valid.as_ref(), &test, &options)?;
    if warnings.total() > 0 {
        log::warn!("dropped evaluation pairs: {warnings:?}");
    }
    Ok(dataset)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).or_fail(Kind::Io, || format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).or_fail(Kind::Io, || "serialize".into())?;
    fs::write(path, text + "\n").or_fail(Kind::Io, || format!("cannot write {}", path.display()))
}

fn cache_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("cache"))
}

fn cache_key(dataset: &InteractionDataset, k: usize) -> (String, String) {
    let fp = dataset.fingerprint();
    let file = format!("neighbors-{}-k{k}.bin", &fp[..16]);
    (format!("{fp}:{k}"), file)
}

fn read_cached_neighbors(cfg: &RunConfig, dataset: &InteractionDataset, k: usize) -> Option<NeighborIndex> {
    let (key, file) = cache_key(dataset, k);
    let path = cache_dir(cfg).join(file);
    let reader = std::io::BufReader::new(File::open(&path).ok()?);
    match NeighborIndex::read_cache(&key, reader) {
        Ok(Some(idx)) if idx.num_nodes() == dataset.num_items => {
            log::info!("neighbor index loaded from {}", path.display());
            Some(idx)
        }
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable cache {}: {e}", path.display());
            None
        }
    }
}

#[derive(Serialize)]
struct PrepareSummary {
    #[serde(flatten)]
    manifest: ultragcn::dataset::DatasetManifest,
    cooccurrence_nnz: usize,
    truncated_rows: usize,
    neighbors_k: usize,
    neighbor_entries: usize,
    neighbor_cache: Option<PathBuf>,
}

pub fn prepare(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    let graph = BipartiteGraph::build(&dataset);
    let cooc = CooccurrenceGraph::build(&graph);
    let k = cfg.train.neighbors;
    let (index, cache) = if k > 0 {
        let index = NeighborIndex::build(&cooc, k).or_fail(Kind::Data, || "neighbor index".into())?;
        let dir = cache_dir(cfg);
        create_dir(&dir)?;
        let (key, file) = cache_key(&dataset, k);
        let path = dir.join(file);
        let out = File::create(&path).or_fail(Kind::Io, || format!("cannot write {}", path.display()))?;
        let mut out = BufWriter::new(out);
        index
            .write_cache(&key, &mut out)
            .and_then(|_| out.flush())
            .or_fail(Kind::Io, || format!("cannot write {}", path.display()))?;
        (Some(index), Some(path))
    } else {
        (None, None)
    };
    let manifest = dataset.manifest();
    println!("{:<16}{:>12}", "users", manifest.num_users);
    println!("{:<16}{:>12}", "items", manifest.num_items);
    println!("{:<16}{:>12}", "interactions", manifest.num_interactions);
    println!("{:<16}{:>12.5}", "density", manifest.density);
    println!(
        "{:<16}{:>12}",
        "train/val/test",
        format!("{}/{}/{}", manifest.num_train, manifest.num_valid, manifest.num_test)
    );
    let summary = PrepareSummary {
        manifest,
        cooccurrence_nnz: cooc.nnz(),
        truncated_rows: cooc.truncated_rows(),
        neighbors_k: k,
        neighbor_entries: index.as_ref().map_or(0, |i| i.total_entries()),
        neighbor_cache: cache,
    };
    write_json(&cfg.out_dir.join("manifest.json"), &summary)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    best_epoch: usize,
    best_valid_recall: Option<f64>,
    epochs_run: usize,
    stopped_early: bool,
    fingerprint: String,
}

fn run_fit(
    cfg: &RunConfig,
    train: &TrainConfig,
    dataset: &InteractionDataset,
    log_path: Option<&Path>,
) -> Result<ultragcn::FitResult, Failure> {
    let cached = if train.neighbors > 0 && train.gamma != 0.0 {
        read_cached_neighbors(cfg, dataset, train.neighbors)
    } else {
        None
    };
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).or_fail(Kind::Io, || format!("cannot write {}", p.display()))?,
        )),
        None => None,
    };
    let mut write_err = None;
    let result = fit_with(dataset, train, cached, |record| {
        if let (Some(out), None) = (log.as_mut(), write_err.as_ref()) {
            let line = serde_json::to_string(record).expect("log records serialize");
            if let Err(e) = writeln!(out, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(Failure {
            kind: Kind::Io,
            error: anyhow::Error::from(e).context("training log"),
        });
    }
    if let Some(mut out) = log {
        out.flush().or_fail(Kind::Io, || "training log".into())?;
    }
    if !result.model.is_finite() {
        return Err(Failure::new(Kind::Numeric, "trained embeddings are not finite"));
    }
    Ok(result)
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    let result = run_fit(cfg, &cfg.train, &dataset, Some(&cfg.out_dir.join("train_log.jsonl")))?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        create_dir(parent)?;
    }
    let out = File::create(&ckpt).or_fail(Kind::Io, || format!("cannot write {}", ckpt.display()))?;
    let mut out = BufWriter::new(out);
    result
        .model
        .write_checkpoint(&mut out)
        .and_then(|_| out.flush())
        .or_fail(Kind::Io, || format!("cannot write {}", ckpt.display()))?;
    write_json(
        &cfg.out_dir.join("train_summary.json"),
        &TrainSummary {
            config: &cfg.train,
            best_epoch: result.best_epoch,
            best_valid_recall: result.best_valid_recall,
            epochs_run: result.epochs_run,
            stopped_early: result.stopped_early,
            fingerprint: dataset.fingerprint(),
        },
    )?;
    println!(
        "best epoch {} of {}; checkpoint {}",
        result.best_epoch,
        result.epochs_run,
        ckpt.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, split: Split) -> Result<(), Failure> {
    let dataset = load_dataset(cfg)?;
    let ckpt = cfg.checkpoint_path();
    let file = File::open(&ckpt).or_fail(Kind::Data, || format!("cannot open {}", ckpt.display()))?;
    let model = EmbeddingModel::read_checkpoint(std::io::BufReader::new(file))?;
    let report = run_eval(&model, &dataset, &cfg.cutoffs, split)
        .or_fail(Kind::Data, || "evaluation".into())?;
    print!("{}", report.to_table());
    create_dir(&cfg.out_dir)?;
    let name = match split {
        Split::Valid => "report_valid.json",
        Split::Test => "report_test.json",
    };
    write_json(&cfg.out_dir.join(name), &report)
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    gamma: f64,
    #[serde(rename = "K")]
    k: usize,
    recall_at_20: f64,
    ndcg_at_20: f64,
    best_epoch: usize,
    valid_recall_at_20: Option<f64>,
}

pub fn sweep(cfg: &RunConfig) -> Result<(), Failure> {
    let grid = &cfg.sweep;
    if grid.lambda.is_empty() || grid.gamma.is_empty() || grid.neighbors.is_empty() {
        return Err(Failure::new(Kind::Config, "sweep grid has an empty axis"));
    }
    let dataset = load_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("sweep.csv");
    let mut csv_out = csv::Writer::from_path(&path)
        .or_fail(Kind::Io, || format!("cannot write {}", path.display()))?;
    let mut stdout = csv::Writer::from_writer(std::io::stdout());
    for &k in &grid.neighbors {
        for &lambda in &grid.lambda {
            for &gamma in &grid.gamma {
                let train = TrainConfig {
                    lambda,
                    gamma,
                    neighbors: k,
                    ..cfg.train.clone()
                };
                train.validate()?;
                log::info!("sweep point λ={lambda} γ={gamma} K={k}");
                let fit = run_fit(cfg, &train, &dataset, None)?;
                let report: EvalReport = run_eval(&fit.model, &dataset, &[SELECTION_CUTOFF], Split::Test)
                    .or_fail(Kind::Data, || "evaluation".into())?;
                let row = SweepRow {
                    lambda,
                    gamma,
                    k,
                    recall_at_20: report.recall[0],
                    ndcg_at_20: report.ndcg[0],
                    best_epoch: fit.best_epoch,
                    valid_recall_at_20: fit.best_valid_recall,
                };
                for w in [&mut csv_out as &mut dyn CsvSink, &mut stdout] {
                    w.row(&row).or_fail(Kind::Io, || "sweep output".into())?;
                }
            }
        }
    }
    csv_out.flush().or_fail(Kind::Io, || "sweep output".into())?;
    stdout.flush().or_fail(Kind::Io, || "sweep output".into())?;
    Ok(())
}

trait CsvSink {
    fn row(&mut self, row: &SweepRow) -> csv::Result<()>;
}

impl<W: Write> CsvSink for csv::Writer<W> {
    fn row(&mut self, row: &SweepRow) -> csv::Result<()> {
        self.serialize(row)?;
        self.flush().map_err(csv::Error::from)
    }
}

#[derive(Args)]
pub struct OracleArgs {
    /// Undirected edge list ("a b" per line) checked for limit convergence.
    #[arg(long)]
    graph: Vec<PathBuf>,
    /// User–item pair list checked for the one-step dot-product expansion.
    #[arg(long)]
    bipartite: Vec<PathBuf>,
    /// Random graphs per built-in suite.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    /// Largest allowed ‖Pˡ − limit‖∞.
    #[arg(long, default_value_t = 1e-6)]
    limit_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_layers: usize,
    /// Largest allowed expansion residual.
    #[arg(long, default_value_t = 1e-10)]
    decomposition_tol: f64,
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>, Failure> {
    let text = fs::read_to_string(path).or_fail(Kind::Data, || format!("cannot read {}", path.display()))?;
    let mut edges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .or_fail(Kind::Data, || format!("{}:{}", path.display(), n + 1))?;
        match nums[..] {
            [a, b] => edges.push((a, b)),
            _ => {
                return Err(Failure::new(
                    Kind::Data,
                    format!("{}:{}: expected two node ids", path.display(), n + 1),
                ))
            }
        }
    }
    Ok(edges)
}

fn oracle_data(e: OracleError, path: &Path) -> Failure {
    Failure::new(Kind::Data, format!("{}: {e}", path.display()))
}

fn embeddings(n: usize, d: usize, rng: &mut ChaCha8Rng) -> nalgebra::DMatrix<f64> {
    use rand::Rng;
    nalgebra::DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

pub fn oracle_check(args: &OracleArgs) -> Result<(), Failure> {
    let mut failures = 0;
    let mut report = |ok: bool, line: String| {
        println!("{} {line}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let limit_check = |g: &DenseGraph| oracle::converge_to_limit(g, args.limit_tol, args.max_layers);

    for t in 0..args.trials {
        use rand::Rng;
        let n = rng.random_range(2..=50);
        let g = DenseGraph::random_connected(n, 0.1, &mut rng).map_err(|e| Failure::new(Kind::Numeric, e))?;
        let c = limit_check(&g).map_err(|e| Failure::new(Kind::Numeric, e))?;
        report(
            c.layers.is_some(),
            format!("limit random#{t} n={n} layers={:?} max_err={:.3e}", c.layers, c.max_error),
        );
    }
    for t in 0..args.trials {
        use rand::Rng;
        let (nu, ni) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let g = DenseGraph::random_bipartite(nu, ni, 0.4, &mut rng).map_err(|e| Failure::new(Kind::Numeric, e))?;
        let e = embeddings(g.num_nodes(), 8, &mut rng);
        let r = oracle::max_dot_decomposition_residual(&g, &e).map_err(|e| Failure::new(Kind::Numeric, e))?;
        report(
            r <= args.decomposition_tol,
            format!("expansion random#{t} users={nu} items={ni} residual={r:.3e}"),
        );
    }
    for path in &args.graph {
        let edges = read_edges(path)?;
        let n = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
        let g = DenseGraph::from_edges(n, &edges).map_err(|e| oracle_data(e, path))?;
        let c = limit_check(&g).map_err(|e| oracle_data(e, path))?;
        report(
            c.layers.is_some(),
            format!("limit {} n={n} layers={:?} max_err={:.3e}", path.display(), c.layers, c.max_error),
        );
    }
    for path in &args.bipartite {
        let pairs = read_edges(path)?;
        let nu = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
        let ni = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
        let g = DenseGraph::bipartite(nu, ni, &pairs).map_err(|e| oracle_data(e, path))?;
        let e = embeddings(g.num_nodes(), 8, &mut rng);
        let r = oracle::max_dot_decomposition_residual(&g, &e).map_err(|e| oracle_data(e, path))?;
        report(
            r <= args.decomposition_tol,
            format!("expansion {} users={nu} items={ni} residual={r:.3e}", path.display()),
        );
    }
    if failures > 0 {
        return Err(Failure::new(Kind::Numeric, format!("{failures} oracle check(s) failed")));
    }
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory receiving train.txt and test.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 943)]
    users: usize,
    #[arg(long, default_value_t = 1682)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    topics: usize,
    #[arg(long, default_value_t = 20)]
    min_per_user: usize,
    #[arg(long, default_value_t = 106.0)]
    mean_per_user: f64,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let config = SyntheticConfig {
        num_users: args.users,
        num_items: args.items,
        num_topics: args.topics,
        topics_per_user: SyntheticConfig::default().topics_per_user.min(args.topics),
        min_per_user: args.min_per_user,
        mean_per_user: args.mean_per_user,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    let (train, test) = synthetic::generate_fragments(&config)?;
    create_dir(&args.out_dir)?;
    for (name, frag) in [("train.txt", &train), ("test.txt", &test)] {
        let path = args.out_dir.join(name);
        let mut out = BufWriter::new(
            File::create(&path).or_fail(Kind::Io, || format!("cannot write {}", path.display()))?,
        );
        for (u, i) in &frag.pairs {
            writeln!(out, "{u} {i}").or_fail(Kind::Io, || format!("cannot write {}", path.display()))?;
        }
        out.flush().or_fail(Kind::Io, || format!("cannot write {}", path.display()))?;
    }
    println!("{} train and {} test pairs in {}", train.len(), test.len(), args.out_dir.display());
    Ok(())
}
