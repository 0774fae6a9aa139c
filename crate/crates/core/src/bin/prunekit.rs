use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use prunekit::data::{read_cifar, summarize, synthetic, CifarFormat, Dataset, SubsetSelector, SyntheticSpec};
use prunekit::deps::{compute_dependencies, ResidualPolicy};
use prunekit::digest::sha256_hex;
use prunekit::fixtures::{self, FixtureSize};
use prunekit::ir::{canonical_json, count_ops, count_params};
use prunekit::prune::{build_plan, score_filters, shrink_graph, transfer_weights, PrunePlan, RankingScope};
use prunekit::report::{check_consistent, pareto_report, Lineage};
use prunekit::runtime::{bench_inference, encode_weights, evaluate, init_weights, load_weights, save_weights, train, TrainConfig};
use prunekit::search::{
    bisect, dapr_search, oracle_sweep, pairwise_divergence, read_sweep_csv, write_sweep_csv, LrPolicy, SearchConfig,
    SplitData, SubsetSpec, SweepMode, SweepOptions, TrialOutcome,
};
use prunekit::{parse_model, serialize_model, Error, ModelGraph, Result, WeightStore};

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Dependency-aware structured pruning for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration document (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct PruneFlags {
    #[arg(long)]
    scope: Option<RankingScope>,
    #[arg(long)]
    residual_policy: Option<ResidualPolicy>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a bundled fixture's model IR.
    Fixture {
        name: String,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        /// Destination file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load the dataset and record an integrity summary.
    Ingest(Common),
    /// Train the model on the full dataset.
    Train(Common),
    /// Compute pruning dependencies and the cost census.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        residual_policy: Option<ResidualPolicy>,
    },
    /// Prune to a memory level and write the shrunk model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: f64,
        #[command(flatten)]
        flags: PruneFlags,
    },
    /// Data-aware search for the highest acceptable pruning level.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        /// Replace training with a monotone oracle: a level succeeds iff it
        /// does not exceed this threshold.
        #[arg(long)]
        oracle_threshold: Option<f64>,
    },
    /// Evaluate every grid level in the requested modes and write a CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        #[arg(long)]
        mode: Vec<SweepMode>,
    },
    /// Filter-selection divergence between plan documents.
    Divergence {
        #[command(flatten)]
        common: Common,
        #[arg(long = "plan", required = true)]
        plans: Vec<PathBuf>,
    },
    /// Time eval-mode inference.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Pareto summary of sweep CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Sweep CSVs; each needs its `.lineage.json` sidecar.
        #[arg(long = "csv")]
        csvs: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureSpec {
    fixture: String,
    #[serde(default)]
    resolution: Option<usize>,
    #[serde(default)]
    width: Option<usize>,
    #[serde(default)]
    num_classes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
enum DatasetConfig {
    Cifar10 { path: PathBuf, test_path: Option<PathBuf> },
    Cifar100 { path: PathBuf, test_path: Option<PathBuf> },
    Synthetic { synthetic: SyntheticSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SubsetConfig {
    Text(String),
    Selector(SubsetSelector),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model_path: Option<PathBuf>,
    /// Bundled fixture, used when no model file is available.
    model: Option<FixtureSpec>,
    weights_path: Option<PathBuf>,
    dataset: Option<DatasetConfig>,
    subset: Option<SubsetConfig>,
    train: TrainConfig,
    search: SearchConfig,
    sweep: SweepOptions,
    output_dir: Option<PathBuf>,
    seed: u64,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    stage: &'static str,
    lineage: Lineage,
}

impl Ctx {
    fn new(common: &Common, stage: &'static str) -> std::result::Result<Self, (Error, Ctx)> {
        let mut ctx = Ctx {
            cfg: RunConfig::default(),
            out: PathBuf::from("out"),
            stage,
            lineage: Lineage::default(),
        };
        match ctx.load(common) {
            Ok(()) => Ok(ctx),
            Err(e) => Err((e, ctx)),
        }
    }

    fn load(&mut self, common: &Common) -> Result<()> {
        if let Some(path) = &common.config {
            let text = read_text(path)?;
            self.lineage = std::mem::take(&mut self.lineage).with_input("config", sha256_hex(text.as_bytes()));
            self.cfg = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        if let Some(seed) = common.seed {
            self.cfg.seed = seed;
        }
        self.cfg.train.seed = self.cfg.seed;
        if let Some(dir) = common.output_dir.clone().or_else(|| self.cfg.output_dir.clone()) {
            self.out = dir;
        }
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(())
    }

    fn record(&mut self, name: &str, digest: String) {
        self.lineage = std::mem::take(&mut self.lineage).with_input(name, digest);
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn load_data(&mut self) -> Result<(Dataset, Option<Dataset>)> {
        let cfg = self.cfg.dataset.clone().ok_or_else(|| Error::Config("config has no dataset".into()))?;
        let (train, test) = match &cfg {
            DatasetConfig::Synthetic { synthetic: spec } => {
                let (tr, te) = synthetic(spec)?;
                (tr, Some(te))
            }
            DatasetConfig::Cifar10 { path, test_path } | DatasetConfig::Cifar100 { path, test_path } => {
                let format = match cfg {
                    DatasetConfig::Cifar10 { .. } => CifarFormat::Cifar10,
                    _ => CifarFormat::Cifar100,
                };
                let (tr, _) = read_cifar(path, format)?;
                let norm = tr.compute_normalization();
                let te = match test_path {
                    Some(p) => Some(read_cifar(p, format)?.0.with_normalization(norm.clone())),
                    None => None,
                };
                (tr.with_normalization(norm), te)
            }
        };
        let digest = dataset_digest(&train, test.as_ref());
        // A previous ingest pins the dataset.
        let ingest = self.path("ingest.json");
        if ingest.exists() {
            let doc: Value = serde_json::from_str(&read_text(&ingest)?)
                .map_err(|e| Error::Schema(format!("{}: {e}", ingest.display())))?;
            if doc["summary"]["digest"].as_str() != Some(digest.as_str()) {
                return Err(Error::Lineage(format!(
                    "dataset digest {digest} differs from the one recorded in {}",
                    ingest.display()
                )));
            }
        }
        self.record("dataset", digest);
        Ok((train, test))
    }

    fn fixture_size(&self) -> FixtureSize {
        let spec = self.cfg.model.as_ref();
        let (res, classes) = match &self.cfg.dataset {
            Some(DatasetConfig::Synthetic { synthetic: s }) => (s.resolution, s.num_classes),
            Some(DatasetConfig::Cifar10 { .. }) => (32, 10),
            Some(DatasetConfig::Cifar100 { .. }) => (32, 100),
            None => (32, 10),
        };
        FixtureSize {
            resolution: spec.and_then(|s| s.resolution).unwrap_or(res),
            width: spec.and_then(|s| s.width).unwrap_or(16),
            num_classes: spec.and_then(|s| s.num_classes).unwrap_or(classes),
        }
    }

    /// Explicit model path, else the model written by `train`, else the
    /// configured fixture.
    fn load_model(&mut self) -> Result<ModelGraph> {
        let trained = self.path("model.json");
        let path = self.cfg.model_path.clone().or_else(|| trained.exists().then_some(trained));
        let graph = match path {
            Some(p) => {
                let text = read_text(&p)?;
                self.record("model", sha256_hex(text.as_bytes()));
                return parse_model(&text);
            }
            None => {
                let spec = self.cfg.model.clone().ok_or_else(|| Error::Config("config names no model".into()))?;
                fixtures::by_name(&spec.fixture, self.fixture_size())?
            }
        };
        self.record("model", sha256_hex(serialize_model(&graph).as_bytes()));
        Ok(graph)
    }

    fn weights_path(&self) -> Option<PathBuf> {
        let trained = self.path("weights.bin");
        self.cfg.weights_path.clone().or_else(|| trained.exists().then_some(trained))
    }

    fn load_weights(&mut self, graph: &ModelGraph) -> Result<WeightStore> {
        let path = self
            .weights_path()
            .ok_or_else(|| Error::MissingWeight("no weights_path and no trained weights in output_dir".into()))?;
        let ws = load_weights(&path)?;
        ws.check_against(graph)?;
        self.record("weights", sha256_hex(&encode_weights(&ws)));
        Ok(ws)
    }

    fn subset(&self, data: &Dataset) -> Result<SubsetSpec> {
        let sel = match &self.cfg.subset {
            None => SubsetSelector::classes("all", &(0..data.num_classes()).collect::<Vec<_>>()),
            Some(SubsetConfig::Text(t)) => SubsetSelector::parse(t)?,
            Some(SubsetConfig::Selector(s)) => s.clone(),
        };
        Ok(SubsetSpec::new(sel.name.clone(), sel.resolve(data, self.cfg.seed)?))
    }

    fn splits(&mut self) -> Result<SplitData> {
        let (full, test) = self.load_data()?;
        let test = test.ok_or_else(|| Error::Config("dataset has no test split (set test_path)".into()))?;
        let (train, val) = full.split(self.cfg.train.val_fraction, self.cfg.seed)?;
        Ok(SplitData { train, val, test })
    }

    fn apply(&mut self, flags: &PruneFlags) {
        if let Some(s) = flags.scope {
            self.cfg.search.ranking_scope = s;
        }
        if let Some(p) = flags.residual_policy {
            self.cfg.search.residual_policy = p;
        }
    }

    /// Writes `{<key>: body, lineage}` and returns the path.
    fn emit(&self, file: &str, key: &str, body: Value) -> Result<PathBuf> {
        let mut doc = serde_json::Map::new();
        doc.insert(key.into(), body);
        doc.insert("lineage".into(), serde_json::to_value(&self.lineage).expect("lineage"));
        let path = self.path(file);
        write(&path, canonical_json(&Value::Object(doc)).as_bytes())?;
        Ok(path)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn dataset_digest(train: &Dataset, test: Option<&Dataset>) -> String {
    let mut bytes = Vec::new();
    for ds in std::iter::once(train).chain(test) {
        bytes.extend(ds.image_shape().iter().flat_map(|d| (*d as u32).to_le_bytes()));
        bytes.extend_from_slice(ds.labels());
        for i in 0..ds.len() {
            bytes.extend_from_slice(ds.image(i));
        }
    }
    sha256_hex(&bytes)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn ingest(ctx: &mut Ctx) -> Result<()> {
    let (train, test) = ctx.load_data()?;
    let format = match &ctx.cfg.dataset {
        Some(DatasetConfig::Cifar10 { .. }) => "cifar10",
        Some(DatasetConfig::Cifar100 { .. }) => "cifar100",
        _ => "synthetic",
    };
    let digest = ctx.lineage.inputs["dataset"].clone();
    let subset = ctx.subset(&train)?;
    let mut summary = to_value(&summarize(format, &train, digest));
    summary["test_records"] = json!(test.as_ref().map(|t| t.len()));
    summary["subset"] = to_value(&subset);
    let path = ctx.emit("ingest.json", "summary", summary)?;
    println!("{}", path.display());
    Ok(())
}

fn train_cmd(ctx: &mut Ctx) -> Result<()> {
    let (data, test) = ctx.load_data()?;
    let graph = ctx.load_model()?;
    let start = match ctx.cfg.weights_path.clone() {
        Some(_) => ctx.load_weights(&graph)?,
        None => init_weights(&graph, ctx.cfg.seed),
    };
    let out = train(&graph, &start, &data, &ctx.cfg.train)?;
    let test_acc = match &test {
        Some(t) => Some(evaluate(&graph, &out.weights, t)?.accuracy),
        None => None,
    };
    let model_text = serialize_model(&graph);
    write(&ctx.path("model.json"), model_text.as_bytes())?;
    save_weights(&ctx.path("weights.bin"), &out.weights)?;
    ctx.lineage.output = sha256_hex(&encode_weights(&out.weights));
    let path = ctx.emit(
        "train.json",
        "training",
        json!({
            "history": out.history,
            "best_epoch": out.best_epoch,
            "best_val_accuracy": out.best_val_accuracy,
            "test_accuracy": test_acc,
            "config": ctx.cfg.train,
        }),
    )?;
    println!("{}", path.display());
    Ok(())
}

fn analyze(ctx: &mut Ctx, policy: Option<ResidualPolicy>) -> Result<()> {
    let graph = ctx.load_model()?;
    let deps = compute_dependencies(&graph, policy.unwrap_or(ctx.cfg.search.residual_policy))?;
    let params = count_params(&graph);
    let ops = count_ops(&graph);
    let path = ctx.emit(
        "analysis.json",
        "analysis",
        json!({
            "dependencies": deps.report(),
            "params": params,
            "ops": ops,
        }),
    )?;
    println!("{}", path.display());
    Ok(())
}

fn prune_cmd(ctx: &mut Ctx, level: f64, flags: &PruneFlags) -> Result<()> {
    ctx.apply(flags);
    let graph = ctx.load_model()?;
    let deps = compute_dependencies(&graph, ctx.cfg.search.residual_policy)?;
    let weights = if level == 0.0 && ctx.weights_path().is_none() {
        None
    } else {
        Some(ctx.load_weights(&graph)?)
    };
    let scores = match &weights {
        Some(ws) => score_filters(&graph, ws, &deps)?,
        None => Vec::new(),
    };
    let plan = build_plan(&graph, &deps, &scores, level, ctx.cfg.search.ranking_scope)?;
    let (shrunk, remap) = shrink_graph(&graph, &plan)?;
    let model_text = serialize_model(&shrunk);
    write(&ctx.path("pruned_model.json"), model_text.as_bytes())?;
    ctx.lineage.output = sha256_hex(model_text.as_bytes());
    if let Some(ws) = &weights {
        save_weights(&ctx.path("pruned_weights.bin"), &transfer_weights(ws, &remap, &shrunk)?)?;
    }
    let path = ctx.emit("plan.json", "plan", to_value(&plan))?;
    println!("{}", path.display());
    Ok(())
}

fn search_cmd(ctx: &mut Ctx, flags: &PruneFlags, oracle: Option<f64>) -> Result<()> {
    ctx.apply(flags);
    let cfg = ctx.cfg.search.clone();
    if let Some(threshold) = oracle {
        let pass = |level: f64| level <= threshold;
        let mut trial = |level: f64| -> Result<TrialOutcome> {
            Ok(TrialOutcome {
                achieved_level: Some(level),
                val_accuracy: Some(if pass(level) { 1.0 } else { 0.0 }),
                ..Default::default()
            })
        };
        let result = bisect(&cfg, 1.0, &mut trial)?;
        let sweep_max = cfg.grid().into_iter().filter(|l| pass(*l)).fold(None, |_, l| Some(l));
        let path = ctx.emit(
            "search.json",
            "result",
            json!({
                "converged_level": result.converged_level,
                "baseline_accuracy": result.baseline_accuracy,
                "threshold": result.threshold,
                "trace": result.trace,
                "oracle": {"threshold": threshold, "sweep_maximum": sweep_max},
            }),
        )?;
        println!("{}", path.display());
        return Ok(());
    }
    let data = ctx.splits()?;
    let graph = ctx.load_model()?;
    let weights = ctx.load_weights(&graph)?;
    let subset = ctx.subset(&data.train)?;
    let lr = LrPolicy::from_training(&ctx.cfg.train.lr_schedule, ctx.cfg.train.epochs);
    let outcome = dapr_search(&graph, &weights, &data, &subset, &cfg, &ctx.cfg.train, &lr)?;
    ctx.record("finetuned_weights", outcome.finetuned_digest.clone());
    if let Some(best) = &outcome.best {
        let text = serialize_model(&best.graph);
        write(&ctx.path("search_model.json"), text.as_bytes())?;
        save_weights(&ctx.path("search_weights.bin"), &best.weights)?;
        ctx.lineage.output = sha256_hex(&encode_weights(&best.weights));
    }
    let mut result = to_value(&outcome.result);
    result["subset"] = to_value(&subset);
    result["plan"] = to_value(&outcome.best.as_ref().map(|b| &b.plan));
    let path = ctx.emit("search.json", "result", result)?;
    println!("{}", path.display());
    Ok(())
}

fn sweep_cmd(ctx: &mut Ctx, flags: &PruneFlags, modes: Vec<SweepMode>) -> Result<()> {
    ctx.apply(flags);
    let data = ctx.splits()?;
    let graph = ctx.load_model()?;
    let weights = ctx.load_weights(&graph)?;
    let subset = ctx.subset(&data.train)?;
    let mut opts = ctx.cfg.sweep.clone();
    if !modes.is_empty() {
        opts.modes = modes;
    }
    let lr = LrPolicy::from_training(&ctx.cfg.train.lr_schedule, ctx.cfg.train.epochs);
    let rows = oracle_sweep(&graph, &weights, &data, &subset, &ctx.cfg.search, &ctx.cfg.train, &lr, &opts)?;
    let csv = write_sweep_csv(&rows)?;
    let path = ctx.path("sweep.csv");
    write(&path, csv.as_bytes())?;
    ctx.lineage.output = sha256_hex(csv.as_bytes());
    write(&sidecar(&path), canonical_json(&ctx.lineage).as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("lineage.json")
}

fn read_plan(path: &Path) -> Result<(PrunePlan, Option<Lineage>)> {
    let text = read_text(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    match doc.get("plan") {
        Some(plan) => {
            let plan = serde_json::from_value(plan.clone())
                .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            let lineage = doc.get("lineage").and_then(|l| serde_json::from_value(l.clone()).ok());
            Ok((plan, lineage))
        }
        None => Ok((PrunePlan::from_json(&text)?, None)),
    }
}

fn divergence_cmd(ctx: &mut Ctx, paths: &[PathBuf]) -> Result<()> {
    let mut plans = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let (plan, _) = read_plan(p)?;
        ctx.record(&format!("plan_{i}"), sha256_hex(read_text(p)?.as_bytes()));
        plans.push(plan);
    }
    let report = pairwise_divergence(&plans)?;
    let path = ctx.emit("divergence.json", "divergence", to_value(&report))?;
    println!("{}", path.display());
    Ok(())
}

fn bench_cmd(ctx: &mut Ctx, batch: usize, reps: usize) -> Result<()> {
    let graph = ctx.load_model()?;
    let weights = match ctx.weights_path() {
        Some(_) => ctx.load_weights(&graph)?,
        None => init_weights(&graph, ctx.cfg.seed),
    };
    let stats = bench_inference(&graph, &weights, batch, reps)?;
    let path = ctx.emit("bench.json", "bench", to_value(&stats))?;
    println!("{}", path.display());
    Ok(())
}

fn report_cmd(ctx: &mut Ctx, csvs: &[PathBuf], buckets: usize) -> Result<()> {
    let csvs = if csvs.is_empty() {
        vec![ctx.path("sweep.csv")]
    } else {
        csvs.to_vec()
    };
    let mut lineages = Vec::new();
    let mut rows = Vec::new();
    for (i, path) in csvs.iter().enumerate() {
        let text = read_text(path)?;
        let side = sidecar(path);
        let lineage: Lineage = serde_json::from_str(&read_text(&side)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", side.display())))?;
        lineage.verify_output(text.as_bytes())?;
        ctx.record(&format!("csv_{i}"), lineage.output.clone());
        lineages.push(lineage);
        rows.extend(read_sweep_csv(&text)?);
    }
    check_consistent(&lineages)?;
    let report = pareto_report(&rows, buckets)?;
    let path = ctx.emit("report.json", "report", to_value(&report))?;
    println!("{}", path.display());
    Ok(())
}

fn fail(err: &Error, ctx: Option<&Ctx>, stage: &str) -> ExitCode {
    let doc = json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
            "stage": stage,
            "exit_code": err.exit_code(),
            "input_digests": ctx.map(|c| c.lineage.inputs.clone()).unwrap_or_default(),
        }
    });
    let text = canonical_json(&doc);
    if let Some(c) = ctx {
        if c.out.is_dir() {
            let _ = fs::write(c.path("error.json"), &text);
        }
    }
    eprint!("{text}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stage) = match &cli.command {
        Command::Fixture {
            name,
            resolution,
            width,
            num_classes,
            out,
        } => {
            let size = FixtureSize {
                resolution: *resolution,
                width: *width,
                num_classes: *num_classes,
            };
            let res = fixtures::by_name(name, size).and_then(|g| {
                let text = serialize_model(&g);
                match out {
                    Some(p) => write(p, text.as_bytes()),
                    None => {
                        print!("{text}");
                        Ok(())
                    }
                }
            });
            return match res {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e, None, "fixture"),
            };
        }
        Command::Ingest(c) => (c, "ingest"),
        Command::Train(c) => (c, "train"),
        Command::Analyze { common, .. } => (common, "analyze"),
        Command::Prune { common, .. } => (common, "prune"),
        Command::Search { common, .. } => (common, "search"),
        Command::Sweep { common, .. } => (common, "sweep"),
        Command::Divergence { common, .. } => (common, "divergence"),
        Command::Bench { common, .. } => (common, "bench"),
        Command::Report { common, .. } => (common, "report"),
    };
    let mut ctx = match Ctx::new(common, stage) {
        Ok(c) => c,
        Err((e, c)) => return fail(&e, Some(&c), stage),
    };
    let res = match &cli.command {
        Command::Ingest(_) => {
            // re-ingesting replaces the pinned summary
            let _ = fs::remove_file(ctx.path("ingest.json"));
            ingest(&mut ctx)
        }
        Command::Train(_) => train_cmd(&mut ctx),
        Command::Analyze { residual_policy, .. } => analyze(&mut ctx, *residual_policy),
        Command::Prune { level, flags, .. } => prune_cmd(&mut ctx, *level, flags),
        Command::Search {
            flags,
            oracle_threshold,
            ..
        } => search_cmd(&mut ctx, flags, *oracle_threshold),
        Command::Sweep { flags, mode, .. } => sweep_cmd(&mut ctx, flags, mode.clone()),
        Command::Divergence { plans, .. } => divergence_cmd(&mut ctx, plans),
        Command::Bench { batch, reps, .. } => bench_cmd(&mut ctx, *batch, *reps),
        Command::Report { csvs, buckets, .. } => report_cmd(&mut ctx, csvs, *buckets),
        Command::Fixture { .. } => unreachable!("handled above"),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, Some(&ctx), ctx.stage),
    }
}
