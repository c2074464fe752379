//! `affordlab` command-line driver.

pub mod config;
pub mod error;
pub mod io;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use affordlab::geometry::{CameraIntrinsics, ViewpointRecord};
use affordlab::heatmap::AffordanceHeatmap;
use affordlab::metrics::{volumetric_iou, MetricsReport};
use affordlab::netcore::{
    random_hemisphere_view, train_affordance, train_structure, ModelKind, VelocityModel,
};
use affordlab::pipeline::{
    active_loop, fuse_observations, ground, reconstruct, worst_initial_view, AffordanceNet,
    Observation, Strategy, StructureNet, ViewTrace,
};
use affordlab::synthscene::{
    dataset_seeds, generate_object, ground_truth_affordance, occupancy_set, QueryTable,
    SyntheticObject,
};
use affordlab::voxel::{Occupancy, SvoxFile};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{RunConfig, TrainKind};
pub use error::CliError;
use io::{cell, csv_bytes, read_json, write_bytes, write_json, Dataset};

/// Version tag in the first column of benchmark CSVs.
pub const BENCH_SCHEMA: &str = "1";

const VIEW_SALT: u64 = 0x7669_6577;
const NOISE_SALT: u64 = 0x6e6f_6973;
const LOOP_SALT: u64 = 0x6c6f_6f70;

#[derive(Debug, Parser)]
#[command(
    name = "affordlab",
    version,
    about = "Synthetic affordance grounding and view planning"
)]
pub struct Cli {
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use a single worker thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic objects, the query table and a hashed manifest.
    GenDataset {
        /// Number of objects (default: `dataset_count`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a structure or affordance model.
    Train {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Dataset directory (default: `paths.dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Reconstruct occupancy of one object from rendered views.
    Reconstruct {
        #[command(flatten)]
        target: Target,
        /// Structure model (default: `paths.structure_model`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of rendered input views (default: `views`).
        #[arg(long)]
        views: Option<usize>,
    },
    /// Ground a query on an occupancy (ground truth unless given).
    Ground {
        #[command(flatten)]
        target: Target,
        /// Affordance query (default: the object's first query).
        #[arg(long)]
        query: Option<String>,
        /// Affordance model (default: `paths.affordance_model`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// `.occ.json` file to ground on.
        #[arg(long)]
        occupancy: Option<PathBuf>,
    },
    /// Run the view-planning loop on one object.
    Plan {
        #[command(flatten)]
        target: Target,
        /// Affordance query (default: the object's first query).
        #[arg(long)]
        query: Option<String>,
        #[command(flatten)]
        models: ModelPaths,
        /// Total number of views (default: `budget`).
        #[arg(long)]
        budget: Option<usize>,
        /// active, random or sequential (default: `strategy`).
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Initial candidate index; defaults to the worst-visibility view.
        #[arg(long)]
        initial: Option<usize>,
    },
    /// Benchmark sweeps over a dataset.
    Bench {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Dataset directory (default: `paths.dataset`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        models: ModelPaths,
        /// Structure checkpoint trained on single views (views_vs_iou).
        #[arg(long)]
        single: Option<PathBuf>,
        /// Structure checkpoint trained on multiple views (views_vs_iou).
        #[arg(long)]
        multi: Option<PathBuf>,
    },
    /// Score prediction files against ground-truth files, pairwise.
    Eval {
        /// Predicted `.occ.json` or `.heat.json`; repeat to pair with each `--gt`.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground-truth file of the same kind as its `--pred`.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Target {
    /// Dataset directory (default: `paths.dataset`).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Object id or index in the dataset.
    #[arg(long)]
    pub object: String,
}

#[derive(Debug, Clone, Args)]
pub struct ModelPaths {
    /// Structure model (default: `paths.structure_model`).
    #[arg(long)]
    pub structure: Option<PathBuf>,
    /// Affordance model (default: `paths.affordance_model`).
    #[arg(long)]
    pub affordance: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Structure,
    Affordance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    ViewsVsIou,
    StrategyVsAiou,
}

/// Sidecar written next to every command's outputs.
#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'a str,
    args: A,
    config: &'a RunConfig,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let threads = if cli.deterministic { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenDataset { count } => {
            cmd_gen_dataset(cfg, count.unwrap_or(cfg.dataset_count), out)
        }
        Command::Train { kind, dataset } => {
            let kind = match kind {
                KindArg::Structure => TrainKind::Structure,
                KindArg::Affordance => TrainKind::Affordance,
            };
            cmd_train(
                cfg,
                kind,
                &pick(dataset, &cfg.paths.dataset, "dataset")?,
                out,
            )
        }
        Command::Reconstruct {
            target,
            model,
            views,
        } => {
            let ds = Dataset::load(&pick(&target.dataset, &cfg.paths.dataset, "dataset")?)?;
            let model = pick(model, &cfg.paths.structure_model, "structure model")?;
            cmd_reconstruct(
                cfg,
                &ds,
                &target.object,
                &model,
                views.unwrap_or(cfg.views),
                out,
            )
        }
        Command::Ground {
            target,
            query,
            model,
            occupancy,
        } => {
            let ds = Dataset::load(&pick(&target.dataset, &cfg.paths.dataset, "dataset")?)?;
            let model = pick(model, &cfg.paths.affordance_model, "affordance model")?;
            cmd_ground(
                cfg,
                &ds,
                &target.object,
                query.as_deref(),
                &model,
                occupancy.as_deref(),
                out,
            )
        }
        Command::Plan {
            target,
            query,
            models,
            budget,
            strategy,
            initial,
        } => {
            let ds = Dataset::load(&pick(&target.dataset, &cfg.paths.dataset, "dataset")?)?;
            let s = pick(
                &models.structure,
                &cfg.paths.structure_model,
                "structure model",
            )?;
            let a = pick(
                &models.affordance,
                &cfg.paths.affordance_model,
                "affordance model",
            )?;
            let plan = PlanArgs {
                object: target.object.clone(),
                query: query.clone(),
                budget: budget.unwrap_or(cfg.budget),
                strategy: strategy.unwrap_or(cfg.strategy),
                initial: *initial,
            };
            cmd_plan(cfg, &ds, &plan, &s, &a, out)
        }
        Command::Bench {
            suite,
            dataset,
            models,
            single,
            multi,
        } => {
            let ds = Dataset::load(&pick(dataset, &cfg.paths.dataset, "dataset")?)?;
            match suite {
                Suite::ViewsVsIou => {
                    let single = pick(single, &None, "single-view structure model")?;
                    let multi = pick(
                        multi,
                        &cfg.paths.structure_model,
                        "multi-view structure model",
                    )?;
                    cmd_bench_views(cfg, &ds, &single, &multi, out)
                }
                Suite::StrategyVsAiou => {
                    let s = pick(
                        &models.structure,
                        &cfg.paths.structure_model,
                        "structure model",
                    )?;
                    let a = pick(
                        &models.affordance,
                        &cfg.paths.affordance_model,
                        "affordance model",
                    )?;
                    cmd_bench_strategies(cfg, &ds, &s, &a, out)
                }
            }
        }
        Command::Eval { pred, gt } => cmd_eval(cfg, pred, gt, out),
    }
}

fn pick(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path given")))
}

fn write_echo<A: Serialize>(
    out: &Path,
    command: &str,
    args: A,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    write_json(
        &out.join(format!("{command}.config.json")),
        &Echo {
            command,
            args,
            config: cfg,
        },
    )
}

fn rng_for(cfg: &RunConfig, obj: &SyntheticObject, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ obj.seed.rotate_left(21) ^ salt)
}

fn load_model(path: &Path, kind: ModelKind, cfg: &RunConfig) -> Result<VelocityModel, CliError> {
    let m: VelocityModel = read_json(path)?;
    m.expect_kind(kind)?;
    if m.meta.resolution != cfg.resolution || m.meta.channels != cfg.channels {
        return Err(CliError::Config(format!(
            "{} has r={}, C={} but the config has r={}, C={}",
            path.display(),
            m.meta.resolution,
            m.meta.channels,
            cfg.resolution,
            cfg.channels
        )));
    }
    Ok(m)
}

/// Object ids with characters unsafe in file names replaced.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn resolve_query<'a>(
    ds: &'a Dataset,
    obj: &SyntheticObject,
    query: Option<&'a str>,
) -> Result<&'a str, CliError> {
    match query {
        Some(q) => {
            ds.queries.lookup(q)?;
            Ok(q)
        }
        None => {
            ds.queries.queries_for(obj).first().copied().ok_or_else(|| {
                CliError::Data(format!("{} has no affordance queries", obj.object_id))
            })
        }
    }
}

pub fn cmd_gen_dataset(cfg: &RunConfig, count: usize, out: &Path) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Config("count must be positive".into()));
    }
    let objects: Vec<SyntheticObject> = dataset_seeds(cfg.seed, count)
        .into_iter()
        .map(generate_object)
        .collect();
    let table = QueryTable::default();
    for o in &objects {
        o.validate(&table)?;
    }
    Dataset::write(out, cfg.seed, &objects, &table)?;
    write_echo(out, "gen-dataset", BTreeMap::from([("count", count)]), cfg)
}

pub fn cmd_train(
    cfg: &RunConfig,
    kind: TrainKind,
    dataset: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let ds = Dataset::load(dataset)?;
    let tcfg = cfg.trainer(kind);
    let (model, curve, name) = match kind {
        TrainKind::Structure => {
            let (m, c) = train_structure(&ds.objects, &tcfg, &cfg.structure_flow)?;
            (m, c, "structure")
        }
        TrainKind::Affordance => {
            let (m, c) =
                train_affordance(&ds.objects, &ds.queries, &tcfg, &cfg.affordance_train_flow)?;
            (m, c, "affordance")
        }
    };
    write_json(&out.join(format!("{name}.model.json")), &model)?;
    let rows: Vec<Vec<String>> = curve
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), cell(Some(*l))])
        .collect();
    write_bytes(
        &out.join(format!("{name}.loss.csv")),
        &csv_bytes(&["step".into(), "loss".into()], &rows)?,
    )?;
    write_echo(
        out,
        "train",
        BTreeMap::from([
            ("kind", name.to_string()),
            ("dataset", dataset.display().to_string()),
        ]),
        cfg,
    )
}

/// Views used by `reconstruct` and the views-vs-IoU benchmark for `obj`.
pub fn object_views(
    cfg: &RunConfig,
    obj: &SyntheticObject,
    n: usize,
) -> Result<Vec<affordlab::geometry::Viewpoint>, CliError> {
    let intr = CameraIntrinsics::evaluation(cfg.image_size)?;
    let mut rng = rng_for(cfg, obj, VIEW_SALT);
    (0..n)
        .map(|_| random_hemisphere_view(&mut rng, &intr).map_err(CliError::from))
        .collect()
}

#[derive(Serialize)]
struct ViewsFile {
    object_id: String,
    views: Vec<ViewpointRecord>,
}

pub fn cmd_reconstruct(
    cfg: &RunConfig,
    ds: &Dataset,
    object: &str,
    model_path: &Path,
    n_views: usize,
    out: &Path,
) -> Result<(), CliError> {
    let obj = ds.object(object)?;
    let model = load_model(model_path, ModelKind::Structure, cfg)?;
    let gt = occupancy_set(obj, cfg.resolution)?;
    let views = object_views(cfg, obj, n_views)?;
    let obs = views
        .iter()
        .map(|v| Observation::render(obj, &gt, v, cfg.channels))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = fuse_observations(&obs, cfg.resolution)?;
    let pred = reconstruct(
        &obs,
        &model,
        &cfg.structure_flow,
        &mut rng_for(cfg, obj, NOISE_SALT),
    )?;
    let id = slug(&obj.object_id);
    write_json(&out.join(format!("{id}.svox.json")), &SvoxFile::from(&grid))?;
    write_json(&out.join(format!("{id}.occ.json")), &pred)?;
    write_json(&out.join(format!("{id}.gt.occ.json")), &gt)?;
    let records = views.iter().map(ViewpointRecord::from).collect();
    write_json(
        &out.join(format!("{id}.views.json")),
        &ViewsFile {
            object_id: obj.object_id.clone(),
            views: records,
        },
    )?;
    write_echo(
        out,
        "reconstruct",
        BTreeMap::from([
            ("object", obj.object_id.clone()),
            ("model", model_path.display().to_string()),
            ("views", n_views.to_string()),
        ]),
        cfg,
    )
}

pub fn cmd_ground(
    cfg: &RunConfig,
    ds: &Dataset,
    object: &str,
    query: Option<&str>,
    model_path: &Path,
    occupancy: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let obj = ds.object(object)?;
    let query = resolve_query(ds, obj, query)?;
    let model = load_model(model_path, ModelKind::Affordance, cfg)?;
    let occ: Occupancy = match occupancy {
        Some(p) => read_json(p)?,
        None => occupancy_set(obj, cfg.resolution)?,
    };
    let heat = ground(
        &occ,
        query,
        &ds.queries,
        &model,
        &cfg.affordance_flow,
        &mut rng_for(cfg, obj, NOISE_SALT),
    )?;
    let gt = ground_truth_affordance(obj, query, &ds.queries, cfg.resolution)?;
    let stem = format!("{}.{}", slug(&obj.object_id), slug(query));
    write_json(&out.join(format!("{stem}.heat.json")), &heat)?;
    write_json(&out.join(format!("{stem}.gt.heat.json")), &gt)?;
    let mut args = BTreeMap::from([
        ("object", obj.object_id.clone()),
        ("query", query.to_string()),
        ("model", model_path.display().to_string()),
    ]);
    if let Some(p) = occupancy {
        args.insert("occupancy", p.display().to_string());
    }
    write_echo(out, "ground", args, cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanArgs {
    pub object: String,
    pub query: Option<String>,
    pub budget: usize,
    pub strategy: Strategy,
    pub initial: Option<usize>,
}

/// Metric columns of a planning-loop iteration.
fn iteration_report(
    trace_iter: &affordlab::pipeline::IterationRecord,
    gt_heat: &AffordanceHeatmap,
) -> Result<MetricsReport, CliError> {
    let mut report = MetricsReport::affordance(&trace_iter.heatmap, gt_heat)?;
    report.set("iou", Some(trace_iter.iou));
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    cfg: &RunConfig,
    ds: &Dataset,
    obj: &SyntheticObject,
    query: &str,
    strategy: Strategy,
    budget: usize,
    initial: Option<usize>,
    nets: (&StructureNet, &AffordanceNet),
) -> Result<ViewTrace, CliError> {
    let lc = cfg.loop_config();
    let cands = lc.candidate_views()?;
    let start = match initial {
        Some(i) => *cands
            .get(i)
            .ok_or_else(|| CliError::Config(format!("initial index {i} >= {}", cands.len())))?,
        None => cands[worst_initial_view(obj, query, &ds.queries, &cands, cfg.resolution)?],
    };
    let mut rng = rng_for(cfg, obj, LOOP_SALT);
    Ok(active_loop(
        obj,
        query,
        &ds.queries,
        &start,
        budget,
        strategy,
        nets.0,
        nets.1,
        &lc,
        &mut rng,
    )?)
}

fn require_trained(m: &VelocityModel, path: &Path) -> Result<(), CliError> {
    if m.is_trained() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} is untrained", path.display())))
    }
}

pub fn cmd_plan(
    cfg: &RunConfig,
    ds: &Dataset,
    args: &PlanArgs,
    structure: &Path,
    affordance: &Path,
    out: &Path,
) -> Result<(), CliError> {
    if args.budget == 0 || args.budget > cfg.candidates {
        return Err(CliError::Config(format!(
            "budget must lie in 1..={}",
            cfg.candidates
        )));
    }
    let obj = ds.object(&args.object)?;
    let query = resolve_query(ds, obj, args.query.as_deref())?;
    let sm = load_model(structure, ModelKind::Structure, cfg)?;
    let am = load_model(affordance, ModelKind::Affordance, cfg)?;
    require_trained(&sm, structure)?;
    require_trained(&am, affordance)?;
    let nets = (StructureNet::new(&sm)?, AffordanceNet::new(&am)?);
    let trace = run_loop(
        cfg,
        ds,
        obj,
        query,
        args.strategy,
        args.budget,
        args.initial,
        (&nets.0, &nets.1),
    )?;
    let gt = ground_truth_affordance(obj, query, &ds.queries, cfg.resolution)?;
    let reports = trace
        .iterations
        .iter()
        .map(|it| iteration_report(it, &gt))
        .collect::<Result<Vec<_>, _>>()?;
    let metric_names: Vec<String> = reports[0].values.keys().cloned().collect();
    let mut header: Vec<String> = ["object_id", "query", "strategy", "views"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metric_names.iter().cloned());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![
                obj.object_id.clone(),
                query.to_string(),
                args.strategy.to_string(),
                (i + 1).to_string(),
            ];
            row.extend(metric_names.iter().map(|m| cell(r.get(m))));
            row
        })
        .collect();
    let stem = format!("{}.{}", slug(&obj.object_id), args.strategy);
    write_json(&out.join(format!("{stem}.trace.json")), &trace)?;
    write_bytes(
        &out.join(format!("{stem}.metrics.csv")),
        &csv_bytes(&header, &rows)?,
    )?;
    let mut echo = args.clone();
    echo.query = Some(query.to_string());
    write_echo(out, "plan", echo, cfg)
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Header of the views-vs-IoU CSV.
pub fn views_header() -> Vec<String> {
    strings(&["schema", "row", "checkpoint", "object_id", "views", "iou"])
}

pub fn cmd_bench_views(
    cfg: &RunConfig,
    ds: &Dataset,
    single: &Path,
    multi: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let models = [
        ("single", load_model(single, ModelKind::Structure, cfg)?),
        ("multi", load_model(multi, ModelKind::Structure, cfg)?),
    ];
    for ((_, m), p) in models.iter().zip([single, multi]) {
        require_trained(m, p)?;
    }
    let max = cfg.bench_max_views;
    let mut samples: Vec<(&str, String, usize, f64)> = Vec::new();
    for obj in &ds.objects {
        let gt = occupancy_set(obj, cfg.resolution)?;
        let views = object_views(cfg, obj, max)?;
        let obs = views
            .iter()
            .map(|v| Observation::render(obj, &gt, v, cfg.channels))
            .collect::<Result<Vec<_>, _>>()?;
        for (name, m) in &models {
            for k in 1..=max {
                let pred = reconstruct(
                    &obs[..k],
                    m,
                    &cfg.structure_flow,
                    &mut rng_for(cfg, obj, NOISE_SALT),
                )?;
                samples.push((name, obj.object_id.clone(), k, volumetric_iou(&pred, &gt)?));
            }
        }
    }
    let mut rows: Vec<Vec<String>> = samples
        .iter()
        .map(|(c, o, k, v)| {
            strings(&[
                BENCH_SCHEMA,
                "sample",
                c,
                o,
                &k.to_string(),
                &cell(Some(*v)),
            ])
        })
        .collect();
    for (name, _) in &models {
        for k in 1..=max {
            let mean = mean_defined(
                samples
                    .iter()
                    .filter(|s| s.0 == *name && s.2 == k)
                    .map(|s| Some(s.3)),
            );
            rows.push(strings(&[
                BENCH_SCHEMA,
                "mean",
                name,
                "",
                &k.to_string(),
                &cell(mean),
            ]));
        }
    }
    write_bytes(
        &out.join("views_vs_iou.csv"),
        &csv_bytes(&views_header(), &rows)?,
    )?;
    let args = BTreeMap::from([
        ("suite", "views_vs_iou".to_string()),
        ("dataset", ds.root.display().to_string()),
        ("single", single.display().to_string()),
        ("multi", multi.display().to_string()),
    ]);
    write_echo(out, "bench", args, cfg)
}

/// Header of the strategy-vs-aIoU CSV.
pub fn strategy_header() -> Vec<String> {
    strings(&[
        "schema",
        "row",
        "strategy",
        "object_id",
        "query",
        "views",
        "aiou",
        "acd",
        "iou",
    ])
}

/// (strategy, object id, query, views, aIoU, aCD, IoU)
type StrategySample = (Strategy, String, String, usize, f64, Option<f64>, f64);

pub fn cmd_bench_strategies(
    cfg: &RunConfig,
    ds: &Dataset,
    structure: &Path,
    affordance: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let sm = load_model(structure, ModelKind::Structure, cfg)?;
    let am = load_model(affordance, ModelKind::Affordance, cfg)?;
    require_trained(&sm, structure)?;
    require_trained(&am, affordance)?;
    let nets = (StructureNet::new(&sm)?, AffordanceNet::new(&am)?);
    let strategies = [Strategy::Active, Strategy::Sequential, Strategy::Random];
    let mut samples: Vec<StrategySample> = Vec::new();
    for obj in &ds.objects {
        let query = resolve_query(ds, obj, None)?;
        for s in strategies {
            let trace = run_loop(cfg, ds, obj, query, s, cfg.budget, None, (&nets.0, &nets.1))?;
            for (i, it) in trace.iterations.iter().enumerate() {
                samples.push((
                    s,
                    obj.object_id.clone(),
                    query.to_string(),
                    i + 1,
                    it.aiou,
                    it.acd,
                    it.iou,
                ));
            }
        }
    }
    let mut rows: Vec<Vec<String>> = samples
        .iter()
        .map(|(s, o, q, k, a, c, i)| {
            strings(&[
                BENCH_SCHEMA,
                "sample",
                &s.to_string(),
                o,
                q,
                &k.to_string(),
                &cell(Some(*a)),
                &cell(*c),
                &cell(Some(*i)),
            ])
        })
        .collect();
    for s in strategies {
        for k in 1..=cfg.budget {
            let sel: Vec<_> = samples.iter().filter(|x| x.0 == s && x.3 == k).collect();
            rows.push(strings(&[
                BENCH_SCHEMA,
                "mean",
                &s.to_string(),
                "",
                "",
                &k.to_string(),
                &cell(mean_defined(sel.iter().map(|x| Some(x.4)))),
                &cell(mean_defined(sel.iter().map(|x| x.5))),
                &cell(mean_defined(sel.iter().map(|x| Some(x.6)))),
            ]));
        }
    }
    write_bytes(
        &out.join("strategy_vs_aiou.csv"),
        &csv_bytes(&strategy_header(), &rows)?,
    )?;
    let args = BTreeMap::from([
        ("suite", "strategy_vs_aiou".to_string()),
        ("dataset", ds.root.display().to_string()),
        ("structure", structure.display().to_string()),
        ("affordance", affordance.display().to_string()),
    ]);
    write_echo(out, "bench", args, cfg)
}

enum EvalInput {
    Occupancy(Occupancy),
    Heatmap(AffordanceHeatmap),
}

fn read_eval_input(path: &Path) -> Result<EvalInput, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let bad = |e: serde_json::Error| CliError::Data(format!("{}: {e}", path.display()));
    if value.get("kind").is_some() {
        let h: AffordanceHeatmap = serde_json::from_value(value).map_err(bad)?;
        h.validate()?;
        Ok(EvalInput::Heatmap(h))
    } else {
        Ok(EvalInput::Occupancy(
            serde_json::from_value(value).map_err(bad)?,
        ))
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pred: &[PathBuf],
    gt: &[PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    if pred.len() != gt.len() {
        return Err(CliError::Config(format!(
            "{} prediction files but {} ground-truth files",
            pred.len(),
            gt.len()
        )));
    }
    let mut reports = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let report = match (read_eval_input(p)?, read_eval_input(g)?) {
            (EvalInput::Occupancy(a), EvalInput::Occupancy(b)) => MetricsReport::geometry(
                &a,
                &b,
                cfg.eval_views,
                cfg.eval_points,
                cfg.image_size,
                cfg.seed,
            )?,
            (EvalInput::Heatmap(a), EvalInput::Heatmap(b)) => MetricsReport::affordance(&a, &b)?,
            _ => {
                return Err(CliError::Data(format!(
                    "{} and {} hold different kinds of data",
                    p.display(),
                    g.display()
                )))
            }
        };
        reports.push(report);
    }
    let names: Vec<String> = {
        let mut all: Vec<String> = reports
            .iter()
            .flat_map(|r| r.values.keys().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    };
    let mut header = strings(&["row", "pred", "gt"]);
    header.extend(names.iter().cloned());
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .zip(pred.iter().zip(gt))
        .map(|(r, (p, g))| {
            let mut row = vec![
                "pair".to_string(),
                p.display().to_string(),
                g.display().to_string(),
            ];
            // empty: metric does not apply to this pair; NA: undefined
            row.extend(
                names
                    .iter()
                    .map(|n| r.values.get(n).map_or_else(String::new, |v| cell(*v))),
            );
            row
        })
        .collect();
    let mut mean = strings(&["mean", "", ""]);
    mean.extend(
        names
            .iter()
            .map(|n| cell(mean_defined(reports.iter().map(|r| r.get(n))))),
    );
    rows.push(mean);
    write_bytes(&out.join("eval.metrics.csv"), &csv_bytes(&header, &rows)?)?;
    let args = BTreeMap::from([
        (
            "pred",
            pred.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>(),
        ),
        ("gt", gt.iter().map(|p| p.display().to_string()).collect()),
    ]);
    write_echo(out, "eval", args, cfg)
}
