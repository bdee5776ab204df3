//! `geomoe` — train, convert, analyze and prune geography-aware
//! mixture-of-experts classifiers.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use geomoe_core::analysis::{
    self, build_routing_graph, threshold_prune, AffinityMatrix, ImportanceTable, PruneMethod,
    PruneSet, PruningManifest,
};
use geomoe_core::checkpoint;
use geomoe_core::config::RunConfig;
use geomoe_core::data::{self, DatasetManifest, Split};
use geomoe_core::geocell::CellId;
use geomoe_core::model::{self, LocBlocks, Model, TrainSample};
use geomoe_core::moe::{self, ConvertOptions, RouteTraces};
use geomoe_core::plot;
use geomoe_core::Rng;

#[derive(Parser)]
#[command(
    name = "geomoe",
    about = "Geography-aware mixture-of-experts vision toolkit",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// Cap internal parallelism (analyses are single-threaded; values > 1
    /// are accepted and treated as an upper bound).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic geo-biased dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier (dense, or fine-tune a converted model).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which blocks carry the location-contrastive term.
        #[arg(long, value_enum)]
        loc: Option<LocArg>,
        /// Start from an existing checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Convert dense MLPs into routed expert layers.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Comma-separated global layer indices, e.g. 1,3,5,7.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Routed forward over a split, recording per-patch expert routes.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build a prune set from traces and evaluate it.
    Prune {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        location: Option<String>,
        /// Reuse a cached per-expert importance table.
        #[arg(long)]
        importance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adaptive location partition of a dataset's training records, with
    /// the per-location split-size table.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Emit a class-to-expert or class-to-cell affinity matrix as CSV.
    Affinity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Global layer index to analyze (must be a MoE layer for
        /// kind=expert).
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value = "expert")]
        kind: AffinityKind,
        #[arg(long, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a pruning manifest: baseline vs pruned accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        location: Option<String>,
    },
    /// Render an analysis artifact as SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LocArg {
    All,
    LastTwo,
    None,
}

impl From<LocArg> for LocBlocks {
    fn from(v: LocArg) -> LocBlocks {
        match v {
            LocArg::All => LocBlocks::All,
            LocArg::LastTwo => LocBlocks::LastTwo,
            LocArg::None => LocBlocks::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(v: SplitArg) -> Split {
        match v {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Threshold,
    PerExpert,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityKind {
    Expert,
    Cell,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Affinity,
    Routes,
    PruneCurve,
    Coverage,
}

/// Error classes carrying their exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Numeric(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "error[validation]: {m}"),
            Failure::Numeric(m) => write!(f, "error[numeric]: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Failure::Validation(msg.into()))
}

fn numeric(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Failure::Numeric(msg.into()))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders help/version on stdout with success
            if e.use_stderr() {
                eprintln!("error[usage]: {e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        let code = match e.downcast_ref::<Failure>() {
            Some(Failure::Numeric(_)) => 3,
            Some(Failure::Validation(_)) => 2,
            None => 2,
        };
        match e.downcast_ref::<Failure>() {
            Some(f) => eprintln!("{f}"),
            None => eprintln!("error[validation]: {e:#}"),
        }
        std::process::exit(code);
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg =
        RunConfig::load(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn apply_seed_override(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(v) = std::env::var("GEOMOE_SEED") {
        let seed: u64 = v
            .parse()
            .map_err(|_| validation(format!("GEOMOE_SEED {v:?} is not an integer")))?;
        cfg.override_seed(seed);
    }
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<TrainSample<f32>>> {
    data::load_samples::<f32>(manifest, split, Some(dir))
        .map_err(|e| validation(format!("loading {split:?} split: {e}")))
}

fn load_ckpt(path: &Path) -> Result<Model<f32>> {
    checkpoint::load_model::<f32>(path).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn parse_cell(token: &str) -> Result<CellId> {
    CellId::parse(token).map_err(|e| validation(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(validation("--threads must be >= 1"));
    }
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            loc,
            init,
        } => train_cmd(&config, &data, &out, loc, init.as_deref()),
        Command::Convert {
            ckpt,
            data,
            out,
            experts,
            hidden,
            layers,
            rank,
            config,
        } => convert_cmd(
            &ckpt,
            &data,
            &out,
            experts,
            hidden,
            layers,
            rank,
            config.as_deref(),
        ),
        Command::Trace {
            ckpt,
            data,
            split,
            out,
            config,
        } => trace_cmd(&ckpt, &data, split.into(), &out, config.as_deref()),
        Command::Prune {
            traces,
            ckpt,
            data,
            method,
            percentile,
            count,
            location,
            importance,
            out,
            config,
        } => prune_cmd(
            &traces,
            &ckpt,
            &data,
            method,
            percentile,
            count,
            location.as_deref(),
            importance.as_deref(),
            &out,
            config.as_deref(),
        ),
        Command::Partition { data, out, config } => partition_cmd(&data, &out, config.as_deref()),
        Command::Affinity {
            ckpt,
            data,
            layer,
            kind,
            split,
            out,
            config,
        } => affinity_cmd(
            &ckpt,
            &data,
            layer,
            kind,
            split.into(),
            &out,
            config.as_deref(),
        ),
        Command::Eval {
            ckpt,
            manifest,
            data,
            location,
        } => eval_cmd(&ckpt, &manifest, &data, location.as_deref()),
        Command::Plot { kind, input, out } => plot_cmd(kind, &input, &out),
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out).context("creating output dir")?;
    let manifest = data::generate_synthetic(&cfg.data).map_err(|e| validation(e.to_string()))?;
    let with_files = data::write_images(&manifest, out).map_err(|e| validation(e.to_string()))?;
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&with_files)?,
    )?;
    std::fs::write(out.join("records.csv"), data::records_to_csv(&with_files))?;
    cfg.save(&out.join("run_config.json"))
        .map_err(|e| validation(e.to_string()))?;
    println!(
        "generated {} records over {} classes into {}",
        with_files.records.len(),
        with_files.class_names.len(),
        out.display()
    );
    Ok(())
}

fn check_model_matches_data(
    mc: &geomoe_core::model::ModelConfig,
    m: &DatasetManifest,
) -> Result<()> {
    if mc.num_classes != m.num_classes() {
        return Err(validation(format!(
            "model expects {} classes, dataset has {}",
            mc.num_classes,
            m.num_classes()
        )));
    }
    Ok(())
}

fn train_cmd(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    loc: Option<LocArg>,
    init: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(loc) = loc {
        cfg.train.loc_blocks = loc.into();
    }
    let manifest = load_manifest(data_dir)?;
    let train_set = load_split(data_dir, &manifest, Split::Train)?;
    let val_set = load_split(data_dir, &manifest, Split::Val)?;

    let mut model = match init {
        Some(path) => load_ckpt(path)?,
        None => {
            let mut mc = cfg.model.clone();
            mc.num_classes = manifest.num_classes();
            Model::new(mc).map_err(|e| validation(e.to_string()))?
        }
    };
    check_model_matches_data(&model.cfg, &manifest)?;

    let report = model::train(&mut model, &train_set, &val_set, &cfg.train)
        .map_err(|e| numeric(e.to_string()))?;
    checkpoint::save_model(&model, out).map_err(|e| validation(e.to_string()))?;
    let stem = out.with_extension("");
    let log_path = PathBuf::from(format!("{}_train_log.csv", stem.display()));
    std::fs::write(&log_path, report.to_csv())?;
    cfg.save(&PathBuf::from(format!(
        "{}_run_config.json",
        stem.display()
    )))
    .map_err(|e| validation(e.to_string()))?;
    println!(
        "trained {} epochs; best val acc {:.2}% at epoch {}; checkpoint {}",
        cfg.train.epochs,
        report.best_val_acc,
        report.best_epoch,
        out.display()
    );
    if report.diverged {
        return Err(numeric(
            "training diverged; checkpoint holds the last good parameters",
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn convert_cmd(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    experts: Option<usize>,
    hidden: Option<usize>,
    layers: Option<String>,
    rank: Option<usize>,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let model = load_ckpt(ckpt)?;
    let manifest = load_manifest(data_dir)?;
    let train_set = load_split(data_dir, &manifest, Split::Train)?;

    let mut settings = cfg.convert.settings();
    if let Some(e) = experts {
        settings.experts = e;
    }
    if let Some(h) = hidden {
        settings.hidden = h;
    }
    if let Some(r) = rank {
        settings.rank = r;
    }
    let layer_list = match layers {
        Some(s) => Some(
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| validation(format!("bad layer index {x:?}")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let opts = ConvertOptions {
        settings: settings.clone(),
        layers: layer_list,
        refine_iters: cfg.convert.refine_iters,
        min_class_count: cfg.convert.min_class_count,
        batch_size: cfg.train.batch_size,
        seed: cfg.model.seed,
    };
    let (converted, report) =
        moe::convert_to_moe(&model, &train_set, &opts).map_err(|e| validation(e.to_string()))?;
    checkpoint::save_model(&converted, out).map_err(|e| validation(e.to_string()))?;
    let mut saved_cfg = cfg.clone();
    saved_cfg.convert.experts = settings.experts;
    saved_cfg.convert.hidden = settings.hidden;
    saved_cfg.convert.rank = settings.rank;
    saved_cfg
        .save(&out.with_extension("run_config.json"))
        .map_err(|e| validation(e.to_string()))?;
    for l in &report.layers {
        println!(
            "layer {}: inertia {:.4}, cluster sizes {:?}",
            l.layer, l.inertia, l.cluster_sizes
        );
    }
    println!(
        "entries {} -> {}; checkpoint {}",
        report.entries_before,
        report.entries_after,
        out.display()
    );
    Ok(())
}

fn trace_cmd(
    ckpt: &Path,
    data_dir: &Path,
    split: Split,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let model = load_ckpt(ckpt)?;
    let manifest = load_manifest(data_dir)?;
    let samples = load_split(data_dir, &manifest, split)?;
    let traces = moe::trace_dataset(
        &model,
        &samples,
        cfg.analysis.cell_level,
        cfg.train.batch_size,
    )
    .map_err(|e| validation(e.to_string()))?;
    std::fs::write(out, traces.to_csv())?;
    println!(
        "traced {} patch routes over layers {:?} into {}",
        traces.records.len(),
        traces.moe_layers,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prune_cmd(
    traces_path: &Path,
    ckpt: &Path,
    data_dir: &Path,
    method: MethodArg,
    percentile: Option<f64>,
    count: Option<usize>,
    location: Option<&str>,
    importance: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let text = std::fs::read_to_string(traces_path)
        .map_err(|e| validation(format!("{}: {e}", traces_path.display())))?;
    let mut traces = RouteTraces::from_csv(&text).map_err(|e| validation(e.to_string()))?;
    let cell = location.map(parse_cell).transpose()?;
    if let Some(cell) = &cell {
        traces = traces.filter_location(cell);
        if traces.records.is_empty() {
            return Err(validation(format!(
                "no trace records inside location {}",
                cell.token()
            )));
        }
    }
    let graph = build_routing_graph(&traces).map_err(|e| validation(e.to_string()))?;

    let mut model = load_ckpt(ckpt)?;
    let manifest = load_manifest(data_dir)?;
    let test_all = load_split(data_dir, &manifest, Split::Test)?;
    let testset = match &cell {
        Some(cell) => analysis::location_filter(&test_all, &manifest.train_locations(), cell)
            .map_err(|e| validation(e.to_string()))?,
        None => test_all,
    };

    let prune = match method {
        MethodArg::Threshold => {
            let p =
                percentile.ok_or_else(|| validation("--method threshold needs --percentile"))?;
            threshold_prune(&graph, p, cfg.analysis.percentile_mode)
                .map_err(|e| validation(e.to_string()))?
        }
        MethodArg::PerExpert => {
            let k = count.ok_or_else(|| validation("--method per-expert needs --count"))?;
            let table = match importance {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
                    ImportanceTable::from_csv(&text).map_err(|e| validation(e.to_string()))?
                }
                None => {
                    let val_all = load_split(data_dir, &manifest, Split::Val)?;
                    let valset = match &cell {
                        Some(cell) => {
                            analysis::location_filter(&val_all, &manifest.train_locations(), cell)
                                .map_err(|e| validation(e.to_string()))?
                        }
                        None => val_all,
                    };
                    let table =
                        analysis::per_expert_importance(&mut model, &valset, cfg.train.batch_size)
                            .map_err(|e| validation(e.to_string()))?;
                    // importance is a one-time cost; cache it next to the manifest
                    let cache = out.with_extension("importance.csv");
                    std::fs::write(&cache, table.to_csv())?;
                    println!("cached importance table at {}", cache.display());
                    table
                }
            };
            table.least_important_with_loads(k, &graph)
        }
        MethodArg::Random => {
            let k = count.ok_or_else(|| validation("--method random needs --count"))?;
            let mut rng = Rng::new(cfg.model.seed).derive(0x70727565);
            let mut universe: Vec<(usize, usize)> = Vec::new();
            for &layer in &graph.layers {
                for e in 0..graph.num_experts {
                    universe.push((layer, e));
                }
            }
            rng.shuffle(&mut universe);
            PruneSet {
                method: PruneMethod::Random {
                    count: k,
                    seed: cfg.model.seed,
                },
                nodes: universe.into_iter().take(k).collect(),
            }
        }
    };

    let outcome = analysis::evaluate_pruned(&mut model, &prune, &testset, cfg.train.batch_size)
        .map_err(|e| validation(e.to_string()))?;
    let manifest_json = PruningManifest::new(
        &prune,
        cell.as_ref().map(|c| c.token()),
        outcome.baseline_acc,
        outcome.pruned_acc,
        graph.hash(),
    );
    std::fs::write(out, serde_json::to_string_pretty(&manifest_json)?)?;
    cfg.save(&out.with_extension("run_config.json"))
        .map_err(|e| validation(e.to_string()))?;
    println!(
        "pruned {} of {} expert nodes; baseline {:.2}% -> pruned {:.2}%; manifest {}",
        prune.nodes.len(),
        graph.layers.len() * graph.num_experts,
        outcome.baseline_acc,
        outcome.pruned_acc,
        out.display()
    );
    Ok(())
}

fn partition_cmd(data_dir: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let manifest = load_manifest(data_dir)?;
    let train_locs = manifest.train_locations();
    let partition = geomoe_core::geocell::adaptive_partition(
        &train_locs,
        cfg.analysis.n_max,
        cfg.analysis.max_cell_level,
    )
    .map_err(|e| validation(e.to_string()))?;
    std::fs::write(out, serde_json::to_string_pretty(&partition)?)?;
    let (splits, warnings) = data::split_by_location(&manifest, &partition.cells);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let table_path = out.with_extension("table.csv");
    std::fs::write(&table_path, data::split_table(&splits))?;
    println!(
        "{} cells (n_max {}, lower-bound fraction {:.2}); table {}",
        partition.cells.len(),
        partition.n_max,
        partition.lower_bound_fraction(),
        table_path.display()
    );
    if partition.truncated {
        eprintln!("warning: some cells still exceed n_max at max_cell_level");
    }
    Ok(())
}

fn affinity_cmd(
    ckpt: &Path,
    data_dir: &Path,
    layer: usize,
    kind: AffinityKind,
    split: Split,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let model = load_ckpt(ckpt)?;
    let manifest = load_manifest(data_dir)?;
    let samples = load_split(data_dir, &manifest, split)?;
    let matrix = match kind {
        AffinityKind::Expert => {
            analysis::class_expert_affinity(&model, &samples, layer, cfg.train.batch_size)
                .map_err(|e| validation(e.to_string()))?
        }
        AffinityKind::Cell => {
            let train_locs = manifest.train_locations();
            let mut cells: Vec<CellId> = Vec::new();
            for (p, _) in &train_locs {
                let c = geomoe_core::geocell::cell_from_latlng(p, cfg.analysis.cell_level)
                    .map_err(|e| validation(e.to_string()))?;
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
            cells.sort();
            let result = analysis::class_cell_affinity(
                &model,
                &samples,
                &train_locs,
                &cells,
                layer,
                cfg.convert.temperature,
                cfg.train.batch_size,
            )
            .map_err(|e| validation(e.to_string()))?;
            for w in &result.excluded_cells {
                eprintln!("warning: cell {w} has no training records, excluded");
            }
            result.matrix
        }
    };
    std::fs::write(out, matrix.to_csv())?;
    println!(
        "wrote {} ({} rows x {} cols)",
        out.display(),
        matrix.rows(),
        matrix.cols()
    );
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    manifest_path: &Path,
    data_dir: &Path,
    location: Option<&str>,
) -> Result<()> {
    let mut model = load_ckpt(ckpt)?;
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| validation(format!("{}: {e}", manifest_path.display())))?;
    let pm: PruningManifest = serde_json::from_str(&text).map_err(|e| validation(e.to_string()))?;
    let manifest = load_manifest(data_dir)?;
    let test_all = load_split(data_dir, &manifest, Split::Test)?;
    let token = location
        .map(|s| s.to_string())
        .or_else(|| pm.location.clone());
    let testset = match &token {
        Some(token) => {
            let cell = parse_cell(token)?;
            analysis::location_filter(&test_all, &manifest.train_locations(), &cell)
                .map_err(|e| validation(e.to_string()))?
        }
        None => test_all,
    };
    let outcome = analysis::evaluate_pruned(&mut model, &pm.prune_set(), &testset, 32)
        .map_err(|e| validation(e.to_string()))?;
    println!("baseline_acc,{:.4}", outcome.baseline_acc);
    println!("pruned_acc,{:.4}", outcome.pruned_acc);
    println!("class,correct,total,accuracy");
    for (class, (correct, total)) in &outcome.per_class {
        println!(
            "{class},{correct},{total},{:.4}",
            100.0 * *correct as f64 / (*total).max(1) as f64
        );
    }
    Ok(())
}

fn plot_cmd(kind: PlotKind, input: &Path, out: &Path) -> Result<()> {
    let svg = match kind {
        PlotKind::Affinity => {
            let text = std::fs::read_to_string(input)
                .map_err(|e| validation(format!("{}: {e}", input.display())))?;
            let m = AffinityMatrix::from_csv(&text).map_err(|e| validation(e.to_string()))?;
            plot::heatmap_svg(&m, "affinity")
        }
        PlotKind::Routes => {
            let text = std::fs::read_to_string(input)
                .map_err(|e| validation(format!("{}: {e}", input.display())))?;
            let traces = RouteTraces::from_csv(&text).map_err(|e| validation(e.to_string()))?;
            let graph = build_routing_graph(&traces).map_err(|e| validation(e.to_string()))?;
            plot::routes_svg(&graph, (90.0, 99.9), "cross-layer routes")
        }
        PlotKind::PruneCurve => {
            let text = std::fs::read_to_string(input)
                .map_err(|e| validation(format!("{}: {e}", input.display())))?;
            let points = parse_prune_curve(&text)?;
            plot::prune_curve_svg(&points, "accuracy vs prune percentile")
        }
        PlotKind::Coverage => {
            let manifest = load_manifest(input)?;
            let prov = manifest
                .synthetic
                .as_ref()
                .ok_or_else(|| validation("coverage plot needs a synthetic dataset"))?;
            let cells = CellId::all_at_level(4);
            let scores = data::range_scores(prov, &cells);
            let stats = analysis::coverage_density(&scores, cells.len(), 0.01, 20)
                .map_err(|e| validation(e.to_string()))?;
            let sidecar = out.with_extension("csv");
            std::fs::write(&sidecar, stats.to_csv())?;
            plot::coverage_histogram_svg(&stats, "species coverage density")
        }
    };
    std::fs::write(out, svg)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// CSV `percentile,accuracy,dropped`.
fn parse_prune_curve(text: &str) -> Result<Vec<(f64, f64, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "percentile,accuracy,dropped" {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            bail!(validation(format!(
                "prune-curve line {}: expected percentile,accuracy,dropped",
                i + 1
            )));
        }
        let f = |s: &str, name: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| validation(format!("prune-curve line {}: bad {name}", i + 1)))
        };
        out.push((
            f(cols[0], "percentile")?,
            f(cols[1], "accuracy")?,
            cols[2]
                .parse()
                .map_err(|_| anyhow!("prune-curve line {}: bad dropped", i + 1))?,
        ));
    }
    Ok(out)
}
