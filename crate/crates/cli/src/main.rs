use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use shardgraph_core::clustering::{sample_vectors, train_kmeans};
use shardgraph_core::fleetsched::{
    self, cost, generate_spot_trace, read_fleet_trace, simulate, tasks_from_plan, write_fleet_trace, CostInputs,
    MicroBenchFile, PolicyConfig, SpotTraceConfig,
};
use shardgraph_core::graphbuild::{build_shard, micro_benchmark};
use shardgraph_core::merger::{connectivity_report, merge_plan, MergeOptions, DEFAULT_BUFFER_BYTES};
use shardgraph_core::partitioner::{choose_k, partition, CAPACITY_SLACK};
use shardgraph_core::pipeline::{report, run_pipeline};
use shardgraph_core::searcher::{evaluate, exact_knn, GroundTruth};
use shardgraph_core::vecstore::{open_dataset_detect, write_dataset, DEFAULT_BLOCK_SIZE};
use shardgraph_core::{
    synth, BuildParams, CentroidSet, Error, FixedDegreeGraph, KMeansParams, PartitionConfig, PartitionPlan,
    PipelineConfig, ScalarKind, SearchParams, Stage,
};

/// Overrides `--workers` / `--threads` everywhere.
const WORKERS_ENV: &str = "SHARDGRAPH_WORKERS";

#[derive(Parser)]
#[command(name = "shardgraph", version, about = "Partitioned graph ANN index construction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train k-means centroids on a sample of the dataset.
    TrainCentroids(TrainArgs),
    /// Split a dataset into shards with selective replication.
    Partition(PartitionArgs),
    /// Build the proximity graph of one shard.
    BuildShard(BuildShardArgs),
    /// Merge shard graphs into one global index.
    Merge(MergeArgs),
    /// Run queries against a merged index and score them.
    Search(SearchArgs),
    /// Exact k nearest neighbours of each query.
    Gt(GtArgs),
    /// Simulate the shard builds on a worker fleet.
    SchedSim(SchedArgs),
    /// Dollar cost of a build.
    Cost(CostArgs),
    /// End-to-end pipeline from a JSON config.
    Index(IndexArgs),
    /// Summarise a pipeline output directory.
    Report(ReportArgs),
    /// Time throwaway builds to fit the runtime estimator.
    MicroBench(MicroArgs),
    /// Write a random spot-fleet trace.
    SpotTrace(SpotTraceArgs),
    /// Write a clustered synthetic dataset.
    GenSynthetic(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, default_value_t = 15)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    centroids: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    epsilon: f32,
    #[arg(long, default_value_t = 2)]
    omega: usize,
    #[arg(long, default_value_t = 0.4)]
    theta0: f32,
    #[arg(long, default_value_t = 1.0)]
    alpha: f32,
    /// Must match the centroid count when given.
    #[arg(long, conflicts_with = "memory_budget")]
    k: Option<usize>,
    /// Per-worker memory in bytes; sizes the shards.
    #[arg(long)]
    memory_budget: Option<u64>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, default_value_t = 1.5)]
    expected_dup: f32,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BuildShardArgs {
    #[arg(long)]
    shard: PathBuf,
    #[arg(long)]
    idmap: PathBuf,
    #[arg(long, default_value_t = 64)]
    degree_r: usize,
    #[arg(long, default_value_t = 128)]
    degree_l: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    memory_budget: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    graphs_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BUFFER_BYTES)]
    buffer_bytes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[arg(long, default_value_t = 64)]
    beam: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GtArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SchedArgs {
    /// Partition plan whose shards become build tasks.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    fleet: PathBuf,
    #[arg(long)]
    estimator: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    noise_factor: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_jitter: f64,
    /// Directory for `events.jsonl` and `sim.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct CostArgs {
    #[arg(long)]
    cpu_price: f64,
    #[arg(long, default_value_t = 0.0)]
    gpu_price: f64,
    #[arg(long)]
    overall_h: f64,
    #[arg(long, default_value_t = 0.0)]
    gpu_active_h: f64,
    #[arg(long, default_value_t = 0.0)]
    transfer_h: f64,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MicroArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1000usize, 2000, 4000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    repeats: usize,
    #[arg(long, default_value_t = 64)]
    degree_r: usize,
    #[arg(long, default_value_t = 128)]
    degree_l: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpotTraceArgs {
    #[arg(long, default_value_t = 8)]
    spot: usize,
    #[arg(long, default_value_t = 3.67)]
    spot_price: f64,
    /// Price of one always-on fallback worker; omit for none.
    #[arg(long)]
    on_demand_price: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    /// Per-coordinate standard deviation; centres lie in [0, 100)^dim.
    #[arg(long, default_value_t = 20.0)]
    spread: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    scalar: ScalarKind,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many held-out queries from the same mixture.
    #[arg(long, default_value_t = 0, requires = "queries_out")]
    queries: usize,
    #[arg(long)]
    queries_out: Option<PathBuf>,
}

fn env_workers() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.parse().ok().filter(|&w| w > 0)
}

fn set_threads(threads: Option<usize>) {
    if let Some(t) = env_workers().or(threads) {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn write_json<T: serde::Serialize>(path: &PathBuf, v: &T) -> Result<(), Error> {
    let bytes = serde_json::to_vec_pretty(v).expect("serialisable");
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.clone(), source })
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::TrainCentroids(a) => {
            set_threads(None);
            let ds = open_dataset_detect(&a.input)?;
            let mut params = KMeansParams::with_defaults(a.k, ds.count, a.seed);
            params.max_iters = a.iters;
            if let Some(s) = a.sample_size {
                params.sample_size = s;
            }
            let sample = sample_vectors(&ds, params.sample_size, a.seed)?;
            let cs = train_kmeans(&sample, &params)?;
            cs.save(&a.out)?;
            info!("wrote {} centroids to {}", cs.k(), a.out.display());
        }
        Cmd::Partition(a) => {
            set_threads(None);
            let ds = open_dataset_detect(&a.input)?;
            let cs = CentroidSet::load(&a.centroids)?;
            let capacity = match (a.k, a.memory_budget) {
                (_, Some(budget)) => {
                    let s = choose_k(ds.count, ds.dim, ds.scalar, budget, a.expected_dup)?;
                    if s.k != cs.k() {
                        return Err(Error::InvalidArgument(format!(
                            "memory budget calls for {} shards but {} centroids were given",
                            s.k,
                            cs.k()
                        )));
                    }
                    a.capacity.unwrap_or(s.capacity)
                }
                (k, None) => {
                    if let Some(k) = k.filter(|&k| k != cs.k()) {
                        return Err(Error::InvalidArgument(format!("--k {k} but {} centroids were given", cs.k())));
                    }
                    a.capacity.unwrap_or_else(|| {
                        let dup_n = ds.count as f64 * a.expected_dup as f64;
                        ((dup_n / cs.k() as f64).ceil() * CAPACITY_SLACK).ceil().max(1.0) as usize
                    })
                }
            };
            let mut cfg = PartitionConfig::new(cs.k(), capacity);
            cfg.epsilon = a.epsilon;
            cfg.omega = a.omega;
            cfg.theta0 = a.theta0;
            cfg.alpha = a.alpha;
            cfg.block_size = a.block_size;
            let plan = partition(&ds, &cs, &cfg, &a.out_dir)?;
            print_json(&plan.stats);
        }
        Cmd::BuildShard(a) => {
            set_threads(None);
            let mut p = BuildParams::new(a.degree_r, a.degree_l, a.seed);
            p.memory_budget_bytes = a.memory_budget;
            let g = build_shard(&a.shard, &a.idmap, &p, &a.out)?;
            info!("built graph over {} vectors, entry {}", g.n, g.entry_point);
        }
        Cmd::Merge(a) => {
            set_threads(None);
            let plan = PartitionPlan::load(&a.plan)?;
            let idx = merge_plan(&plan, &a.graphs_dir, &MergeOptions { buffer_bytes: a.buffer_bytes })?;
            idx.save(&a.out)?;
            print_json(&connectivity_report(&idx));
        }
        Cmd::Search(a) => {
            set_threads(a.threads);
            let index = FixedDegreeGraph::load(&a.index)?;
            let data = open_dataset_detect(&a.data)?.read_all()?;
            let queries = open_dataset_detect(&a.queries)?.read_all()?;
            let gt = GroundTruth::load(&a.gt)?;
            let r = evaluate(&index, &data, &queries, &gt, &SearchParams::new(a.topk, a.beam)?)?;
            if let Some(p) = &a.report {
                write_json(p, &r)?;
            }
            print_json(&r);
        }
        Cmd::Gt(a) => {
            set_threads(None);
            let data = open_dataset_detect(&a.data)?.read_all()?;
            let queries = open_dataset_detect(&a.queries)?.read_all()?;
            exact_knn(&data, &queries, a.k)?.save(&a.out)?;
        }
        Cmd::SchedSim(a) => {
            let plan = PartitionPlan::load(&a.tasks)?;
            let fleet = read_fleet_trace(&a.fleet)?;
            let micro: MicroBenchFile = serde_json::from_slice(
                &std::fs::read(&a.estimator).map_err(|source| Error::Io { path: a.estimator.clone(), source })?,
            )
            .map_err(|source| Error::Json { path: a.estimator.clone(), source })?;
            let tasks = tasks_from_plan(&plan, &micro.estimator()?);
            let policy = PolicyConfig { noise_factor: a.noise_factor, noise_jitter: a.noise_jitter };
            let sim = simulate(&tasks, &fleet, &policy, a.seed)?;
            std::fs::create_dir_all(&a.out).map_err(|source| Error::Io { path: a.out.clone(), source })?;
            sim.write_event_log(a.out.join("events.jsonl"))?;
            let est: Vec<u64> = tasks.iter().map(|t| fleetsched::secs_to_ms(t.estimated_duration).max(1)).collect();
            let audit = fleetsched::audit_event_log(&sim.events, &est);
            let summary = serde_json::json!({
                "makespan_ms": sim.makespan_ms,
                "aggregated_active_ms": sim.aggregated_active_ms(),
                "kills": sim.kills,
                "task_attempts": sim.task_attempts,
                "audit": audit,
            });
            write_json(&a.out.join("sim.json"), &summary)?;
            print_json(&summary);
        }
        Cmd::Cost(a) => {
            let r = cost(&CostInputs {
                cpu_price_per_hour: a.cpu_price,
                gpu_price_per_hour: a.gpu_price,
                overall_construction_time_h: a.overall_h,
                aggregated_gpu_active_time_h: a.gpu_active_h,
                data_transfer_time_h: a.transfer_h,
            })?;
            print_json(&r);
        }
        Cmd::Index(a) => {
            let mut cfg = PipelineConfig::load(&a.config)?;
            if let Some(o) = a.out_dir {
                cfg.out_dir = o;
            }
            if let Some(w) = env_workers().or(a.workers) {
                cfg.workers = w;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg)?;
            print_json(&out.timing);
        }
        Cmd::Report(a) => {
            print!("{}", report(&a.out_dir).map_err(|e| e.in_stage(Stage::Report))?);
        }
        Cmd::MicroBench(a) => {
            set_threads(None);
            let ds = open_dataset_detect(&a.data)?;
            let p = BuildParams::new(a.degree_r, a.degree_l, a.seed);
            let samples = micro_benchmark(&ds, &p, &a.sizes, a.repeats)?;
            let estimator = fleetsched::fit_estimator(&samples.iter().map(|s| (s.size, s.seconds)).collect::<Vec<_>>()).ok();
            let file = MicroBenchFile { samples, estimator };
            write_json(&a.out, &file)?;
            print_json(&file);
        }
        Cmd::SpotTrace(a) => {
            let cfg = SpotTraceConfig {
                spot_instances: a.spot,
                spot_price: a.spot_price,
                on_demand_fallback: a.on_demand_price,
                ..SpotTraceConfig::default()
            };
            write_fleet_trace(&a.out, &generate_spot_trace(&cfg, a.seed))?;
        }
        Cmd::GenSynthetic(a) => {
            let (data, queries) = synth::clustered_with_queries(a.n, a.queries, a.dim, a.clusters, a.spread, a.seed);
            let quantise = |mut m: shardgraph_core::VectorMatrix| {
                if a.scalar == ScalarKind::U8 {
                    for x in m.flat_mut() {
                        *x = x.round().clamp(0.0, 255.0);
                    }
                }
                m
            };
            write_dataset(&a.out, &quantise(data), a.scalar)?;
            if let Some(q) = &a.queries_out {
                write_dataset(q, &quantise(queries), a.scalar)?;
            }
        }
    }
    Ok(())
}

fn stage_of(cmd: &Cmd) -> Stage {
    match cmd {
        Cmd::TrainCentroids(_) => Stage::Centroids,
        Cmd::Partition(_) | Cmd::GenSynthetic(_) => Stage::Partition,
        Cmd::BuildShard(_) | Cmd::MicroBench(_) => Stage::Build,
        Cmd::Merge(_) => Stage::Merge,
        Cmd::Search(_) => Stage::Search,
        Cmd::Gt(_) => Stage::GroundTruth,
        Cmd::SchedSim(_) | Cmd::SpotTrace(_) => Stage::Schedule,
        Cmd::Cost(_) => Stage::Cost,
        Cmd::Index(_) => Stage::Build,
        Cmd::Report(_) => Stage::Report,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let fallback = stage_of(&cli.cmd);
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let e = e.in_stage(fallback);
            eprintln!("error: {e}");
            let code = match &e {
                Error::Stage { stage, .. } => stage.exit_code(),
                _ => 1,
            };
            ExitCode::from(code as u8)
        }
    }
}
