//! End-to-end orchestration: centroids, partition, shard builds, merge.
//!
//! Every stage writes its artifacts under the output directory and records a
//! hash of the configuration it ran with in `stages.json`. A rerun skips a
//! stage whose hash is unchanged and whose outputs are still on disk, so
//! deleting `index.graph` reruns only the merge.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{sample_vectors, train_kmeans, CentroidSet, KMeansParams};
use crate::error::{read_json, write_json, Error, Result};
use crate::fleetsched::{
    generate_spot_trace, pipeline_cost_report, read_fleet_trace, simulate, tasks_from_plan, transfer_time, CostInputs,
    CostReport, MicroBenchFile, PolicyConfig, Prices, SpotTraceConfig,
};
use crate::graphbuild::{build_shard, micro_benchmark, BuildParams};
use crate::merger::{merge_plan, shard_graph_name, MergeOptions, DEFAULT_BUFFER_BYTES};
use crate::partitioner::{
    choose_k, partition, PartitionConfig, PartitionPlan, CAPACITY_SLACK, DEFAULT_ALPHA, DEFAULT_EPSILON,
    DEFAULT_OMEGA, DEFAULT_THETA0, PLAN_FILE,
};
use crate::vecstore::{open_dataset, open_dataset_detect, ScalarKind, DEFAULT_BLOCK_SIZE};

pub const CONFIG_FILE: &str = "config.json";
pub const CENTROIDS_FILE: &str = "centroids.bin";
pub const PARTITION_DIR: &str = "partition";
pub const GRAPHS_DIR: &str = "graphs";
pub const INDEX_FILE: &str = "index.graph";
pub const STAGES_FILE: &str = "stages.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SIM_FILE: &str = "sim.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const COST_FILE: &str = "cost.json";
pub const MICRO_FILE: &str = "micro.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Centroids,
    Partition,
    Build,
    Merge,
    Search,
    GroundTruth,
    Schedule,
    Cost,
    Report,
}

impl Stage {
    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Centroids => 10,
            Stage::Partition => 11,
            Stage::Build => 12,
            Stage::Merge => 13,
            Stage::Search => 14,
            Stage::GroundTruth => 15,
            Stage::Schedule => 16,
            Stage::Cost => 17,
            Stage::Report => 18,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Centroids => "centroids",
            Stage::Partition => "partition",
            Stage::Build => "build",
            Stage::Merge => "merge",
            Stage::Search => "search",
            Stage::GroundTruth => "ground-truth",
            Stage::Schedule => "schedule",
            Stage::Cost => "cost",
            Stage::Report => "report",
        })
    }
}

/// Simulated fleet for the build stage. Either a trace file or a generated
/// spot trace is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<SpotTraceConfig>,
    /// Micro-benchmark file; measured on the dataset when absent.
    #[serde(default)]
    pub estimator: Option<PathBuf>,
    #[serde(default)]
    pub policy: PolicyConfig,
    pub prices: Prices,
    /// Shard upload bandwidth in bytes per second.
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_s: f64,
}

fn default_bandwidth() -> f64 {
    10e9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    /// Detected from the file size when absent.
    #[serde(default)]
    pub scalar: Option<ScalarKind>,
    #[serde(default = "d_epsilon")]
    pub epsilon: f32,
    #[serde(default = "d_omega")]
    pub omega: usize,
    #[serde(default = "d_theta0")]
    pub theta0: f32,
    #[serde(default = "d_alpha")]
    pub alpha: f32,
    /// Shard count; derived from `memory_budget_bytes` when absent.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub memory_budget_bytes: Option<u64>,
    /// Expected copies per vector, used when sizing shards.
    #[serde(default = "d_dup")]
    pub expected_dup: f32,
    #[serde(default = "d_block")]
    pub block_size: usize,
    #[serde(default)]
    pub kmeans_sample: Option<usize>,
    #[serde(default = "d_iters")]
    pub kmeans_iters: usize,
    pub degree_r: usize,
    pub degree_l: usize,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent shard builds in local mode.
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default)]
    pub fleet: Option<FleetConfig>,
    #[serde(default = "d_buffer")]
    pub merge_buffer_bytes: usize,
    pub out_dir: PathBuf,
}

fn d_epsilon() -> f32 {
    DEFAULT_EPSILON
}
fn d_omega() -> usize {
    DEFAULT_OMEGA
}
fn d_theta0() -> f32 {
    DEFAULT_THETA0
}
fn d_alpha() -> f32 {
    DEFAULT_ALPHA
}
fn d_dup() -> f32 {
    1.5
}
fn d_block() -> usize {
    DEFAULT_BLOCK_SIZE
}
fn d_iters() -> usize {
    15
}
fn d_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}
fn d_buffer() -> usize {
    DEFAULT_BUFFER_BYTES
}

impl PipelineConfig {
    /// Config with defaults for everything but the essentials.
    pub fn new(dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, degree_r: usize, degree_l: usize) -> Self {
        Self {
            dataset: dataset.into(),
            scalar: None,
            epsilon: DEFAULT_EPSILON,
            omega: DEFAULT_OMEGA,
            theta0: DEFAULT_THETA0,
            alpha: DEFAULT_ALPHA,
            k: None,
            capacity: None,
            memory_budget_bytes: None,
            expected_dup: d_dup(),
            block_size: DEFAULT_BLOCK_SIZE,
            kmeans_sample: None,
            kmeans_iters: d_iters(),
            degree_r,
            degree_l,
            seed: 0,
            workers: d_workers(),
            fleet: None,
            merge_buffer_bytes: DEFAULT_BUFFER_BYTES,
            out_dir: out_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn build_params(&self) -> BuildParams {
        BuildParams::new(self.degree_r, self.degree_l, self.seed)
    }

    fn validate(&self) -> Result<()> {
        if !self.dataset.is_file() {
            return Err(Error::invalid(format!("dataset {} does not exist", self.dataset.display())));
        }
        if self.k.is_none() && self.memory_budget_bytes.is_none() {
            return Err(Error::invalid("set either k or memory_budget_bytes"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if let Some(f) = &self.fleet {
            match (&f.trace, &f.generate) {
                (Some(t), _) if !t.is_file() => {
                    return Err(Error::invalid(format!("fleet trace {} does not exist", t.display())))
                }
                (None, None) => return Err(Error::invalid("fleet needs a trace or a generator")),
                _ => {}
            }
            if let Some(e) = &f.estimator {
                if !e.is_file() {
                    return Err(Error::invalid(format!("estimator file {} does not exist", e.display())));
                }
            }
        }
        self.build_params().validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Centroid training plus partitioning.
    pub partition_s: f64,
    /// Shard builds only.
    pub build_only_s: f64,
    pub merge_s: f64,
    pub overall_s: f64,
    /// Makespan of the simulated fleet, when one was used.
    #[serde(default)]
    pub simulated_build_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    hash: String,
    seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub index_path: PathBuf,
    pub plan: PartitionPlan,
    pub timing: Timing,
    /// Stages that actually ran; the rest were reused.
    pub executed: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostFile {
    pub inputs: CostInputs,
    pub report: CostReport,
    pub kills: usize,
}

fn stage_hash(stage: Stage, params: &serde_json::Value, upstream: &str) -> String {
    let mut h = Sha256::new();
    h.update(stage.to_string().as_bytes());
    h.update([0]);
    h.update(params.to_string().as_bytes());
    h.update([0]);
    h.update(upstream.as_bytes());
    hex::encode(h.finalize())
}

fn load_stages(path: &Path) -> BTreeMap<Stage, StageRecord> {
    read_json(path).unwrap_or_default()
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let wall = Instant::now();
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(out.join(CONFIG_FILE))?;

    let ds = match cfg.scalar {
        Some(s) => open_dataset(&cfg.dataset, s),
        None => open_dataset_detect(&cfg.dataset),
    }
    .map_err(|e| e.in_stage(Stage::Centroids))?;

    let (k, capacity) = match cfg.k {
        Some(k) => {
            let cap = cfg.capacity.unwrap_or_else(|| {
                let dup_n = ds.count as f64 * cfg.expected_dup as f64;
                ((dup_n / k as f64).ceil() * CAPACITY_SLACK).ceil().max(1.0) as usize
            });
            (k, cap)
        }
        None => {
            let s = choose_k(ds.count, ds.dim, ds.scalar, cfg.memory_budget_bytes.unwrap(), cfg.expected_dup)
                .map_err(|e| e.in_stage(Stage::Partition))?;
            (s.k, cfg.capacity.unwrap_or(s.capacity))
        }
    };

    let stages_path = out.join(STAGES_FILE);
    let mut stages = load_stages(&stages_path);
    let mut executed = Vec::new();
    let fresh = |stages: &BTreeMap<Stage, StageRecord>, s: Stage, hash: &str, outputs: &[PathBuf]| {
        stages.get(&s).is_some_and(|r| r.hash == hash) && outputs.iter().all(|p| p.exists())
    };

    // Centroids.
    let input_id = serde_json::json!({
        "path": cfg.dataset,
        "bytes": fs::metadata(&cfg.dataset).map(|m| m.len()).unwrap_or(0),
        "scalar": ds.scalar,
    });
    let sample_size = cfg.kmeans_sample.unwrap_or(256 * k).min(ds.count);
    let km = KMeansParams {
        k,
        sample_size,
        max_iters: cfg.kmeans_iters,
        seed: cfg.seed,
        tol: 1e-4,
    };
    let h_centroids = stage_hash(Stage::Centroids, &serde_json::json!({ "input": input_id, "kmeans": km }), "");
    let centroids_path = out.join(CENTROIDS_FILE);
    if !fresh(&stages, Stage::Centroids, &h_centroids, std::slice::from_ref(&centroids_path)) {
        let t = Instant::now();
        let cs = (|| {
            let sample = sample_vectors(&ds, sample_size, cfg.seed)?;
            let cs = train_kmeans(&sample, &km)?;
            cs.save(&centroids_path)?;
            Ok(cs)
        })()
        .map_err(|e: Error| e.in_stage(Stage::Centroids))?;
        log::info!("trained {} centroids", cs.k());
        stages.insert(Stage::Centroids, StageRecord { hash: h_centroids.clone(), seconds: t.elapsed().as_secs_f64() });
        write_json(&stages_path, &stages)?;
        executed.push(Stage::Centroids);
    }

    // Partition.
    let pcfg = PartitionConfig {
        epsilon: cfg.epsilon,
        omega: cfg.omega,
        theta0: cfg.theta0,
        alpha: cfg.alpha,
        k,
        capacity,
        block_size: cfg.block_size,
        parallel: true,
    };
    let part_dir = out.join(PARTITION_DIR);
    let plan_path = part_dir.join(PLAN_FILE);
    let h_partition = stage_hash(Stage::Partition, &serde_json::to_value(&pcfg).unwrap(), &h_centroids);
    let plan = if fresh(&stages, Stage::Partition, &h_partition, std::slice::from_ref(&plan_path)) {
        PartitionPlan::load(&plan_path).map_err(|e| e.in_stage(Stage::Partition))?
    } else {
        let t = Instant::now();
        let plan = (|| {
            let cs = CentroidSet::load(&centroids_path)?;
            partition(&ds, &cs, &pcfg, &part_dir)
        })()
        .map_err(|e: Error| e.in_stage(Stage::Partition))?;
        log::info!(
            "partitioned {} vectors into {} shards, replicated proportion {:.4}",
            plan.n,
            plan.shards.len(),
            plan.replicated_proportion()
        );
        stages.insert(Stage::Partition, StageRecord { hash: h_partition.clone(), seconds: t.elapsed().as_secs_f64() });
        write_json(&stages_path, &stages)?;
        executed.push(Stage::Partition);
        plan
    };

    // Shard builds.
    let bp = cfg.build_params();
    let graphs_dir = out.join(GRAPHS_DIR);
    let graph_paths: Vec<PathBuf> = (0..plan.shards.len()).map(|i| graphs_dir.join(shard_graph_name(i))).collect();
    let h_build = stage_hash(Stage::Build, &serde_json::to_value(&bp).unwrap(), &h_partition);
    if !fresh(&stages, Stage::Build, &h_build, &graph_paths) {
        fs::create_dir_all(&graphs_dir).map_err(|e| Error::io(&graphs_dir, e).in_stage(Stage::Build))?;
        let t = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()).in_stage(Stage::Build))?;
        pool.install(|| {
            (0..plan.shards.len()).into_par_iter().try_for_each(|i| {
                build_shard(plan.vectors_path(i), plan.idmap_path(i), &bp, &graph_paths[i]).map(|_| ())
            })
        })
        .map_err(|e| e.in_stage(Stage::Build))?;
        stages.insert(Stage::Build, StageRecord { hash: h_build.clone(), seconds: t.elapsed().as_secs_f64() });
        write_json(&stages_path, &stages)?;
        executed.push(Stage::Build);
    }

    // Merge.
    let index_path = out.join(INDEX_FILE);
    let h_merge = stage_hash(Stage::Merge, &serde_json::json!({ "degree_r": cfg.degree_r }), &h_build);
    if !fresh(&stages, Stage::Merge, &h_merge, std::slice::from_ref(&index_path)) {
        let t = Instant::now();
        let opts = MergeOptions { buffer_bytes: cfg.merge_buffer_bytes };
        merge_plan(&plan, &graphs_dir, &opts)
            .and_then(|idx| idx.save(&index_path))
            .map_err(|e| e.in_stage(Stage::Merge))?;
        stages.insert(Stage::Merge, StageRecord { hash: h_merge.clone(), seconds: t.elapsed().as_secs_f64() });
        write_json(&stages_path, &stages)?;
        executed.push(Stage::Merge);
    }

    let secs = |s: Stage| stages.get(&s).map_or(0.0, |r| r.seconds);
    let mut timing = Timing {
        partition_s: secs(Stage::Centroids) + secs(Stage::Partition),
        build_only_s: secs(Stage::Build),
        merge_s: secs(Stage::Merge),
        overall_s: 0.0,
        simulated_build_s: None,
    };

    if let Some(fleet) = &cfg.fleet {
        let t = simulate_fleet(cfg, fleet, &plan, &ds, &timing).map_err(|e| e.in_stage(Stage::Schedule))?;
        timing.simulated_build_s = Some(t);
        executed.push(Stage::Schedule);
    }

    let parts = timing.partition_s + timing.build_only_s + timing.merge_s;
    timing.overall_s = if executed.len() >= 4 { wall.elapsed().as_secs_f64().max(parts) } else { parts };
    write_json(&out.join(TIMING_FILE), &timing)?;

    Ok(PipelineOutcome {
        index_path,
        plan,
        timing,
        executed,
    })
}

/// Runs the scheduler over the plan's shards and prices the result.
/// Returns the simulated makespan in seconds.
fn simulate_fleet(
    cfg: &PipelineConfig,
    fleet: &FleetConfig,
    plan: &PartitionPlan,
    ds: &crate::vecstore::VectorDataset,
    timing: &Timing,
) -> Result<f64> {
    let out = &cfg.out_dir;
    let micro = match &fleet.estimator {
        Some(p) => read_json::<MicroBenchFile>(p)?,
        None => {
            let small = (ds.count / 8).max(cfg.degree_l + 2).min(ds.count);
            let large = (ds.count / 4).max(small + 1).min(ds.count);
            let samples = micro_benchmark(ds, &cfg.build_params(), &[small, large], 1)?;
            let m = MicroBenchFile { samples, estimator: None };
            write_json(&out.join(MICRO_FILE), &m)?;
            m
        }
    };
    let est = micro.estimator()?;
    let instances = match (&fleet.trace, &fleet.generate) {
        (Some(p), _) => read_fleet_trace(p)?,
        (None, Some(g)) => generate_spot_trace(g, cfg.seed),
        (None, None) => unreachable!("validated"),
    };
    let tasks = tasks_from_plan(plan, &est);
    let sim = simulate(&tasks, &instances, &fleet.policy, cfg.seed)?;
    sim.write_event_log(out.join(EVENTS_FILE))?;
    write_json(&out.join(SIM_FILE), &serde_json::json!({
        "makespan_ms": sim.makespan_ms,
        "aggregated_active_ms": sim.aggregated_active_ms(),
        "kills": sim.kills,
        "task_attempts": sim.task_attempts,
        "instance_active_ms": sim.instance_active_ms,
    }))?;
    let largest = plan.shards.iter().map(|s| s.count).max().unwrap_or(0);
    let shard_bytes = (largest * plan.dim * plan.scalar.width()) as f64;
    let transfer_h = transfer_time(plan.shards.len(), shard_bytes, fleet.bandwidth_bytes_per_s)? / 3600.0;
    let (inputs, report) = pipeline_cost_report(
        &sim,
        timing.partition_s / 3600.0,
        timing.merge_s / 3600.0,
        &fleet.prices,
        transfer_h,
    )?;
    write_json(&out.join(COST_FILE), &CostFile { inputs, report, kills: sim.kills })?;
    Ok(sim.makespan_ms as f64 / 1000.0)
}

/// Human-readable summary of a pipeline output directory.
pub fn report(out_dir: impl AsRef<Path>) -> Result<String> {
    let out = out_dir.as_ref();
    let timing: Timing = read_json(&out.join(TIMING_FILE))?;
    let plan = PartitionPlan::load(out.join(PARTITION_DIR).join(PLAN_FILE))?;
    let mut s = String::new();
    let _ = writeln!(s, "timing (s)");
    let _ = writeln!(s, "  partition   {:>10.3}", timing.partition_s);
    let _ = writeln!(s, "  build-only  {:>10.3}", timing.build_only_s);
    let _ = writeln!(s, "  merge       {:>10.3}", timing.merge_s);
    let _ = writeln!(s, "  overall     {:>10.3}", timing.overall_s);
    if let Some(sim) = timing.simulated_build_s {
        let _ = writeln!(s, "  simulated build makespan {sim:.3}");
    }
    let _ = writeln!(s, "partition: n = {}, shards = {}", plan.n, plan.shards.len());
    let _ = writeln!(s, "  replicated proportion {:.6}", plan.stats.replicated_proportion);
    let _ = writeln!(s, "  replica fraction      {:.6}", plan.stats.replica_fraction);
    let _ = writeln!(s, "  shard sizes:");
    for m in &plan.shards {
        let _ = writeln!(s, "    shard {:>4}  {:>10}", m.shard_id, m.count);
    }
    let _ = writeln!(s, "  copies per vector:");
    for (i, c) in plan.stats.multiplicity_histogram.iter().enumerate() {
        let _ = writeln!(s, "    {:>2}  {:>10}", i + 1, c);
    }
    let cost_path = out.join(COST_FILE);
    if cost_path.exists() {
        let c: CostFile = read_json(&cost_path)?;
        let _ = writeln!(s, "cost ($)");
        let _ = writeln!(s, "  cpu   {:.4}", c.report.cpu_cost);
        let _ = writeln!(s, "  gpu   {:.4}", c.report.gpu_cost);
        let _ = writeln!(s, "  total {:.4}", c.report.total);
        let _ = writeln!(s, "  spot kills (not priced) {}", c.kills);
    }
    Ok(s)
}
