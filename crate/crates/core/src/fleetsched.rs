//! Shard-build scheduling on a simulated fleet of spot and on-demand
//! workers, plus the dollar-cost model.
//!
//! The scheduler follows two rules. A worker that is running a task gets
//! nothing (availability). A worker whose remaining lifetime is known gets
//! only tasks whose estimated runtime fits in it (time). Remaining lifetime
//! becomes known when a spot worker receives its termination notice; before
//! that it is treated as unbounded. Spot workers are never terminated inside
//! their protected period.
//!
//! The simulator is a single-threaded event loop on an integer millisecond
//! clock. Events at the same instant are handled in the order termination,
//! notice, completion, start, and the scheduler runs once after them.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::graphbuild::BenchPoint;
use crate::partitioner::PartitionPlan;

pub type Millis = u64;

const MS_PER_S: f64 = 1000.0;
const MS_PER_H: f64 = 3_600_000.0;
/// Anything longer than this is almost certainly seconds passed as hours.
const MAX_PLAUSIBLE_HOURS: f64 = 1e5;

pub fn secs_to_ms(s: f64) -> Millis {
    (s * MS_PER_S).round().max(0.0) as Millis
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Spot,
    OnDemand,
}

/// One worker in a fleet trace. Times are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: u32,
    pub kind: InstanceKind,
    pub price_per_hour: f64,
    pub start_time: f64,
    /// `None` means the worker never goes away.
    #[serde(default)]
    pub lifetime: Option<f64>,
    #[serde(default)]
    pub notice_period: f64,
    #[serde(default)]
    pub protected_period: f64,
}

impl InstanceSpec {
    pub fn on_demand(id: u32, price_per_hour: f64, start_time: f64) -> Self {
        Self {
            id,
            kind: InstanceKind::OnDemand,
            price_per_hour,
            start_time,
            lifetime: None,
            notice_period: 0.0,
            protected_period: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("instance {}: {what}", self.id)));
        if !(self.price_per_hour >= 0.0) {
            return bad("price must be non-negative");
        }
        if !(self.start_time >= 0.0) || !(self.notice_period >= 0.0) || !(self.protected_period >= 0.0) {
            return bad("times must be non-negative");
        }
        match (self.kind, self.lifetime) {
            (InstanceKind::Spot, None) => bad("spot instances need a finite lifetime"),
            (_, Some(l)) if !(l >= 0.0) || !l.is_finite() => bad("lifetime must be finite and non-negative"),
            _ => Ok(()),
        }
    }

    /// Termination time in ms, honouring the protected period.
    fn terminates_at(&self) -> Option<Millis> {
        self.lifetime
            .map(|l| secs_to_ms(self.start_time) + secs_to_ms(l.max(self.protected_period)))
    }

    fn notice_at(&self) -> Option<Millis> {
        self.terminates_at()
            .map(|t| t.saturating_sub(secs_to_ms(self.notice_period)).max(secs_to_ms(self.start_time)))
    }

    /// Longest stretch this worker can ever be up, in ms.
    fn max_uptime(&self) -> Option<Millis> {
        self.terminates_at().map(|t| t - secs_to_ms(self.start_time))
    }
}

pub fn read_fleet_trace(path: impl AsRef<Path>) -> Result<Vec<InstanceSpec>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: InstanceSpec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(spec);
    }
    Ok(out)
}

pub fn write_fleet_trace(path: impl AsRef<Path>, fleet: &[InstanceSpec]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for spec in fleet {
        serde_json::to_writer(&mut buf, spec).expect("instance specs serialise");
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parameters for a random spot fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotTraceConfig {
    pub spot_instances: usize,
    /// Spot start times are uniform in `[0, arrival_window)` seconds.
    pub arrival_window: f64,
    pub min_lifetime: f64,
    pub max_lifetime: f64,
    pub notice_period: f64,
    pub protected_period: f64,
    pub spot_price: f64,
    /// Adds one always-on on-demand worker when set.
    pub on_demand_fallback: Option<f64>,
}

impl Default for SpotTraceConfig {
    fn default() -> Self {
        Self {
            spot_instances: 8,
            arrival_window: 4.0 * 3600.0,
            min_lifetime: 1800.0,
            max_lifetime: 4.0 * 3600.0,
            notice_period: 300.0,
            protected_period: 3600.0,
            spot_price: 3.67,
            on_demand_fallback: Some(12.24),
        }
    }
}

pub fn generate_spot_trace(cfg: &SpotTraceConfig, seed: u64) -> Vec<InstanceSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet: Vec<InstanceSpec> = (0..cfg.spot_instances)
        .map(|i| InstanceSpec {
            id: i as u32,
            kind: InstanceKind::Spot,
            price_per_hour: cfg.spot_price,
            start_time: (rng.gen::<f64>() * cfg.arrival_window).round(),
            lifetime: Some(rng.gen_range(cfg.min_lifetime..=cfg.max_lifetime).round()),
            notice_period: cfg.notice_period,
            protected_period: cfg.protected_period,
        })
        .collect();
    if let Some(price) = cfg.on_demand_fallback {
        fleet.push(InstanceSpec::on_demand(cfg.spot_instances as u32, price, 0.0));
    }
    fleet
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEstimator {
    /// Seconds per vector.
    pub slope: f64,
    /// Seconds.
    pub intercept: f64,
}

impl RuntimeEstimator {
    pub fn predict(&self, size: usize) -> f64 {
        self.slope * size as f64 + self.intercept
    }
}

/// Least-squares line through `(size, seconds)` samples; a negative
/// intercept is clamped to zero.
pub fn fit_estimator(samples: &[(usize, f64)]) -> Result<RuntimeEstimator> {
    let mut sizes: Vec<usize> = samples.iter().map(|s| s.0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::invalid("need samples at two or more distinct sizes"));
    }
    let m = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0 as f64).sum::<f64>() / m;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / m;
    let sxy: f64 = samples.iter().map(|s| (s.0 as f64 - mx) * (s.1 - my)).sum();
    let sxx: f64 = samples.iter().map(|s| (s.0 as f64 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(Error::invalid("build time does not grow with size in these samples"));
    }
    let intercept = (my - slope * mx).max(0.0);
    Ok(RuntimeEstimator { slope, intercept })
}

/// Contents of a micro-benchmark file: raw timings and, optionally, a
/// pre-fitted estimator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MicroBenchFile {
    #[serde(default)]
    pub samples: Vec<BenchPoint>,
    #[serde(default)]
    pub estimator: Option<RuntimeEstimator>,
}

impl MicroBenchFile {
    pub fn estimator(&self) -> Result<RuntimeEstimator> {
        match self.estimator {
            Some(e) => Ok(e),
            None => fit_estimator(&self.samples.iter().map(|p| (p.size, p.seconds)).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Killed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildTask {
    pub shard_id: usize,
    pub size_vectors: usize,
    /// Seconds.
    pub estimated_duration: f64,
    pub state: TaskState,
    pub attempt_count: u32,
}

impl BuildTask {
    pub fn new(shard_id: usize, size_vectors: usize, estimated_duration: f64) -> Self {
        Self {
            shard_id,
            size_vectors,
            estimated_duration,
            state: TaskState::Pending,
            attempt_count: 0,
        }
    }

    fn estimate_ms(&self) -> Millis {
        secs_to_ms(self.estimated_duration).max(1)
    }
}

/// One task per shard of a plan, sized by the estimator.
pub fn tasks_from_plan(plan: &PartitionPlan, est: &RuntimeEstimator) -> Vec<BuildTask> {
    plan.shards
        .iter()
        .map(|s| BuildTask::new(s.shard_id, s.count, est.predict(s.count).max(0.001)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceStatus {
    pub active: bool,
    /// Not executing a task.
    pub available: bool,
    /// Known remaining lifetime in ms; `None` when unknown.
    pub time_remaining: Option<Millis>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceView {
    pub id: u32,
    pub status: InstanceStatus,
}

/// `(task index, instance id)` pairs decided at one scheduling point.
pub type Assignment = (usize, u32);

/// Hands pending tasks to idle workers. Workers under a termination notice
/// go first, shortest window first, and each takes the largest pending task
/// that fits its window; the rest take the largest pending task in id
/// order.
pub fn schedule_step(_now: Millis, tasks: &[BuildTask], instances: &[InstanceView]) -> Vec<Assignment> {
    let mut pending: Vec<usize> = (0..tasks.len())
        .filter(|&i| matches!(tasks[i].state, TaskState::Pending | TaskState::Killed))
        .collect();
    pending.sort_by(|&a, &b| {
        tasks[b]
            .estimate_ms()
            .cmp(&tasks[a].estimate_ms())
            .then(tasks[a].shard_id.cmp(&tasks[b].shard_id))
            .then(a.cmp(&b))
    });

    let mut idle: Vec<&InstanceView> = instances
        .iter()
        .filter(|i| i.status.active && i.status.available)
        .collect();
    idle.sort_by_key(|i| (i.status.time_remaining.is_none(), i.status.time_remaining, i.id));

    let mut out = Vec::new();
    for inst in idle {
        let fits = |t: &usize| match inst.status.time_remaining {
            Some(rem) => tasks[*t].estimate_ms() <= rem,
            None => true,
        };
        if let Some(pos) = pending.iter().position(fits) {
            out.push((pending.remove(pos), inst.id));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Actual runtime = estimate x noise_factor x (1 + U(-jitter, jitter)).
    pub noise_factor: f64,
    pub noise_jitter: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            noise_factor: 1.0,
            noise_jitter: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    InstanceStart,
    Notice,
    Termination,
    Assign,
    Complete,
    Kill,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    /// Milliseconds since simulation start.
    pub t: Millis,
    pub event: EventKind,
    pub instance: Option<u32>,
    pub task: Option<usize>,
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub events: Vec<SimEvent>,
    pub makespan_ms: Millis,
    /// Sum of task spans executed on each worker, killed spans included.
    pub instance_active_ms: BTreeMap<u32, Millis>,
    pub instance_prices: BTreeMap<u32, f64>,
    pub task_attempts: Vec<u32>,
    pub kills: usize,
}

impl SimulationResult {
    pub fn aggregated_active_ms(&self) -> Millis {
        self.instance_active_ms.values().sum()
    }

    pub fn write_event_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for ev in &self.events {
            serde_json::to_writer(&mut f, ev).expect("events serialise");
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_event_log(path: impl AsRef<Path>) -> Result<Vec<SimEvent>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

// Queue order at equal times: termination, notice, completion, start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Termination { inst: u32 },
    Notice { inst: u32 },
    Completion { inst: u32, task: usize, attempt: u32 },
    Start { inst: u32 },
}

struct Worker {
    spec: InstanceSpec,
    active: bool,
    running: Option<(usize, Millis, u32)>,
    terminates_at_known: Option<Millis>,
    active_ms: Millis,
}

pub fn simulate(
    tasks: &[BuildTask],
    fleet: &[InstanceSpec],
    policy: &PolicyConfig,
    seed: u64,
) -> Result<SimulationResult> {
    for spec in fleet {
        spec.validate()?;
    }
    let mut ids: Vec<u32> = fleet.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate instance id in fleet"));
    }
    if !(policy.noise_factor > 0.0) || !(0.0..1.0).contains(&policy.noise_jitter) {
        return Err(Error::invalid("noise_factor must be positive and noise_jitter in [0, 1)"));
    }
    let longest_uptime = fleet.iter().map(|s| s.max_uptime()).max_by(|a, b| match (a, b) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, _) => std::cmp::Ordering::Greater,
        (_, None) => std::cmp::Ordering::Less,
        (Some(x), Some(y)) => x.cmp(y),
    });
    if let Some(t) = tasks.iter().find(|t| match longest_uptime {
        None => true,
        Some(None) => false,
        Some(Some(up)) => t.estimate_ms() > up,
    }) {
        return Err(Error::Scheduling(format!(
            "task for shard {} ({} s) outlasts every worker",
            t.shard_id, t.estimated_duration
        )));
    }

    let mut tasks: Vec<BuildTask> = tasks.to_vec();
    for t in tasks.iter_mut() {
        t.state = TaskState::Pending;
        t.attempt_count = 0;
    }
    let mut workers: BTreeMap<u32, Worker> = fleet
        .iter()
        .map(|s| {
            (
                s.id,
                Worker {
                    spec: s.clone(),
                    active: false,
                    running: None,
                    terminates_at_known: None,
                    active_ms: 0,
                },
            )
        })
        .collect();
    let mut queue: BinaryHeap<Reverse<(Millis, Pending)>> = fleet
        .iter()
        .map(|s| Reverse((secs_to_ms(s.start_time), Pending::Start { inst: s.id })))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut kills = 0;
    let mut done = 0;
    let mut makespan = 0;
    let log = |events: &mut Vec<SimEvent>, t, event, instance, task, detail| {
        events.push(SimEvent { t, event, instance, task, detail })
    };

    while done < tasks.len() {
        let Some(Reverse((now, _))) = queue.peek().copied() else {
            return Err(Error::Scheduling(format!(
                "{} tasks left with no worker able to run them",
                tasks.len() - done
            )));
        };
        while let Some(Reverse((t, ev))) = queue.peek().copied() {
            if t != now {
                break;
            }
            queue.pop();
            match ev {
                Pending::Start { inst } => {
                    let w = workers.get_mut(&inst).unwrap();
                    w.active = true;
                    log(&mut events, now, EventKind::InstanceStart, Some(inst), None,
                        json!({ "kind": w.spec.kind, "price_per_hour": w.spec.price_per_hour }));
                    if let (Some(term), Some(notice)) = (w.spec.terminates_at(), w.spec.notice_at()) {
                        queue.push(Reverse((notice, Pending::Notice { inst })));
                        queue.push(Reverse((term, Pending::Termination { inst })));
                    }
                }
                Pending::Notice { inst } => {
                    let w = workers.get_mut(&inst).unwrap();
                    let term = w.spec.terminates_at().unwrap();
                    w.terminates_at_known = Some(term);
                    log(&mut events, now, EventKind::Notice, Some(inst), None,
                        json!({ "terminates_at": term }));
                }
                Pending::Termination { inst } => {
                    let w = workers.get_mut(&inst).unwrap();
                    if let Some((task, started, _)) = w.running.take() {
                        w.active_ms += now - started;
                        tasks[task].state = TaskState::Killed;
                        kills += 1;
                        log(&mut events, now, EventKind::Kill, Some(inst), Some(task),
                            json!({ "ran_ms": now - started, "attempt": tasks[task].attempt_count }));
                    }
                    w.active = false;
                    log(&mut events, now, EventKind::Termination, Some(inst), None, json!({}));
                }
                Pending::Completion { inst, task, attempt } => {
                    let w = workers.get_mut(&inst).unwrap();
                    match w.running {
                        Some((t, started, a)) if t == task && a == attempt => {
                            w.running = None;
                            w.active_ms += now - started;
                            tasks[task].state = TaskState::Done;
                            done += 1;
                            makespan = makespan.max(now);
                            log(&mut events, now, EventKind::Complete, Some(inst), Some(task),
                                json!({ "ran_ms": now - started, "attempt": attempt }));
                        }
                        // Killed before it could finish.
                        _ => {}
                    }
                }
            }
        }

        let views: Vec<InstanceView> = workers
            .values()
            .map(|w| InstanceView {
                id: w.spec.id,
                status: InstanceStatus {
                    active: w.active,
                    available: w.running.is_none(),
                    time_remaining: w.terminates_at_known.map(|t| t.saturating_sub(now)),
                },
            })
            .collect();
        for (task, inst) in schedule_step(now, &tasks, &views) {
            let t = &mut tasks[task];
            t.state = TaskState::Running;
            t.attempt_count += 1;
            let jitter = if policy.noise_jitter > 0.0 {
                rng.gen_range(-policy.noise_jitter..policy.noise_jitter)
            } else {
                0.0
            };
            let actual = ((t.estimate_ms() as f64) * policy.noise_factor * (1.0 + jitter)).round().max(1.0) as Millis;
            let w = workers.get_mut(&inst).unwrap();
            w.running = Some((task, now, t.attempt_count));
            log(&mut events, now, EventKind::Assign, Some(inst), Some(task), json!({
                "estimate_ms": t.estimate_ms(),
                "actual_ms": actual,
                "attempt": t.attempt_count,
                "known_remaining_ms": w.terminates_at_known.map(|x| x.saturating_sub(now)),
            }));
            queue.push(Reverse((now + actual, Pending::Completion { inst, task, attempt: t.attempt_count })));
        }
    }

    Ok(SimulationResult {
        events,
        makespan_ms: makespan,
        instance_active_ms: workers.iter().map(|(&id, w)| (id, w.active_ms)).collect(),
        instance_prices: workers.iter().map(|(&id, w)| (id, w.spec.price_per_hour)).collect(),
        task_attempts: tasks.iter().map(|t| t.attempt_count).collect(),
        kills,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub assignments: usize,
    pub completions: usize,
    pub availability_violations: usize,
    pub time_violations: usize,
    /// Assignments to workers that had not started or were already gone.
    pub inactive_violations: usize,
    pub all_tasks_done: bool,
    /// Per-instance busy time rebuilt from the log.
    pub instance_active_ms: BTreeMap<u32, Millis>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.availability_violations == 0 && self.time_violations == 0 && self.inactive_violations == 0
    }
}

/// Replays an event log and checks both scheduling policies on every
/// assignment, using task estimates supplied independently of the log.
pub fn audit_event_log(events: &[SimEvent], estimate_ms: &[Millis]) -> AuditReport {
    let mut busy: BTreeMap<u32, (usize, Millis)> = BTreeMap::new();
    let mut active: BTreeMap<u32, bool> = BTreeMap::new();
    let mut known_end: BTreeMap<u32, Millis> = BTreeMap::new();
    let mut done = vec![false; estimate_ms.len()];
    let mut report = AuditReport::default();
    for ev in events {
        let inst = ev.instance.unwrap_or(u32::MAX);
        match ev.event {
            EventKind::InstanceStart => {
                active.insert(inst, true);
            }
            EventKind::Notice => {
                if let Some(t) = ev.detail.get("terminates_at").and_then(|v| v.as_u64()) {
                    known_end.insert(inst, t);
                }
            }
            EventKind::Termination => {
                active.insert(inst, false);
            }
            EventKind::Assign => {
                report.assignments += 1;
                if busy.contains_key(&inst) {
                    report.availability_violations += 1;
                }
                if !active.get(&inst).copied().unwrap_or(false) {
                    report.inactive_violations += 1;
                }
                let task = ev.task.unwrap_or(usize::MAX);
                if let (Some(&end), Some(&est)) = (known_end.get(&inst), estimate_ms.get(task)) {
                    if est > end.saturating_sub(ev.t) {
                        report.time_violations += 1;
                    }
                }
                busy.insert(inst, (task, ev.t));
            }
            EventKind::Complete | EventKind::Kill => {
                if let Some((task, started)) = busy.remove(&inst) {
                    *report.instance_active_ms.entry(inst).or_default() += ev.t - started;
                    if ev.event == EventKind::Complete {
                        report.completions += 1;
                        if let Some(d) = done.get_mut(task) {
                            *d = true;
                        }
                    }
                }
            }
        }
    }
    report.all_tasks_done = done.iter().all(|&d| d);
    report
}

/// Seconds to ship `num_shards` shards of `shard_cap_bytes` each.
pub fn transfer_time(num_shards: usize, shard_cap_bytes: f64, bandwidth_bytes_per_s: f64) -> Result<f64> {
    if !(bandwidth_bytes_per_s > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    if !(shard_cap_bytes >= 0.0) {
        return Err(Error::invalid("shard size must be non-negative"));
    }
    Ok(num_shards as f64 * shard_cap_bytes / bandwidth_bytes_per_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub cpu_price_per_hour: f64,
    pub gpu_price_per_hour: f64,
    pub overall_construction_time_h: f64,
    pub aggregated_gpu_active_time_h: f64,
    pub data_transfer_time_h: f64,
}

impl CostInputs {
    /// A CPU-only build: no GPU time and no transfer.
    pub fn cpu_only(cpu_price_per_hour: f64, hours: f64) -> Self {
        Self {
            cpu_price_per_hour,
            gpu_price_per_hour: 0.0,
            overall_construction_time_h: hours,
            aggregated_gpu_active_time_h: 0.0,
            data_transfer_time_h: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cpu_cost: f64,
    pub gpu_cost: f64,
    pub total: f64,
}

/// `(overall + transfer) x cpu_price + (gpu_active + transfer) x gpu_price`.
pub fn cost(inputs: &CostInputs) -> Result<CostReport> {
    let vals = [
        inputs.cpu_price_per_hour,
        inputs.gpu_price_per_hour,
        inputs.overall_construction_time_h,
        inputs.aggregated_gpu_active_time_h,
        inputs.data_transfer_time_h,
    ];
    if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("cost inputs must be finite and non-negative"));
    }
    let cpu_cost = (inputs.overall_construction_time_h + inputs.data_transfer_time_h) * inputs.cpu_price_per_hour;
    let gpu_cost = (inputs.aggregated_gpu_active_time_h + inputs.data_transfer_time_h) * inputs.gpu_price_per_hour;
    Ok(CostReport {
        cpu_cost,
        gpu_cost,
        total: cpu_cost + gpu_cost,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub cpu_per_hour: f64,
    pub gpu_per_hour: f64,
}

/// Cost of a whole pipeline run. Overall time is partition + merge + the
/// simulated build makespan; GPU time is the sum of per-worker busy time.
pub fn pipeline_cost_report(
    sim: &SimulationResult,
    partition_h: f64,
    merge_h: f64,
    prices: &Prices,
    transfer_h: f64,
) -> Result<(CostInputs, CostReport)> {
    for (name, v) in [("partition", partition_h), ("merge", merge_h), ("transfer", transfer_h)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{name} time must be finite and non-negative")));
        }
        if v > MAX_PLAUSIBLE_HOURS {
            return Err(Error::invalid(format!(
                "{name} time of {v} h is implausible; was it given in seconds?"
            )));
        }
    }
    let inputs = CostInputs {
        cpu_price_per_hour: prices.cpu_per_hour,
        gpu_price_per_hour: prices.gpu_per_hour,
        overall_construction_time_h: partition_h + merge_h + sim.makespan_ms as f64 / MS_PER_H,
        aggregated_gpu_active_time_h: sim.aggregated_active_ms() as f64 / MS_PER_H,
        data_transfer_time_h: transfer_h,
    };
    Ok((inputs, cost(&inputs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: u32, available: bool, rem: Option<Millis>) -> InstanceView {
        InstanceView { id, status: InstanceStatus { active: true, available, time_remaining: rem } }
    }

    #[test]
    fn estimator_exact_line() {
        let e = fit_estimator(&[(1000, 10.0), (2000, 20.0)]).unwrap();
        assert!((e.slope - 0.01).abs() < 1e-12);
        assert_eq!(e.intercept, 0.0);
        assert!((e.predict(5000) - 50.0).abs() < 1e-9);
        assert!(fit_estimator(&[(1000, 10.0), (1000, 11.0)]).is_err());
        // Negative intercept clamps to zero.
        let e = fit_estimator(&[(1000, 5.0), (2000, 20.0)]).unwrap();
        assert_eq!(e.intercept, 0.0);
    }

    #[test]
    fn time_and_availability_rules() {
        let tasks = vec![BuildTask::new(0, 10, 50.0)];
        assert_eq!(schedule_step(0, &tasks, &[view(1, true, Some(100_000))]), vec![(0, 1)]);
        assert!(schedule_step(0, &tasks, &[view(1, true, Some(30_000))]).is_empty());
        assert!(schedule_step(0, &tasks, &[view(1, false, None)]).is_empty());
    }

    #[test]
    fn noticed_worker_takes_largest_fitting_task() {
        let tasks = vec![
            BuildTask::new(0, 1, 100.0),
            BuildTask::new(1, 1, 40.0),
            BuildTask::new(2, 1, 20.0),
        ];
        let got = schedule_step(0, &tasks, &[view(7, true, None), view(3, true, Some(45_000))]);
        assert_eq!(got, vec![(1, 3), (0, 7)]);
    }

    #[test]
    fn serial_single_worker() {
        let tasks: Vec<_> = [10.0, 20.0, 30.0].iter().enumerate().map(|(i, &d)| BuildTask::new(i, 1, d)).collect();
        let sim = simulate(&tasks, &[InstanceSpec::on_demand(0, 1.0, 0.0)], &PolicyConfig::default(), 0).unwrap();
        assert_eq!(sim.makespan_ms, 60_000);
        assert_eq!(sim.kills, 0);
        assert_eq!(sim.aggregated_active_ms(), 60_000);
    }

    #[test]
    fn killed_task_is_requeued() {
        // Spot worker dies at 100 s mid-task without a usable notice; the
        // on-demand worker starting later picks the task back up.
        let spot = InstanceSpec {
            id: 0,
            kind: InstanceKind::Spot,
            price_per_hour: 1.0,
            start_time: 0.0,
            lifetime: Some(100.0),
            notice_period: 10.0,
            protected_period: 0.0,
        };
        let od = InstanceSpec::on_demand(1, 2.0, 150.0);
        let tasks = vec![BuildTask::new(0, 1, 120.0)];
        let sim = simulate(&tasks, &[spot, od], &PolicyConfig::default(), 0).unwrap();
        assert_eq!(sim.kills, 1);
        assert_eq!(sim.task_attempts, vec![2]);
        assert_eq!(sim.makespan_ms, 270_000);
        assert_eq!(sim.instance_active_ms[&0], 100_000);
        let audit = audit_event_log(&sim.events, &[120_000]);
        assert!(audit.clean() && audit.all_tasks_done);
    }

    #[test]
    fn protected_period_delays_termination() {
        let spot = InstanceSpec {
            id: 0,
            kind: InstanceKind::Spot,
            price_per_hour: 1.0,
            start_time: 0.0,
            lifetime: Some(10.0),
            notice_period: 5.0,
            protected_period: 3600.0,
        };
        let tasks = vec![BuildTask::new(0, 1, 1800.0)];
        let sim = simulate(&tasks, &[spot], &PolicyConfig::default(), 0).unwrap();
        assert_eq!(sim.kills, 0);
        assert_eq!(sim.makespan_ms, 1_800_000);
    }

    #[test]
    fn starvation_guard() {
        let spot = InstanceSpec {
            id: 0,
            kind: InstanceKind::Spot,
            price_per_hour: 1.0,
            start_time: 0.0,
            lifetime: Some(60.0),
            notice_period: 5.0,
            protected_period: 0.0,
        };
        let tasks = vec![BuildTask::new(0, 1, 61.0)];
        assert!(matches!(
            simulate(&tasks, &[spot], &PolicyConfig::default(), 0),
            Err(Error::Scheduling(_))
        ));
    }

    #[test]
    fn cost_examples() {
        let zero = cost(&CostInputs::cpu_only(3.9, 0.0)).unwrap();
        assert_eq!(zero.total, 0.0);
        assert!(cost(&CostInputs::cpu_only(-1.0, 1.0)).is_err());
        assert_eq!(transfer_time(0, 16e9, 10e9).unwrap(), 0.0);
        assert!(transfer_time(1, 1.0, 0.0).is_err());
        let t1 = transfer_time(3, 16e9, 10e9).unwrap();
        let t2 = transfer_time(6, 16e9, 10e9).unwrap();
        assert!((t2 - 2.0 * t1).abs() < 1e-9);
    }

    #[test]
    fn implausible_hours_flagged() {
        let sim = SimulationResult {
            events: vec![],
            makespan_ms: 0,
            instance_active_ms: BTreeMap::new(),
            instance_prices: BTreeMap::new(),
            task_attempts: vec![],
            kills: 0,
        };
        let prices = Prices { cpu_per_hour: 1.0, gpu_per_hour: 1.0 };
        assert!(pipeline_cost_report(&sim, 7200.0 * 100.0, 0.0, &prices, 0.0).is_err());
        assert!(pipeline_cost_report(&sim, -1.0, 0.0, &prices, 0.0).is_err());
    }
}
