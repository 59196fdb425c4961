mod common;

use proptest::prelude::*;
use shardgraph_core::distance::l2_squared;
use shardgraph_core::fleetsched::{audit_event_log, cost, simulate, transfer_time, BuildTask, CostInputs, InstanceSpec, PolicyConfig};
use shardgraph_core::graphbuild::{exact_knn_graph, finalize_graph};
use shardgraph_core::partitioner::partition_in_memory;
use shardgraph_core::vecstore::{open_dataset, read_idmap, write_dataset, write_idmap};
use shardgraph_core::{BuildParams, CentroidSet, FixedDegreeGraph, IdMap, PartitionConfig, ScalarKind, VectorMatrix};

fn matrix(max_rows: usize, max_dim: usize) -> impl Strategy<Value = VectorMatrix> {
    (1..=max_dim, 0..=max_rows).prop_flat_map(|(dim, rows)| {
        prop::collection::vec(-1000.0f32..1000.0, rows * dim)
            .prop_map(move |flat| VectorMatrix::from_flat(dim, flat).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn f32_roundtrip_and_blocks(m in matrix(60, 7), block in 1usize..20) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        write_dataset(&p, &m, ScalarKind::F32).unwrap();
        let ds = open_dataset(&p, ScalarKind::F32).unwrap();
        prop_assert_eq!(ds.count, m.rows());
        prop_assert_eq!(&ds.read_all().unwrap(), &m);
        let mut glued = VectorMatrix::new(m.dim());
        for (b, blk) in ds.blocks(block).enumerate() {
            let blk = blk.unwrap();
            prop_assert_eq!(blk.start_id, b * block);
            for r in blk.vectors.iter() {
                glued.push(r).unwrap();
            }
        }
        prop_assert_eq!(glued, m);
    }

    #[test]
    fn u8_roundtrip(dim in 1usize..9, bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let rows = bytes.len() / dim;
        let m = VectorMatrix::from_flat(dim, bytes[..rows * dim].iter().map(|&b| b as f32).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.u8bin");
        write_dataset(&p, &m, ScalarKind::U8).unwrap();
        prop_assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 8 + rows * dim);
        prop_assert_eq!(open_dataset(&p, ScalarKind::U8).unwrap().read_all().unwrap(), m);
    }

    #[test]
    fn idmap_roundtrip(ids in prop::collection::hash_set(any::<u32>(), 0..100)) {
        let map = IdMap::new(ids.into_iter().collect());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.idmap");
        write_idmap(&p, &map).unwrap();
        prop_assert_eq!(read_idmap(&p).unwrap(), map);
    }

    #[test]
    fn partition_passes_audit(
        m in matrix(300, 4).prop_filter("need rows", |m| m.rows() >= 12),
        k in 2usize..6,
        eps in 1.0f32..3.0,
        omega in 1usize..4,
        theta0 in 0.05f32..0.95,
        alpha in 0.0f32..3.0,
        block in 1usize..80,
        slack in 1.0f64..2.5,
    ) {
        let cs = CentroidSet::new(m.select(&(0..k as u32).collect::<Vec<_>>())).unwrap();
        let cap = ((m.rows() as f64 / k as f64) * slack).ceil() as usize;
        let mut cfg = PartitionConfig::new(k, cap);
        cfg.epsilon = eps;
        cfg.omega = omega;
        cfg.theta0 = theta0;
        cfg.alpha = alpha;
        cfg.block_size = block;
        let out = partition_in_memory(&m, &cs, &cfg).unwrap();
        let (bad, _) = common::audit_partition(&m, &cs, &cfg, &out);
        prop_assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
        for shard in &out.shards {
            prop_assert!(shard.len() <= cap);
        }
    }

    #[test]
    fn finalize_keeps_closest_candidates(m in matrix(40, 3).prop_filter("rows", |m| m.rows() >= 6), r in 1usize..4) {
        let l = (r + 2).min(m.rows() - 1);
        let params = BuildParams { exact_threshold: 4096, ..BuildParams::new(r, l, 0) };
        let knn = exact_knn_graph(&m, l);
        let g = finalize_graph(&knn, &m, &params).unwrap();
        prop_assert_eq!(common::graph_violations(&g), 0);
        let mut cand: Vec<Vec<u32>> = knn.lists.iter().map(|l| l.iter().map(|x| x.id).collect()).collect();
        for (u, l) in knn.lists.iter().enumerate() {
            for x in l {
                cand[x.id as usize].push(u as u32);
            }
        }
        for (u, others) in cand.iter().enumerate() {
            let kept: Vec<u32> = g.neighbors(u).collect();
            let worst_kept = kept.iter().map(|&v| l2_squared(m.row(u), m.row(v as usize))).fold(f32::MIN, f32::max);
            for &v in others.iter().filter(|v| !kept.contains(v)) {
                prop_assert!(l2_squared(m.row(u), m.row(v as usize)) >= worst_kept);
            }
        }
    }

    #[test]
    fn graph_file_roundtrip(n in 1usize..30, deg in 1usize..5, seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = FixedDegreeGraph::empty(n, deg);
        for u in 0..n {
            let mut others: Vec<u32> = (0..n as u32).filter(|&v| v as usize != u).collect();
            others.shuffle(&mut rng);
            others.truncate(deg);
            g.set_row(u, &others);
        }
        g.entry_point = (seed % n as u64) as u32;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g");
        g.save(&p).unwrap();
        prop_assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 12 + 4 * n * deg);
        prop_assert_eq!(FixedDegreeGraph::load(&p).unwrap(), g);
    }

    #[test]
    fn cost_is_additive_and_nonnegative(
        cpu in 0.0f64..50.0, gpu in 0.0f64..50.0,
        overall in 0.0f64..100.0, active in 0.0f64..100.0, transfer in 0.0f64..10.0,
    ) {
        let r = cost(&CostInputs {
            cpu_price_per_hour: cpu,
            gpu_price_per_hour: gpu,
            overall_construction_time_h: overall,
            aggregated_gpu_active_time_h: active,
            data_transfer_time_h: transfer,
        }).unwrap();
        prop_assert!(r.total >= 0.0);
        prop_assert!((r.total - r.cpu_cost - r.gpu_cost).abs() < 1e-9);
        prop_assert!((r.cpu_cost - (overall + transfer) * cpu).abs() < 1e-9);
    }

    #[test]
    fn transfer_is_linear(s in 0usize..1000, cap in 1.0f64..1e11, bw in 1.0f64..1e11) {
        let one = transfer_time(s, cap, bw).unwrap();
        prop_assert!((transfer_time(2 * s, cap, bw).unwrap() - 2.0 * one).abs() <= 1e-9 * one.max(1.0));
    }

    #[test]
    fn list_scheduling_bounds(durations in prop::collection::vec(1u32..500, 1..40), workers in 1usize..6) {
        let tasks: Vec<BuildTask> = durations.iter().enumerate().map(|(i, &d)| BuildTask::new(i, 1, d as f64)).collect();
        let fleet: Vec<InstanceSpec> = (0..workers as u32).map(|i| InstanceSpec::on_demand(i, 1.0, 0.0)).collect();
        let sim = simulate(&tasks, &fleet, &PolicyConfig::default(), 0).unwrap();
        let total: u64 = durations.iter().map(|&d| d as u64 * 1000).sum();
        let longest = *durations.iter().max().unwrap() as u64 * 1000;
        prop_assert!(sim.makespan_ms >= longest.max(total.div_ceil(workers as u64)));
        prop_assert!(sim.makespan_ms <= total / workers as u64 + longest);
        prop_assert_eq!(sim.aggregated_active_ms(), total);
        let est: Vec<u64> = durations.iter().map(|&d| d as u64 * 1000).collect();
        let audit = audit_event_log(&sim.events, &est);
        prop_assert!(audit.clean() && audit.all_tasks_done);
    }
}
