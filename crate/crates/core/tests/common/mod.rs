//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use shardgraph_core::distance::l2_squared;
use shardgraph_core::partitioner::PartitionOutcome;
use shardgraph_core::{CentroidSet, FixedDegreeGraph, IdMap, PartitionConfig, VectorMatrix};

/// Replays a partition from scratch and returns every rule it breaks.
///
/// Primaries must go to the nearest cluster with room. Each replica must
/// pass both distance constraints against the radius accumulated from
/// primaries, fit under the cluster's capacity and replica budget at the
/// moment it was placed, and keep the vector in at most `omega` shards.
pub fn audit_partition(
    data: &VectorMatrix,
    cs: &CentroidSet,
    cfg: &PartitionConfig,
    out: &PartitionOutcome,
) -> (Vec<String>, usize) {
    let k = cfg.k;
    let n = data.rows();
    let mut size = vec![0usize; k];
    let mut prim = vec![0usize; k];
    let mut repl = vec![0usize; k];
    let mut radius = vec![0f32; k];
    let theta0: f64 = cfg.theta0.to_string().parse().unwrap();
    let budget_of = |p: usize, total: usize| -> usize {
        let share = if total == 0 { 0.0 } else { p as f64 / total as f64 };
        let damp = if share > 0.0 { ((1.0 / k as f64) / share).min(1.0) } else { 1.0 };
        (theta0 * cfg.capacity as f64 * damp + 1e-9).floor() as usize
    };
    let mut budget = vec![budget_of(0, 0); k];
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut seen = 0usize;
    let mut shards: Vec<Vec<u32>> = vec![Vec::new(); k];

    for (b, block) in out.blocks.iter().enumerate() {
        let dists: Vec<Vec<f32>> = block
            .vectors
            .iter()
            .map(|v| {
                let x = data.row(v.global_id as usize);
                (0..k).map(|c| l2_squared(x, cs.centroid(c)).sqrt()).collect()
            })
            .collect();
        for (i, v) in block.vectors.iter().enumerate() {
            if v.global_id as usize != seen {
                bad.push(format!("vector {} out of order, expected {seen}", v.global_id));
            }
            seen += 1;
            let want = (0..k)
                .filter(|&c| size[c] < cfg.capacity)
                .min_by(|&a, &c| dists[i][a].total_cmp(&dists[i][c]).then(a.cmp(&c)));
            if want != Some(v.primary) {
                bad.push(format!("vector {}: primary {} but expected {want:?}", v.global_id, v.primary));
            }
            size[v.primary] += 1;
            prim[v.primary] += 1;
            radius[v.primary] = radius[v.primary].max(dists[i][v.primary]);
            shards[v.primary].push(v.global_id);
        }
        let total: usize = prim.iter().sum();
        for c in 0..k {
            budget[c] = budget_of(prim[c], total);
        }
        let tau = 1.0 + cfg.alpha / (1.0 + b as f32);
        if tau != block.tau {
            bad.push(format!("block {b}: tau {} but expected {tau}", block.tau));
        }
        for (i, v) in block.vectors.iter().enumerate() {
            if 1 + v.replicas.len() > cfg.omega {
                bad.push(format!("vector {} in {} shards", v.global_id, 1 + v.replicas.len()));
            }
            let d = dists[i][v.primary];
            for (j, &c) in v.replicas.iter().enumerate() {
                checked += 1;
                let dp = dists[i][c];
                let tag = format!("vector {} replica in {c}", v.global_id);
                if c == v.primary || v.replicas[..j].contains(&c) {
                    bad.push(format!("{tag}: duplicate placement"));
                }
                if !(dp < cfg.epsilon * d) {
                    bad.push(format!("{tag}: d' = {dp} not below eps * d = {}", cfg.epsilon * d));
                }
                if !(dp < cfg.epsilon * tau * radius[c]) {
                    bad.push(format!("{tag}: d' = {dp} not below eps * tau * R = {}", cfg.epsilon * tau * radius[c]));
                }
                if size[c] >= cfg.capacity {
                    bad.push(format!("{tag}: cluster full"));
                }
                if repl[c] >= budget[c] {
                    bad.push(format!("{tag}: budget {} exhausted", budget[c]));
                }
                size[c] += 1;
                repl[c] += 1;
            }
        }
        for v in &block.vectors {
            for &c in &v.replicas {
                shards[c].push(v.global_id);
            }
        }
    }
    if seen != n {
        bad.push(format!("{seen} vectors assigned, expected {n}"));
    }
    if shards != out.shards {
        bad.push("shard membership differs from the block log".into());
    }
    for (c, st) in out.states.iter().enumerate() {
        if (st.size, st.primary_count, st.replica_count) != (size[c], prim[c], repl[c]) {
            bad.push(format!("cluster {c}: reported counts differ from replay"));
        }
    }
    (bad, checked)
}

/// Brute-force `l` nearest neighbours of every point, ties to lower id.
pub fn brute_knn(data: &VectorMatrix, l: usize) -> Vec<Vec<u32>> {
    use rayon::prelude::*;
    (0..data.rows())
        .into_par_iter()
        .map(|u| {
            let mut all: Vec<(f32, u32)> = (0..data.rows())
                .filter(|&v| v != u)
                .map(|v| (l2_squared(data.row(u), data.row(v)), v as u32))
                .collect();
            all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(l);
            all.into_iter().map(|x| x.1).collect()
        })
        .collect()
}

/// Union of each vector's mapped shard rows, re-sorted by exact distance in
/// the global data and cut to `r`.
pub fn merge_oracle(data: &VectorMatrix, shards: &[(FixedDegreeGraph, IdMap)], r: usize) -> Vec<Vec<u32>> {
    let mut cand: Vec<Vec<u32>> = vec![Vec::new(); data.rows()];
    for (g, map) in shards {
        for local in 0..g.n {
            let me = map.global(local);
            cand[me as usize].extend(g.neighbors(local).map(|x| map.global(x as usize)));
        }
    }
    cand.iter()
        .enumerate()
        .map(|(u, c)| {
            let mut c: Vec<u32> = c.iter().copied().filter(|&v| v as usize != u).collect();
            c.sort_unstable();
            c.dedup();
            let mut scored: Vec<(f32, u32)> = c.into_iter().map(|v| (l2_squared(data.row(u), data.row(v as usize)), v)).collect();
            scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.truncate(r);
            scored.into_iter().map(|x| x.1).collect()
        })
        .collect()
}

/// Graph-file invariants: degree cap, no self-loops, no duplicates, ids in
/// range, padding only at the tail.
pub fn graph_violations(g: &FixedDegreeGraph) -> usize {
    let mut bad = 0;
    for u in 0..g.n {
        let row = g.row(u);
        let real: Vec<u32> = row.iter().copied().take_while(|&x| x != u32::MAX).collect();
        if row[real.len()..].iter().any(|&x| x != u32::MAX) {
            bad += 1;
        }
        let mut s = real.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != real.len() || real.iter().any(|&x| x as usize == u || x as usize >= g.n) {
            bad += 1;
        }
    }
    bad
}

/// Partitions `data` to files under `dir`, builds every shard graph into
/// `dir/graphs` and returns the plan with the loaded graphs and id maps.
pub fn build_sharded(
    data: &VectorMatrix,
    cs: &CentroidSet,
    cfg: &PartitionConfig,
    params: &shardgraph_core::BuildParams,
    dir: &std::path::Path,
) -> (shardgraph_core::PartitionPlan, Vec<(FixedDegreeGraph, IdMap)>) {
    use shardgraph_core::graphbuild::build_shard;
    use shardgraph_core::merger::shard_graph_name;
    use shardgraph_core::vecstore::{open_dataset, read_idmap, write_dataset};
    let input = dir.join("input.bin");
    write_dataset(&input, data, shardgraph_core::ScalarKind::F32).unwrap();
    let ds = open_dataset(&input, shardgraph_core::ScalarKind::F32).unwrap();
    let plan = shardgraph_core::partitioner::partition(&ds, cs, cfg, dir.join("part")).unwrap();
    let graphs = dir.join("graphs");
    std::fs::create_dir_all(&graphs).unwrap();
    let built = (0..plan.shards.len())
        .map(|i| {
            let g = build_shard(plan.vectors_path(i), plan.idmap_path(i), params, graphs.join(shard_graph_name(i))).unwrap();
            (g, read_idmap(plan.idmap_path(i)).unwrap())
        })
        .collect();
    (plan, built)
}

/// Rewrites every shard with its rows in a random order: vectors, id map
/// and graph are permuted consistently. Returns the plan for the copy;
/// graphs land in `out/graphs`.
pub fn shuffled_copy(
    plan: &shardgraph_core::PartitionPlan,
    graphs: &[(FixedDegreeGraph, IdMap)],
    seed: u64,
    out: &std::path::Path,
) -> shardgraph_core::PartitionPlan {
    use rand::{seq::SliceRandom, SeedableRng};
    use shardgraph_core::merger::shard_graph_name;
    use shardgraph_core::vecstore::{open_dataset_detect, write_dataset, write_idmap};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out.join("graphs")).unwrap();
    for (i, (g, map)) in graphs.iter().enumerate() {
        let ds = open_dataset_detect(plan.vectors_path(i)).unwrap();
        let vecs = ds.read_all().unwrap();
        // new position p holds old row order[p]
        let mut order: Vec<u32> = (0..g.n as u32).collect();
        order.shuffle(&mut rng);
        let mut new_of = vec![0u32; g.n];
        for (p, &o) in order.iter().enumerate() {
            new_of[o as usize] = p as u32;
        }
        let mut ng = FixedDegreeGraph::empty(g.n, g.degree);
        for (p, &o) in order.iter().enumerate() {
            let row: Vec<u32> = g.neighbors(o as usize).map(|x| new_of[x as usize]).collect();
            ng.set_row(p, &row);
        }
        ng.entry_point = if g.n == 0 { g.entry_point } else { new_of[g.entry_point as usize] };
        ng.save(out.join("graphs").join(shard_graph_name(i))).unwrap();
        write_dataset(out.join(&plan.shards[i].vectors), &vecs.select(&order), ds.scalar).unwrap();
        let ids: Vec<u32> = order.iter().map(|&o| map.global(o as usize)).collect();
        write_idmap(out.join(&plan.shards[i].idmap), &IdMap::new(ids)).unwrap();
    }
    let mut copy = plan.clone();
    copy.base_dir = out.to_path_buf();
    copy
}
