use super::tour::Tour;
use super::TspInstance;
use crate::error::{Error, Result};

/// Largest instance accepted by [`held_karp`].
pub const HELD_KARP_MAX_N: usize = 16;

// Moves must improve by more than this to be applied; keeps 2-opt from
// cycling on floating-point noise.
const IMPROVEMENT_EPS: f64 = 1e-12;

/// Greedy nearest-neighbour tour from `start`. Ties go to the lowest index.
pub fn nearest_neighbor(instance: &TspInstance, start: usize) -> Result<Tour> {
    let n = instance.n;
    if start >= n {
        return Err(Error::Parameter(format!("start node {start} out of {n}")));
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if !visited[j] {
                let d = instance.dist(cur, j);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best);
        cur = best;
    }
    Tour::new(instance, order)
}

/// First-improvement 2-opt to a local optimum.
pub fn two_opt(instance: &TspInstance, initial: &Tour) -> Result<Tour> {
    let n = instance.n;
    let mut order = initial.order.clone();
    // validates the permutation
    super::tour_length(instance, &order)?;
    let d = instance.distance_matrix();
    let dist = |a: usize, b: usize| d[a * n + b];
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n - 1 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (a, b) = (order[i], order[i + 1]);
                let (c, e) = (order[j], order[(j + 1) % n]);
                let delta = dist(a, c) + dist(b, e) - dist(a, b) - dist(c, e);
                if delta < -IMPROVEMENT_EPS {
                    order[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
    }
    Tour::new(instance, order)
}

/// Exact optimum by bitmask dynamic programming over subsets, anchored at node 0.
pub fn held_karp(instance: &TspInstance) -> Result<Tour> {
    let n = instance.n;
    if n > HELD_KARP_MAX_N {
        return Err(Error::Capacity(format!(
            "held_karp supports n <= {HELD_KARP_MAX_N}, got {n}"
        )));
    }
    let d = instance.distance_matrix();
    let m = n - 1; // nodes 1..n map to bits 0..m
    let full = (1usize << m) - 1;
    let idx = |mask: usize, j: usize| mask * m + j;
    let mut cost = vec![f64::INFINITY; (1 << m) * m];
    let mut parent = vec![u8::MAX; (1 << m) * m];
    for j in 0..m {
        cost[idx(1 << j, j)] = d[j + 1];
    }
    for mask in 1..=full {
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let here = cost[idx(mask, j)];
            if !here.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let c = here + d[(j + 1) * n + k + 1];
                // strict comparison keeps the lowest-index predecessor on ties
                if c < cost[idx(next, k)] {
                    cost[idx(next, k)] = c;
                    parent[idx(next, k)] = j as u8;
                }
            }
        }
    }
    let mut last = 0;
    let mut best = f64::INFINITY;
    for j in 0..m {
        let c = cost[idx(full, j)] + d[(j + 1) * n];
        if c < best {
            best = c;
            last = j;
        }
    }
    let mut rev = Vec::with_capacity(n);
    let mut mask = full;
    let mut j = last;
    loop {
        rev.push(j + 1);
        let p = parent[idx(mask, j)];
        mask &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    rev.push(0);
    rev.reverse();
    Tour::new(instance, rev)
}
