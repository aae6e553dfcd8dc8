//! Successive shortest paths min-cost flow on the complete bipartite
//! transportation graph, for arbitrary (non-uniform, unequal count) weights.

// Remaining supply/demand below this is treated as exhausted.
const MASS_EPS: f64 = 1e-15;

pub(crate) struct FlowSolution {
    /// Row-major `n x m` coupling.
    pub coupling: Vec<f64>,
    /// Dual potentials with `u_i + v_j <= cost_ij`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Minimizes `sum gamma_ij cost_ij` subject to row sums `supply` and column
/// sums `demand` (both summing to the same total).
pub(crate) fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> FlowSolution {
    let (n, m) = (supply.len(), demand.len());
    debug_assert_eq!(cost.len(), n * m);
    let nodes = n + m;
    let mut flow = vec![0.0; n * m];
    let mut supply_left = supply.to_vec();
    let mut demand_left = demand.to_vec();
    // Node potentials; zero is feasible since all costs are nonnegative.
    let mut pot = vec![0.0; nodes];
    let mut dist = vec![f64::INFINITY; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];

    loop {
        let remaining: f64 = supply_left.iter().sum();
        if remaining <= MASS_EPS * (n as f64) {
            break;
        }
        dist.fill(f64::INFINITY);
        parent.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if supply_left[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        // Dense Dijkstra on reduced costs.
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (k, &d) in dist.iter().enumerate() {
                if !done[k] && d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let node = n + j;
                    if done[node] {
                        continue;
                    }
                    let reduced = (cost[i * m + j] + pot[i] - pot[node]).max(0.0);
                    if best_d + reduced < dist[node] {
                        dist[node] = best_d + reduced;
                        parent[node] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= MASS_EPS {
                        continue;
                    }
                    let reduced = (-cost[i * m + j] + pot[best] - pot[i]).max(0.0);
                    if best_d + reduced < dist[i] {
                        dist[i] = best_d + reduced;
                        parent[i] = best;
                    }
                }
            }
        }

        let sink = (0..m)
            .filter(|&j| demand_left[j] > MASS_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(sink) = sink else { break };
        let target = n + sink;
        let cap = dist[target];
        for (p, d) in pot.iter_mut().zip(&dist) {
            *p += d.min(cap);
        }

        // Bottleneck along the path back to a source with spare supply.
        let mut bottleneck = demand_left[sink];
        let mut node = target;
        while parent[node] != usize::MAX {
            let prev = parent[node];
            if prev >= n {
                // Reverse arc sink(prev) -> source(node) cancels flow.
                bottleneck = bottleneck.min(flow[node * m + (prev - n)]);
            }
            node = prev;
        }
        let source = node;
        bottleneck = bottleneck.min(supply_left[source]);

        let mut node = target;
        while parent[node] != usize::MAX {
            let prev = parent[node];
            if prev < n {
                flow[prev * m + (node - n)] += bottleneck;
            } else {
                let f = &mut flow[node * m + (prev - n)];
                *f = (*f - bottleneck).max(0.0);
            }
            node = prev;
        }
        supply_left[source] -= bottleneck;
        demand_left[sink] -= bottleneck;
    }

    let u = pot[..n].iter().map(|p| -p).collect();
    let v = pot[n..].to_vec();
    FlowSolution { coupling: flow, u, v }
}
