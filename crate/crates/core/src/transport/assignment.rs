//! Shortest augmenting path assignment (Hungarian method with potentials).

/// Solves `min sum_i cost[i][sigma(i)]` over permutations of an `n x n`
/// row-major cost matrix. Returns the assignment `row -> column` and dual
/// potentials `(u, v)` with `u_i + v_j <= cost_ij`, tight on the assignment.
pub(crate) fn solve(n: usize, cost: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based indexing, column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    (assignment, u[1..].to_vec(), v[1..].to_vec())
}
