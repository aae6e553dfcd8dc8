//! Exhaustive permutation matching; the reference for small uniform instances.

/// Minimum over all permutations of `sum_i cost[i][sigma(i)]`, by Heap's
/// algorithm. Returns the best permutation and its total.
pub(crate) fn best_permutation(n: usize, cost: &[f64]) -> (Vec<usize>, f64) {
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    let mut best = perm.clone();
    let mut best_cost = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = eval(&perm);
            if total < best_cost {
                best_cost = total;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best, best_cost)
}
