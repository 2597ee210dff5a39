//! Minimum-cost assignment (Kuhn-Munkres with potentials, O(n^2 m)).

/// Magnitude bound on costs; keeps the potentials finite.
pub const NON_FINITE_COST: f64 = 1e12;

/// Assigns each of the `n` rows of `cost` (`n x m`, `n <= m`) to a distinct
/// column, minimizing the total. Returns the column chosen for each row.
/// Among equal-cost candidates the scan prefers lower column indices.
/// Non-finite entries count as [`NON_FINITE_COST`], so a diverged model
/// still gets an assignment instead of an endless search.
pub fn assign(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows ({n}) than columns ({m})");
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    // 1-based arrays; column 0 is a virtual start node.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let c = cost[i0 - 1][j - 1];
                let c = if c.is_finite() {
                    c.clamp(-NON_FINITE_COST, NON_FINITE_COST)
                } else {
                    NON_FINITE_COST
                };
                let cur = c - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if row_of[j] > 0 {
            out[row_of[j] - 1] = j - 1;
        }
    }
    out
}
