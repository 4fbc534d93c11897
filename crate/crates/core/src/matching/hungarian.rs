//! Kuhn–Munkres assignment on rectangular matrices.

/// Minimum-cost assignment of `min(rows, cols)` pairs over a row-major
/// `rows × cols` cost matrix. Returns `(row, col)` pairs sorted by row.
pub(crate) fn solve(costs: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    solve_with_duals(costs, rows, cols).0
}

/// Optimal pairs plus row and column dual potentials: `cost - row - col`
/// is non-negative everywhere and zero on every pair of every optimal
/// assignment.
fn solve_with_duals(
    costs: &[f64],
    rows: usize,
    cols: usize,
) -> (Vec<(usize, usize)>, Vec<f64>, Vec<f64>) {
    if rows == 0 || cols == 0 {
        return (Vec::new(), vec![0.0; rows], vec![0.0; cols]);
    }
    if rows <= cols {
        solve_wide(|r, c| costs[r * cols + c], rows, cols)
    } else {
        let (pairs, u, v) = solve_wide(|r, c| costs[c * cols + r], cols, rows);
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        (pairs, v, u)
    }
}

/// Shortest augmenting path with potentials; requires `n <= m`.
fn solve_wide(
    cost: impl Fn(usize, usize) -> f64,
    n: usize,
    m: usize,
) -> (Vec<(usize, usize)>, Vec<f64>, Vec<f64>) {
    // 1-based arrays; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    (pairs, u[1..].to_vec(), v[1..].to_vec())
}

/// Sum of pair costs in row order.
pub(crate) fn total(costs: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| costs[r * cols + c]).sum()
}

/// Among all optimal assignments, the one whose row-sorted pair list is
/// lexicographically smallest.
///
/// Rows are decided in order: each row takes the smallest column that still
/// admits an optimal completion, or stays unassigned if none does.
pub(crate) fn solve_canonical(costs: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let (first, row_pot, col_pot) = solve_with_duals(costs, rows, cols);
    let target = first.len();
    if target == 0 {
        return first;
    }
    let best = total(costs, cols, &first);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut free_rows: Vec<usize> = (0..rows).collect();
    let mut free_cols: Vec<usize> = (0..cols).collect();
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut fixed_cost = 0.0;

    // Optimal value of the residual problem, or None if it cannot supply
    // `need` pairs.
    let residual = |rs: &[usize], cs: &[usize], need: usize| -> Option<f64> {
        if need == 0 {
            return Some(0.0);
        }
        if rs.len().min(cs.len()) != need {
            return None;
        }
        let sub: Vec<f64> = rs
            .iter()
            .flat_map(|&r| cs.iter().map(move |&c| costs[r * cols + c]))
            .collect();
        let pairs = solve(&sub, rs.len(), cs.len());
        Some(total(&sub, cs.len(), &pairs))
    };

    for r in 0..rows {
        if fixed.len() == target {
            break;
        }
        free_rows.retain(|&x| x != r);
        let need = target - fixed.len() - 1;
        let mut chosen = None;
        for (ci, &c) in free_cols.iter().enumerate() {
            if costs[r * cols + c] - row_pot[r] - col_pot[c] > tol {
                continue;
            }
            let mut cs = free_cols.clone();
            cs.remove(ci);
            let step = costs[r * cols + c];
            if let Some(rest) = residual(&free_rows, &cs, need) {
                if (fixed_cost + step + rest - best).abs() <= tol {
                    chosen = Some((ci, c, step));
                    break;
                }
            }
        }
        if let Some((ci, c, step)) = chosen {
            fixed.push((r, c));
            fixed_cost += step;
            free_cols.remove(ci);
        }
    }
    debug_assert_eq!(fixed.len(), target);
    fixed
}
