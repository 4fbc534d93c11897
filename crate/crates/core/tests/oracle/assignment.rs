//! Exhaustive assignment search.

/// Minimum total over every injective pairing of the smaller side into the
/// larger one, summing pair costs in row order. Among equal minima the
/// lexicographically smallest row-sorted pair list wins.
pub fn brute_force(costs: &[f64], rows: usize, cols: usize) -> (f64, Vec<(usize, usize)>) {
    let k = rows.min(cols);
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; rows.max(cols)];
    search(costs, rows, cols, k, &mut chosen, &mut used, &mut best);
    best.unwrap_or((0.0, Vec::new()))
}

fn search(
    costs: &[f64],
    rows: usize,
    cols: usize,
    k: usize,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(f64, Vec<(usize, usize)>)>,
) {
    if chosen.len() == k {
        // chosen[i] is the partner of index i on the smaller side
        let mut pairs: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .map(|(i, &j)| if rows <= cols { (i, j) } else { (j, i) })
            .collect();
        pairs.sort_unstable();
        let total: f64 = pairs.iter().map(|&(r, c)| costs[r * cols + c]).sum();
        let better = match best {
            None => true,
            Some((t, p)) => total < *t || (total == *t && pairs < *p),
        };
        if better {
            *best = Some((total, pairs));
        }
        return;
    }
    for j in 0..rows.max(cols) {
        if !used[j] {
            used[j] = true;
            chosen.push(j);
            search(costs, rows, cols, k, chosen, used, best);
            chosen.pop();
            used[j] = false;
        }
    }
}
