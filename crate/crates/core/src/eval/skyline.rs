use std::cmp::Ordering;

/// Indices of the points not dominated by any other, in input order.
///
/// `q` dominates `p` when `q` is at least as good on both coordinates and
/// strictly better on one (larger is better). Exact duplicates never
/// dominate each other. Runs in `O(n log n)`.
pub fn skyline_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    // first coordinate descending, then second descending
    order.sort_by(|&a, &b| {
        points[b]
            .0
            .total_cmp(&points[a].0)
            .then(points[b].1.total_cmp(&points[a].1))
    });
    let mut keep = vec![false; points.len()];
    let mut best_above = f64::NEG_INFINITY; // best second coordinate among strictly larger firsts
    let mut i = 0;
    while i < order.len() {
        let x = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0.total_cmp(&x) == Ordering::Equal {
            j += 1;
        }
        let group_best = points[order[i]].1;
        for &idx in &order[i..j] {
            let y = points[idx].1;
            keep[idx] = y.total_cmp(&group_best) == Ordering::Equal && y > best_above;
        }
        best_above = best_above.max(group_best);
        i = j;
    }
    (0..points.len()).filter(|&i| keep[i]).collect()
}
