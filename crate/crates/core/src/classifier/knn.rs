use super::layers::{squared_distance, NodeMatrix};

/// For every node, the `min(kappa, N - 1)` nearest other nodes by Euclidean
/// distance, nearest first, ties broken by ascending node index. A lone node
/// is its own neighbor.
pub fn knn_neighbors(features: &NodeMatrix, kappa: usize) -> Vec<Vec<usize>> {
    let n = features.rows;
    if n <= 1 {
        return (0..n).map(|i| vec![i]).collect();
    }
    let take = kappa.clamp(1, n - 1);
    // identical rows share one ranking; each member then skips itself
    let (reps, class) = features.row_classes();
    let u = reps.len();
    let mut dist = vec![0.0; u * u];
    for a in 0..u {
        for b in a + 1..u {
            let d = squared_distance(features.row(reps[a]), features.row(reps[b]));
            dist[a * u + b] = d;
            dist[b * u + a] = d;
        }
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let ranked: Vec<Vec<usize>> = (0..u)
        .map(|a| {
            let mut cand: Vec<(f64, usize)> =
                (0..n).map(|j| (dist[a * u + class[j]], j)).collect();
            // one extra so a member can drop itself
            if take + 1 < cand.len() {
                cand.select_nth_unstable_by(take, order);
                cand.truncate(take + 1);
            }
            cand.sort_unstable_by(order);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            ranked[class[i]]
                .iter()
                .copied()
                .filter(|&j| j != i)
                .take(take)
                .collect()
        })
        .collect()
}
