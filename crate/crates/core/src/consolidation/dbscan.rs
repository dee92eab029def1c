//! Density-based clustering over an arbitrary precomputed distance.

use std::collections::VecDeque;

/// Cluster label per point; `None` marks noise.
///
/// Neighborhoods are closed (`d <= eps`) and include the point itself, so
/// `min_pts = 2` means a point needs one other point within `eps` to be a
/// core point. Border points join the first cluster that reaches them in
/// index order, which makes the labelling a pure function of point order.
pub fn dbscan<D>(n: usize, distance: D, eps: f64, min_pts: usize) -> Vec<Option<usize>>
where
    D: Fn(usize, usize) -> f64,
{
    let neighbors =
        |p: usize| -> Vec<usize> { (0..n).filter(|&q| distance(p, q) <= eps).collect() };

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0usize;

    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let seeds = neighbors(p);
        if seeds.len() < min_pts {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[p] = Some(cluster);
        let mut queue: VecDeque<usize> = seeds.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let reach = neighbors(q);
            if reach.len() >= min_pts {
                queue.extend(
                    reach
                        .into_iter()
                        .filter(|&r| labels[r].is_none() || !visited[r]),
                );
            }
        }
    }
    labels
}
