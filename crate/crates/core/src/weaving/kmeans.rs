//! Equal-size K-Means with greedy capacity-constrained assignment.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Row indices of `points`, ascending within each cluster.
    pub clusters: Vec<Vec<usize>>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances after each round.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(p: &[f32], c: &[f64]) -> f64 {
    p.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

fn centroids_of(points: &Matrix, assign: &[usize], k: usize, capacity: usize) -> Vec<Vec<f64>> {
    let dim = points.cols();
    let mut sums = vec![vec![0.0f64; dim]; k];
    for (p, &c) in assign.iter().enumerate() {
        for (s, &v) in sums[c].iter_mut().zip(points.row(p)) {
            *s += v as f64;
        }
    }
    for s in &mut sums {
        for v in s.iter_mut() {
            *v /= capacity as f64;
        }
    }
    sums
}

fn cost(points: &Matrix, assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(p, &c)| sq_dist(points.row(p), &centroids[c]))
        .sum()
}

/// Walks all (point, cluster) pairs in ascending (distance, point, cluster)
/// order and places each unassigned point into the first cluster that
/// still has room.
fn greedy_assign(points: &Matrix, centroids: &[Vec<f64>], capacity: usize) -> Vec<usize> {
    let n = points.rows();
    let k = centroids.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for p in 0..n {
        let row = points.row(p);
        for (c, centroid) in centroids.iter().enumerate() {
            pairs.push((sq_dist(row, centroid), p, c));
        }
    }
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assign = vec![usize::MAX; n];
    let mut room = vec![capacity; k];
    let mut left = n;
    for (_, p, c) in pairs {
        if assign[p] == usize::MAX && room[c] > 0 {
            assign[p] = c;
            room[c] -= 1;
            left -= 1;
            if left == 0 {
                break;
            }
        }
    }
    assign
}

/// One pass of pairwise exchanges between clusters. A swap of `p` (in `a`)
/// and `q` (in `b`) changes the objective by
/// `-2/m * ((S_a - S_b)·(q - p) + |q - p|²)` where `S` are cluster sums,
/// so it is taken whenever that bracket is positive. Returns whether any
/// swap happened.
fn swap_pass(points: &Matrix, assign: &mut [usize], k: usize) -> bool {
    let dim = points.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut sums = vec![vec![0.0f64; dim]; k];
    for (p, &c) in assign.iter().enumerate() {
        members[c].push(p);
        for (s, &v) in sums[c].iter_mut().zip(points.row(p)) {
            *s += v as f64;
        }
    }
    let mut diff = vec![0.0f64; dim];
    let mut swapped = false;
    for a in 0..k {
        for b in a + 1..k {
            for ia in 0..members[a].len() {
                for ib in 0..members[b].len() {
                    let (p, q) = (members[a][ia], members[b][ib]);
                    let (rp, rq) = (points.row(p), points.row(q));
                    let (mut cross, mut norm) = (0.0f64, 0.0f64);
                    for i in 0..dim {
                        diff[i] = rq[i] as f64 - rp[i] as f64;
                        cross += (sums[a][i] - sums[b][i]) * diff[i];
                        norm += diff[i] * diff[i];
                    }
                    let gain = cross + norm;
                    if gain > 1e-9 * (cross.abs() + norm) + 1e-12 {
                        for i in 0..dim {
                            sums[a][i] += diff[i];
                            sums[b][i] -= diff[i];
                        }
                        members[a][ia] = q;
                        members[b][ib] = p;
                        assign[p] = b;
                        assign[q] = a;
                        swapped = true;
                    }
                }
            }
        }
    }
    swapped
}

/// Partitions the rows of `points` into `k` clusters of exactly `capacity`
/// rows each.
///
/// Rounds of greedy capacity-constrained assignment run until they stop
/// changing anything. A greedy assignment is only accepted when it does not
/// raise the cost under the current centroids. Once greedy rounds stall, a
/// pairwise swap pass tries to escape the local optimum; the loop continues
/// as long as swaps help. Every accepted step lowers (or keeps) the
/// objective, so the trace never increases.
pub fn balanced_kmeans(
    points: &Matrix,
    k: usize,
    capacity: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Param("balanced_kmeans needs at least one cluster".into()));
    }
    if !n.is_multiple_of(k) || n / k != capacity {
        return Err(Error::Param(format!(
            "{n} points cannot form {k} clusters of {capacity}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::Param("max_iters must be positive".into()));
    }
    let mut rng = seed::rng(seed, "kmeans");
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, n, k)
        .into_iter()
        .map(|p| points.row(p).iter().map(|&v| v as f64).collect())
        .collect();

    let mut assign: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        let next = greedy_assign(points, &centroids, capacity);
        let stalled = next == assign
            || (!assign.is_empty()
                && cost(points, &next, &centroids) > cost(points, &assign, &centroids));
        if !stalled {
            assign = next;
        } else if k < 2 || !swap_pass(points, &mut assign, k) {
            break;
        }
        iterations += 1;
        centroids = centroids_of(points, &assign, k, capacity);
        objective.push(cost(points, &assign, &centroids));
    }

    let mut clusters = vec![Vec::with_capacity(capacity); k];
    for (p, &c) in assign.iter().enumerate() {
        clusters[c].push(p);
    }
    Ok(KMeansResult {
        clusters,
        centroids,
        objective,
        iterations,
    })
}

/// Within-cluster sum of squared distances for an arbitrary partition.
pub fn partition_objective(points: &Matrix, clusters: &[Vec<usize>]) -> f64 {
    clusters
        .iter()
        .map(|members| {
            let dim = points.cols();
            let mut mean = vec![0.0f64; dim];
            for &p in members {
                for (m, &v) in mean.iter_mut().zip(points.row(p)) {
                    *m += v as f64;
                }
            }
            for m in &mut mean {
                *m /= members.len() as f64;
            }
            members.iter().map(|&p| sq_dist(points.row(p), &mean)).sum::<f64>()
        })
        .sum()
}
