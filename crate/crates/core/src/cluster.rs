//! Balanced hierarchical 2-means over unit-normalized points.
//!
//! Each split seeds two means from distinct random members, then alternates
//! between a balanced assignment (rank members by `cos(x, μ₁) − cos(x, μ₂)`,
//! top `⌈n/2⌉` go left) and a mean update, until the assignment stops
//! changing. Splitting always targets the largest remaining cluster, so a
//! power-of-two cluster count reproduces the usual level-by-level recursion.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, normalize_in_place, Matrix};

const MAX_ITERS: usize = 16;

fn unit_rows(points: &Matrix) -> Matrix {
    let mut out = points.clone();
    for i in 0..out.rows() {
        normalize_in_place(out.row_mut(i));
    }
    out
}

fn mean_direction(points: &Matrix, members: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; points.cols()];
    for &i in members {
        axpy(1.0, points.row(i), &mut m);
    }
    normalize_in_place(&mut m);
    m
}

/// Splits `members` into two balanced halves (`⌈n/2⌉`, `⌊n/2⌋`).
fn split_balanced(points: &Matrix, members: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = members.len();
    debug_assert!(n >= 2);
    let seeds = sample(rng, n, 2);
    let mut left_mean = points.row(members[seeds.index(0)]).to_vec();
    let mut right_mean = points.row(members[seeds.index(1)]).to_vec();
    let left_size = n.div_ceil(2);

    let mut order: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut scored: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| {
                let x = points.row(i);
                (dot(x, &left_mean) - dot(x, &right_mean), i)
            })
            .collect();
        // Descending score, ascending index on ties.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let next: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
        let stable = {
            let mut a = next[..left_size].to_vec();
            let mut b = if order.is_empty() { Vec::new() } else { order[..left_size].to_vec() };
            a.sort_unstable();
            b.sort_unstable();
            a == b
        };
        order = next;
        if stable {
            break;
        }
        left_mean = mean_direction(points, &order[..left_size]);
        right_mean = mean_direction(points, &order[left_size..]);
    }
    let mut left = order[..left_size].to_vec();
    let mut right = order[left_size..].to_vec();
    left.sort_unstable();
    right.sort_unstable();
    (left, right)
}

fn split_until<F>(points: &Matrix, seed: u64, mut done: F) -> Vec<Vec<usize>>
where
    F: FnMut(&[Vec<usize>]) -> bool,
{
    let points = unit_rows(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = vec![(0..points.rows()).collect::<Vec<_>>()];
    while !done(&clusters) {
        // Largest cluster first; lowest position breaks ties.
        let (pos, _) = clusters
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        if clusters[pos].len() < 2 {
            break;
        }
        let members = clusters.remove(pos);
        let (left, right) = split_balanced(&points, &members, &mut rng);
        clusters.insert(pos, right);
        clusters.insert(pos, left);
    }
    clusters
}

/// Partitions the rows of `points` into exactly `num_clusters` balanced groups
/// and returns the cluster index of every row.
pub fn cluster_labels(points: &Matrix, num_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.rows();
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::Config(format!(
            "cannot form {num_clusters} clusters from {n} points"
        )));
    }
    let clusters = split_until(points, seed, |c| c.len() >= num_clusters);
    let mut assignment = vec![0; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            assignment[i] = c;
        }
    }
    Ok(assignment)
}

/// Splits points into groups no larger than `max_size`, returned as member lists.
pub fn cluster_by_size(points: &Matrix, max_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let max_size = max_size.max(1);
    split_until(points, seed, |c| c.iter().all(|m| m.len() <= max_size))
}
