use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::SeededRng;
use crate::tensor::gemm;

/// Full passes over the data made by [`minibatch_kmeans`].
pub const KMEANS_PASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `[k × dim]`, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub init_seed: u64,
    pub batch_size: usize,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn row(data: &[f64], d: usize, i: usize) -> &[f64] {
    &data[i * d..(i + 1) * d]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Nearest centroid (squared Euclidean) for each row of `x`; ties go to the
/// lowest index.
fn nearest(x: &[f64], n: usize, centroids: &[f64], k: usize, d: usize) -> Vec<usize> {
    // ‖x−c‖² = ‖x‖² − 2x·c + ‖c‖²; the ‖x‖² term does not change the argmin
    let mut dots = vec![0.0; n * k];
    gemm(n, d, k, x, false, centroids, true, &mut dots, false);
    let c_norm: Vec<f64> = (0..k)
        .map(|c| row(centroids, d, c).iter().map(|v| v * v).sum())
        .collect();
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = f64::INFINITY;
            for c in 0..k {
                let v = c_norm[c] - 2.0 * dots[i * k + c];
                if v < best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Hard assignment of every row to its nearest centroid.
pub fn assign(model: &ClusterModel, reps: &[f64]) -> Vec<usize> {
    let n = reps.len() / model.dim;
    let mut out = Vec::with_capacity(n);
    // chunked to bound the distance buffer
    for start in (0..n).step_by(4096) {
        let m = (n - start).min(4096);
        let chunk = &reps[start * model.dim..(start + m) * model.dim];
        out.extend(nearest(chunk, m, &model.centroids, model.k, model.dim));
    }
    out
}

/// Mini-batch k-means with k-means++ seeding.
///
/// Rows are put in a canonical order first, so the result depends only on
/// the multiset of rows. Seeding runs on a seeded subsample of the distinct
/// rows and `k` is capped at their number. Each of the [`KMEANS_PASSES`]
/// passes visits every row once in shuffled mini-batches; a centroid moves
/// towards each assigned row with step `1/count`.
pub fn minibatch_kmeans(
    reps: &[f64],
    dim: usize,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ClusterModel> {
    if dim == 0 || reps.is_empty() || reps.len() % dim != 0 {
        return Err(LabError::Invalid(format!(
            "{} values do not form rows of width {dim}",
            reps.len()
        )));
    }
    if k == 0 || batch_size == 0 {
        return Err(LabError::Invalid(
            "k and batch_size must be positive".into(),
        ));
    }
    let n = reps.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_rows(row(reps, dim, a), row(reps, dim, b)));
    let data: Vec<f64> = order
        .iter()
        .flat_map(|&i| row(reps, dim, i).iter().copied())
        .collect();
    let mut distinct: Vec<usize> = Vec::new();
    for i in 0..n {
        if distinct
            .last()
            .is_none_or(|&j| cmp_rows(row(&data, dim, i), row(&data, dim, j)).is_ne())
        {
            distinct.push(i);
        }
    }
    let k = k.min(distinct.len());
    let rng = SeededRng::new(seed, "kmeans");

    let m = distinct.len().min(batch_size.max(16 * k));
    let mut sub: Vec<usize> = rng
        .substream("subsample")
        .sample_indices(distinct.len(), m)
        .into_iter()
        .map(|i| distinct[i])
        .collect();
    sub.sort_unstable();
    let mut centroids = kmeans_pp(&data, dim, &sub, k, &mut rng.substream("init"));

    let mut counts = vec![0u64; k];
    let mut pass_rng = rng.substream("passes");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(batch_size * dim);
    for _ in 0..KMEANS_PASSES {
        pass_rng.shuffle(&mut perm);
        for chunk in perm.chunks(batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(row(&data, dim, i));
            }
            let labels = nearest(&batch, chunk.len(), &centroids, k, dim);
            for (b, &c) in labels.iter().enumerate() {
                counts[c] += 1;
                let lr = 1.0 / counts[c] as f64;
                let x = &batch[b * dim..(b + 1) * dim];
                for (cv, xv) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *cv += lr * (xv - *cv);
                }
            }
        }
    }
    Ok(ClusterModel {
        centroids,
        k,
        dim,
        init_seed: seed,
        batch_size,
    })
}

/// D²-weighted seeding over the rows listed in `pool` (all distinct).
fn kmeans_pp(data: &[f64], d: usize, pool: &[usize], k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = pool[rng.below(pool.len())];
    centroids.extend_from_slice(row(data, d, first));
    let mut best: Vec<f64> = pool
        .iter()
        .map(|&i| sq_dist(row(data, d, i), row(data, d, first)))
        .collect();
    while centroids.len() < k * d {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut j = pool.len() - 1;
            for (idx, &w) in best.iter().enumerate() {
                if w > 0.0 && u < w {
                    j = idx;
                    break;
                }
                u -= w;
            }
            // rounding can land on an already chosen row; take the farthest instead
            if best[j] == 0.0 {
                j = (0..best.len()).fold(0, |a, b| if best[b] > best[a] { b } else { a });
            }
            j
        } else {
            break;
        };
        let c = row(data, d, pool[pick]).to_vec();
        for (b, &i) in best.iter_mut().zip(pool) {
            *b = b.min(sq_dist(row(data, d, i), &c));
        }
        centroids.extend(c);
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_three_clusters() {
        let reps = [0.0, 0.0, 5.0, 5.0, -3.0, 4.0];
        let m = minibatch_kmeans(&reps, 2, 3, 2, 1).unwrap();
        let labels = assign(&m, &reps);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(m.centroid(l), &reps[i * 2..i * 2 + 2]);
        }
    }

    #[test]
    fn k_capped_by_distinct_rows() {
        let reps = [1.0, 1.0, 1.0, 2.0];
        let m = minibatch_kmeans(&reps, 1, 10, 4, 0).unwrap();
        assert_eq!(m.k, 2);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let rng = &mut SeededRng::new(3, "t");
        let reps: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let m = minibatch_kmeans(&reps, 3, 1, 32, 9).unwrap();
        for c in 0..3 {
            let mean = (0..100).map(|i| reps[i * 3 + c]).sum::<f64>() / 100.0;
            assert!((m.centroids[c] - mean).abs() < 1e-6);
        }
    }
}
