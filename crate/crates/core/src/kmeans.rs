//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Result, SpareError};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment pass; non-increasing.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from every point to every center, `(n, k)`.
pub fn sq_distances(points: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((points.nrows(), centers.nrows()), |(i, j)| {
        sq_dist(points.row(i), centers.row(j))
    })
}

fn seed_centers<R: Rng + ?Sized>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // all remaining points coincide with a center
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

fn assign(points: &Array2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let d = sq_distances(points, centers);
    d.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] < row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .unzip()
}

/// Cluster the rows of `points` into `k` groups. Runs at most `iters`
/// update rounds and stops early once assignments settle. A cluster that
/// empties is moved onto the point farthest from its own center.
pub fn kmeans<R: Rng + ?Sized>(points: &Array2<f64>, k: usize, iters: usize, rng: &mut R) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 {
        return Err(SpareError::Config("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(SpareError::Dataset(format!("k-means with k = {k} needs at least {k} points, got {n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(SpareError::NonFinite("k-means input"));
    }
    let mut centers = seed_centers(points, k, rng);
    let (mut assignments, mut dist) = assign(points, &centers);
    let mut inertia = vec![dist.iter().sum::<f64>()];
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            counts[a] += 1;
        }
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                let c = &sums.row(j) / counts[j] as f64;
                centers.row_mut(j).assign(&c);
                continue;
            }
            let far = (0..n)
                .filter(|i| !taken.contains(i) && counts[assignments[*i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken.push(i);
                centers.row_mut(j).assign(&points.row(i));
            }
        }
        let (next, next_dist) = assign(points, &centers);
        let settled = next == assignments;
        assignments = next;
        dist = next_dist;
        inertia.push(dist.iter().sum());
        if settled {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_cluster_is_the_centroid() {
        let p = ndarray::array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let km = kmeans(&p, 1, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(km.centers.row(0).to_vec(), vec![2.0, 1.0]);
    }

    #[test]
    fn separated_clouds_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        for c in [[0.0, 0.0], [50.0, 50.0]] {
            for _ in 0..30 {
                rows.extend([c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]);
            }
        }
        let p = Array2::from_shape_vec((60, 2), rows).unwrap();
        let km = kmeans(&p, 2, 50, &mut rng).unwrap();
        let a = km.assignments[0];
        assert!(km.assignments[..30].iter().all(|&x| x == a));
        assert!(km.assignments[30..].iter().all(|&x| x != a));
    }

    #[test]
    fn k_equal_to_n_has_zero_inertia() {
        let p = ndarray::array![[0.0], [1.0], [5.0], [9.0]];
        let km = kmeans(&p, 4, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let p = ndarray::array![[0.0], [1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kmeans(&p, 0, 5, &mut rng).is_err());
        assert!(kmeans(&p, 3, 5, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn inertia_never_increases(
            vals in prop::collection::vec(-10.0f64..10.0, 24..120),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let n = vals.len() / 3;
            let p = Array2::from_shape_vec((n, 3), vals[..n * 3].to_vec()).unwrap();
            let km = kmeans(&p, k, 30, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for w in km.inertia.windows(2) {
                prop_assert!(w[1] <= w[0], "{:?}", km.inertia);
            }
        }
    }
}
