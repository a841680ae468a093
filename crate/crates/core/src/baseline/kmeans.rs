use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::util::{self, chunked_reduce, squared_distance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            seed: 0,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansCodebook {
    pub k: usize,
    pub d: usize,
    /// `K×D` row-major.
    pub centers: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the kept restart.
    pub inertia_trace: Vec<f64>,
}

impl KMeansCodebook {
    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.d..(c + 1) * self.d]
    }

    /// Nearest center, ties to the lowest index.
    pub fn assign(&self, f: &[f64]) -> (usize, f64) {
        nearest(&self.centers, self.k, self.d, f)
    }
}

fn nearest(centers: &[f64], k: usize, d: usize, f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let dist = squared_distance(f, &centers[c * d..(c + 1) * d]);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// k-means++ seeding, then Lloyd iterations; the lowest-inertia restart wins.
pub fn kmeans_fit(desc: &DescriptorMatrix, k: usize, opts: &KMeansOptions) -> Result<KMeansCodebook> {
    let n = desc.n_patches();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut best: Option<KMeansCodebook> = None;
    for restart in 0..opts.restarts.max(1) {
        let run = lloyd(desc, k, opts.max_iter, opts.seed, restart as u64);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init(desc: &DescriptorMatrix, k: usize, rng: &mut util::Rng) -> Vec<f64> {
    let n = desc.n_patches();
    let d = desc.dim();
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(desc.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = desc.rows().map(|f| squared_distance(f, &centers[..d])).collect();
    while centers.len() < k * d {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a center
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(desc.row(pick));
        for (i, f) in desc.rows().enumerate() {
            dist[i] = dist[i].min(squared_distance(f, &centers[start..start + d]));
        }
    }
    centers
}

fn lloyd(desc: &DescriptorMatrix, k: usize, max_iter: usize, seed: u64, restart: u64) -> KMeansCodebook {
    let n = desc.n_patches();
    let d = desc.dim();
    let mut rng = util::stream(seed, &[restart]);
    let mut centers = plus_plus_init(desc, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        let assigned: Vec<(usize, f64)> = desc
            .as_slice()
            .par_chunks_exact(d)
            .map(|f| nearest(&centers, k, d, f))
            .collect();
        let changed = assigned
            .iter()
            .zip(&assignment)
            .any(|(&(c, _), &old)| c != old);
        assignment = assigned.iter().map(|&(c, _)| c).collect();

        let (counts, sums) = chunked_reduce(
            n,
            true,
            |rows| {
                let mut counts = vec![0usize; k];
                let mut sums = vec![0.0; k * d];
                for i in rows {
                    let c = assignment[i];
                    counts[c] += 1;
                    util::add_assign(&mut sums[c * d..(c + 1) * d], desc.row(i));
                }
                (counts, sums)
            },
            |(mut c1, mut s1), (c2, s2)| {
                c1.iter_mut().zip(c2).for_each(|(a, b)| *a += b);
                util::add_assign(&mut s1, &s2);
                (c1, s1)
            },
        )
        .expect("n >= k >= 1");
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // An empty cluster takes the point farthest from its (updated) center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| {
                        let a = assignment[i];
                        (i, squared_distance(desc.row(i), &centers[a * d..(a + 1) * d]))
                    })
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
                centers[c * d..(c + 1) * d].copy_from_slice(desc.row(far.0));
                assignment[far.0] = c;
            }
        }
        trace.push(inertia(desc, &centers, k));
        if !changed {
            break;
        }
    }

    KMeansCodebook {
        k,
        d,
        inertia: *trace.last().expect("at least one iteration"),
        centers,
        inertia_trace: trace,
    }
}

fn inertia(desc: &DescriptorMatrix, centers: &[f64], k: usize) -> f64 {
    let d = desc.dim();
    chunked_reduce(
        desc.n_patches(),
        true,
        |rows| rows.map(|i| nearest(centers, k, d, desc.row(i)).1).sum::<f64>(),
        |a, b| a + b,
    )
    .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search over all assignments of 1-D points to k labeled clusters.
    fn brute_force_inertia(points: &[f64], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut labels = Vec::with_capacity(n);
            let mut x = code;
            for _ in 0..n {
                labels.push(x % k);
                x /= k;
            }
            let mut cost = 0.0;
            for c in 0..k {
                let members: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| points[i]).collect();
                if members.is_empty() {
                    continue;
                }
                let m = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn two_clusters_match_exhaustive_optimum() {
        let points = [0.0, 1.0, 10.0, 11.0];
        assert_eq!(brute_force_inertia(&points, 2), 1.0);
        let desc = DescriptorMatrix::new(points.to_vec(), 4, 1).unwrap();
        let km = kmeans_fit(&desc, 2, &KMeansOptions::default()).unwrap();
        let mut centers = km.centers.clone();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.5, 10.5]);
        assert!((km.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_mean() {
        let desc = DescriptorMatrix::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0], 3, 2).unwrap();
        let km = kmeans_fit(&desc, 1, &KMeansOptions::default()).unwrap();
        assert!((km.centers[0] - 3.0).abs() < 1e-12);
        assert!((km.centers[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_have_zero_inertia() {
        let desc = DescriptorMatrix::new(vec![2.5; 20], 10, 2).unwrap();
        let km = kmeans_fit(&desc, 3, &KMeansOptions::default()).unwrap();
        assert_eq!(km.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        let desc = DescriptorMatrix::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(
            kmeans_fit(&desc, 2, &KMeansOptions::default()),
            Err(Error::TooFewPoints { n: 1, k: 2 })
        ));
    }

    #[test]
    fn small_random_sets_reach_optimum() {
        for seed in 0..10u64 {
            let mut rng = util::stream(seed, &[]);
            let pts: Vec<f64> = (0..7).map(|_| rng.random_range(-10.0..10.0)).collect();
            let desc = DescriptorMatrix::new(pts.clone(), 7, 1).unwrap();
            let km = kmeans_fit(&desc, 2, &KMeansOptions { restarts: 10, ..Default::default() }).unwrap();
            let opt = brute_force_inertia(&pts, 2);
            assert!(km.inertia <= opt + 1e-9, "seed {seed}: {} vs {opt}", km.inertia);
        }
    }

    #[test]
    fn deterministic_and_monotone() {
        let mut rng = util::stream(3, &[]);
        let pts: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
        let desc = DescriptorMatrix::new(pts, 200, 3).unwrap();
        let opts = KMeansOptions { seed: 5, ..Default::default() };
        let a = kmeans_fit(&desc, 8, &opts).unwrap();
        let b = kmeans_fit(&desc, 8, &opts).unwrap();
        assert_eq!(a, b);
        for w in a.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }
}
