use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_fit, KMeansOptions};
use crate::aggregate::AggregationParams;
use crate::data::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::util::{self, chunked_reduce, log_sum_exp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood change drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Absolute variance floor; `None` uses `1e-6 × mean per-dimension variance`.
    pub variance_floor: Option<f64>,
    pub kmeans_restarts: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            variance_floor: None,
            kmeans_restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGmm {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    /// `K×D` row-major.
    pub means: Vec<f64>,
    /// `K×D` row-major, floored.
    pub variances: Vec<f64>,
    pub variance_floor: f64,
    /// Total log-likelihood of the fitted parameters.
    pub log_likelihood: f64,
    /// Log-likelihood of the initial parameters followed by one entry per EM step.
    pub ll_trace: Vec<f64>,
}

impl DiagonalGmm {
    fn log_norm(&self) -> Vec<f64> {
        (0..self.k)
            .map(|c| {
                if self.weights[c] <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = &self.variances[c * self.d..(c + 1) * self.d];
                self.weights[c].ln()
                    - 0.5 * v.iter().map(|x| (2.0 * PI * x).ln()).sum::<f64>()
            })
            .collect()
    }

    fn log_joint(&self, log_norm: &[f64], f: &[f64], out: &mut [f64]) {
        let d = self.d;
        for c in 0..self.k {
            if log_norm[c] == f64::NEG_INFINITY {
                out[c] = f64::NEG_INFINITY;
                continue;
            }
            let m = &self.means[c * d..(c + 1) * d];
            let v = &self.variances[c * d..(c + 1) * d];
            let q: f64 = (0..d).map(|j| (f[j] - m[j]) * (f[j] - m[j]) / v[j]).sum();
            out[c] = log_norm[c] - 0.5 * q;
        }
    }

    /// Posterior responsibilities `γ_t(k)`, `T×K` row-major.
    pub fn responsibilities(&self, desc: &DescriptorMatrix) -> Result<Vec<f64>> {
        if desc.dim() != self.d {
            return Err(Error::DimMismatch {
                expected: self.d,
                actual: desc.dim(),
            });
        }
        let log_norm = self.log_norm();
        let k = self.k;
        let mut out = vec![0.0; desc.n_patches() * k];
        out.par_chunks_exact_mut(k)
            .zip(desc.as_slice().par_chunks_exact(self.d))
            .for_each(|(row, f)| {
                self.log_joint(&log_norm, f, row);
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|x| *x = (*x - lse).exp());
            });
        Ok(out)
    }

    pub fn total_log_likelihood(&self, desc: &DescriptorMatrix) -> f64 {
        let log_norm = self.log_norm();
        chunked_reduce(
            desc.n_patches(),
            true,
            |rows| {
                let mut buf = vec![0.0; self.k];
                rows.map(|i| {
                    self.log_joint(&log_norm, desc.row(i), &mut buf);
                    log_sum_exp(&buf)
                })
                .sum::<f64>()
            },
            |a, b| a + b,
        )
        .unwrap_or(0.0)
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sqrt()).collect()
    }

    /// Zero-weight components are treated as inactive.
    pub fn active(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }
}

/// Owned parameter set viewed through the shared aggregation kernel.
#[derive(Debug, Clone)]
pub struct GmmAggregation {
    sigma: Vec<f64>,
    active: Vec<bool>,
}

impl GmmAggregation {
    pub fn new(gmm: &DiagonalGmm) -> Self {
        Self {
            sigma: gmm.sigmas(),
            active: gmm.active(),
        }
    }

    pub fn params<'a>(&'a self, gmm: &'a DiagonalGmm) -> AggregationParams<'a> {
        AggregationParams {
            prior: &gmm.weights,
            mean: &gmm.means,
            sigma: &self.sigma,
            active: &self.active,
            k: gmm.k,
            d: gmm.d,
        }
    }
}

/// Mean over dimensions of the per-dimension sample variance.
fn mean_global_variance(desc: &DescriptorMatrix) -> f64 {
    let n = desc.n_patches() as f64;
    let d = desc.dim();
    let mut mean = vec![0.0; d];
    for f in desc.rows() {
        util::add_assign(&mut mean, f);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for f in desc.rows() {
        var += util::squared_distance(f, &mean);
    }
    var / (n * d as f64)
}

/// EM for a diagonal-covariance mixture, initialized from k-means.
pub fn gmm_fit(desc: &DescriptorMatrix, k: usize, opts: &GmmOptions) -> Result<DiagonalGmm> {
    let n = desc.n_patches();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let d = desc.dim();
    let floor = opts
        .variance_floor
        .unwrap_or_else(|| 1e-6 * mean_global_variance(desc))
        .max(f64::MIN_POSITIVE);

    let km = kmeans_fit(
        desc,
        k,
        &KMeansOptions {
            max_iter: 20,
            seed: opts.seed,
            restarts: opts.kmeans_restarts.max(1),
        },
    )?;
    // Initial parameters: hard k-means partition moments.
    let mut hard = vec![0.0; n * k];
    for (i, f) in desc.rows().enumerate() {
        hard[i * k + km.assign(f).0] = 1.0;
    }
    let mut gmm = DiagonalGmm {
        k,
        d,
        weights: vec![1.0 / k as f64; k],
        means: km.centers.clone(),
        variances: vec![floor; k * d],
        variance_floor: floor,
        log_likelihood: f64::NEG_INFINITY,
        ll_trace: Vec::new(),
    };
    m_step(desc, &hard, &mut gmm);
    let mut ll = gmm.total_log_likelihood(desc);
    gmm.ll_trace.push(ll);

    for _ in 0..opts.max_iter {
        let resp = gmm.responsibilities(desc)?;
        m_step(desc, &resp, &mut gmm);
        let next = gmm.total_log_likelihood(desc);
        gmm.ll_trace.push(next);
        let rel = (next - ll).abs() / ll.abs().max(1e-300);
        ll = next;
        if rel < opts.tol {
            break;
        }
    }
    gmm.log_likelihood = ll;
    Ok(gmm)
}

/// Weighted moment updates. Components with no responsibility mass keep their
/// previous mean and variance and get weight zero.
fn m_step(desc: &DescriptorMatrix, resp: &[f64], gmm: &mut DiagonalGmm) {
    let (k, d) = (gmm.k, gmm.d);
    let n = desc.n_patches();
    let (mass, wsum) = chunked_reduce(
        n,
        true,
        |rows| {
            let mut mass = vec![0.0; k];
            let mut wsum = vec![0.0; k * d];
            for i in rows {
                let f = desc.row(i);
                for c in 0..k {
                    let r = resp[i * k + c];
                    if r == 0.0 {
                        continue;
                    }
                    mass[c] += r;
                    for j in 0..d {
                        wsum[c * d + j] += r * f[j];
                    }
                }
            }
            (mass, wsum)
        },
        |(mut m1, mut s1), (m2, s2)| {
            util::add_assign(&mut m1, &m2);
            util::add_assign(&mut s1, &s2);
            (m1, s1)
        },
    )
    .expect("n >= 1");

    let mut means = gmm.means.clone();
    for c in 0..k {
        if mass[c] > 0.0 {
            for j in 0..d {
                means[c * d + j] = wsum[c * d + j] / mass[c];
            }
        }
    }
    let sq = chunked_reduce(
        n,
        true,
        |rows| {
            let mut acc = vec![0.0; k * d];
            for i in rows {
                let f = desc.row(i);
                for c in 0..k {
                    let r = resp[i * k + c];
                    if r == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        let e = f[j] - means[c * d + j];
                        acc[c * d + j] += r * e * e;
                    }
                }
            }
            acc
        },
        |mut a, b| {
            util::add_assign(&mut a, &b);
            a
        },
    )
    .expect("n >= 1");

    for c in 0..k {
        gmm.weights[c] = mass[c] / n as f64;
        if mass[c] > 0.0 {
            for j in 0..d {
                gmm.variances[c * d + j] = (sq[c * d + j] / mass[c]).max(gmm.variance_floor);
            }
        }
    }
    gmm.means = means;
    let total: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= total);
}
