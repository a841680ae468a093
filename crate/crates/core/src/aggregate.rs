//! The first/second-order aggregation kernel shared by VSAD and the Fisher vector.
//!
//! For soft weights `w_t^k`, prior `π_k`, mean `μ_k` and per-dimension deviation `σ_k`:
//!
//! ```text
//! S_k = 1/√π_k · Σ_t w_t^k · (f_t − μ_k) / σ_k
//! G_k = 1/√π_k · Σ_t w_t^k · ((f_t − μ_k)² / σ_k² − 1)
//! ```
//!
//! The two encoders differ only in where the weights and parameters come from.
//! Patches are summed in a canonical content order, so the output does not
//! depend on the order patches arrive in.

use crate::data::{DescriptorMatrix, EncodedVector, Layout};
use crate::error::{Error, Result};

/// Borrowed codeword statistics in row-major `K×D` layout.
#[derive(Debug, Clone, Copy)]
pub struct AggregationParams<'a> {
    pub prior: &'a [f64],
    pub mean: &'a [f64],
    pub sigma: &'a [f64],
    /// Inactive codewords emit zero blocks.
    pub active: &'a [bool],
    pub k: usize,
    pub d: usize,
}

impl AggregationParams<'_> {
    fn check(&self) -> Result<()> {
        let (k, d) = (self.k, self.d);
        if self.prior.len() != k
            || self.active.len() != k
            || self.mean.len() != k * d
            || self.sigma.len() != k * d
        {
            return Err(Error::InconsistentDim(format!(
                "aggregation parameters do not match K={k}, D={d}"
            )));
        }
        Ok(())
    }
}

/// Aggregates `T` patches against `K` codewords. `weights` is `T×K` row-major.
/// Returns the raw (unnormalized) `[S_1, G_1, …, S_K, G_K]` vector.
pub fn aggregate(
    desc: &DescriptorMatrix,
    weights: &[f64],
    params: &AggregationParams<'_>,
    layout: Layout,
) -> Result<EncodedVector> {
    params.check()?;
    let (k, d) = (params.k, params.d);
    if desc.dim() != d {
        return Err(Error::DimMismatch {
            expected: d,
            actual: desc.dim(),
        });
    }
    let t = desc.n_patches();
    if weights.len() != t * k {
        return Err(Error::MismatchedRows {
            what: format!(
                "{t} descriptors but {} weight rows of width {k}",
                weights.len() / k.max(1)
            ),
        });
    }

    let order = canonical_order(desc, weights, k);
    let mut out = vec![0.0; 2 * k * d];
    let mut resid = vec![0.0; d];
    for c in 0..k {
        if !params.active[c] {
            continue;
        }
        let mu = &params.mean[c * d..(c + 1) * d];
        let sigma = &params.sigma[c * d..(c + 1) * d];
        let (s_block, g_block) = out[2 * c * d..2 * (c + 1) * d].split_at_mut(d);
        for &i in &order {
            let w = weights[i * k + c];
            if w == 0.0 {
                continue;
            }
            let f = desc.row(i);
            for j in 0..d {
                resid[j] = (f[j] - mu[j]) / sigma[j];
            }
            for j in 0..d {
                s_block[j] += w * resid[j];
                g_block[j] += w * (resid[j] * resid[j] - 1.0);
            }
        }
        let scale = 1.0 / params.prior[c].sqrt();
        s_block.iter_mut().for_each(|x| *x *= scale);
        g_block.iter_mut().for_each(|x| *x *= scale);
    }
    EncodedVector::new(out, layout, (k, d))
}

/// Patch indices sorted by descriptor, then weight row (lexicographic, total order).
fn canonical_order(desc: &DescriptorMatrix, weights: &[f64], k: usize) -> Vec<usize> {
    let lex = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..desc.n_patches()).collect();
    order.sort_by(|&a, &b| {
        lex(desc.row(a), desc.row(b))
            .then_with(|| lex(&weights[a * k..(a + 1) * k], &weights[b * k..(b + 1) * k]))
    });
    order
}
