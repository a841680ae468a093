use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::DescriptorMatrix;
use crate::error::{Error, Result};
use crate::util::dot;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PcaOptions {
    /// Scale projected coordinates to unit variance.
    pub whiten: bool,
    /// Fail instead of padding when `out_dim` exceeds the numerical rank.
    pub strict_rank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    /// `out_dim×in_dim`, orthonormal rows.
    pub components: Vec<f64>,
    /// Sample variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub whiten: bool,
    pub numerical_rank: usize,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn transform(&self, desc: &DescriptorMatrix) -> Result<DescriptorMatrix> {
        pca_transform(self, desc)
    }
}

/// Mean-centers, then takes the leading eigenvectors of the sample covariance
/// (the top right-singular directions of the centered data).
pub fn pca_fit(desc: &DescriptorMatrix, out_dim: usize, opts: &PcaOptions) -> Result<PcaModel> {
    let n = desc.n_patches();
    let d = desc.dim();
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(Error::Config(format!(
            "PCA output dim {out_dim} must be in 1..={}",
            n.min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for f in desc.rows() {
        crate::util::add_assign(&mut mean, f);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for f in desc.rows() {
        for j in 0..d {
            centered[j] = f[j] - mean[j];
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_tol = top * 1e-10 * d as f64;
    let numerical_rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > rank_tol && eig.eigenvalues[i] > 0.0)
        .count();
    if out_dim > numerical_rank {
        if opts.strict_rank {
            return Err(Error::RankDeficient {
                rank: numerical_rank,
                requested: out_dim,
            });
        }
        log::warn!(
            "PCA: requested {out_dim} components but numerical rank is {numerical_rank}; \
             padding with an orthonormal completion"
        );
    }

    let mut components = Vec::with_capacity(out_dim * d);
    let mut explained_variance = Vec::with_capacity(out_dim);
    for &i in order.iter().take(out_dim) {
        let col = eig.eigenvectors.column(i);
        // Sign convention: largest-magnitude coordinate positive.
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |b, (j, &x)| if x.abs() > b.1.abs() { (j, x) } else { b });
        let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|&x| sign * x));
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }

    Ok(PcaModel {
        in_dim: d,
        out_dim,
        mean,
        components,
        explained_variance,
        whiten: opts.whiten,
        numerical_rank,
    })
}

pub fn pca_transform(model: &PcaModel, desc: &DescriptorMatrix) -> Result<DescriptorMatrix> {
    if desc.dim() != model.in_dim {
        return Err(Error::DimMismatch {
            expected: model.in_dim,
            actual: desc.dim(),
        });
    }
    let top = model.explained_variance.first().copied().unwrap_or(0.0);
    let scales: Vec<f64> = model
        .explained_variance
        .iter()
        .map(|&v| {
            if model.whiten {
                1.0 / (v + 1e-12 * top.max(f64::MIN_POSITIVE)).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut out = Vec::with_capacity(desc.n_patches() * model.out_dim);
    let mut centered = vec![0.0; model.in_dim];
    for f in desc.rows() {
        for j in 0..model.in_dim {
            centered[j] = f[j] - model.mean[j];
        }
        for (c, scale) in scales.iter().enumerate() {
            out.push(dot(&centered, model.component(c)) * scale);
        }
    }
    DescriptorMatrix::new(out, desc.n_patches(), model.out_dim)
}
