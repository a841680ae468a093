use crate::aggregate::{aggregate, AggregationParams};
use crate::data::{normalize, DescriptorMatrix, EncodedVector, Layout};
use crate::error::{Error, Result};
use crate::util;

use super::gmm::{DiagonalGmm, GmmAggregation};
use super::kmeans::KMeansCodebook;

fn check_dim(expected: usize, desc: &DescriptorMatrix) -> Result<()> {
    if desc.dim() != expected {
        return Err(Error::DimMismatch {
            expected,
            actual: desc.dim(),
        });
    }
    Ok(())
}

/// Hard-assignment residual sums, `K·D` long, before normalization.
pub fn vlad_encode_raw(desc: &DescriptorMatrix, codebook: &KMeansCodebook) -> Result<EncodedVector> {
    check_dim(codebook.d, desc)?;
    let d = codebook.d;
    let mut out = vec![0.0; codebook.k * d];
    for f in desc.rows() {
        let (c, _) = codebook.assign(f);
        let center = codebook.center(c);
        for j in 0..d {
            out[c * d + j] += f[j] - center[j];
        }
    }
    EncodedVector::new(out, Layout::Vlad, (codebook.k, d))
}

pub fn vlad_encode(desc: &DescriptorMatrix, codebook: &KMeansCodebook) -> Result<EncodedVector> {
    normalize(&vlad_encode_raw(desc, codebook)?)
}

/// Fisher vector with caller-supplied responsibilities (`T×K`). This is the
/// same kernel VSAD uses; only the weights and parameters differ.
pub fn fv_encode_with_posteriors(
    desc: &DescriptorMatrix,
    posteriors: &[f64],
    params: &AggregationParams<'_>,
) -> Result<EncodedVector> {
    aggregate(desc, posteriors, params, Layout::Fv)
}

pub fn fv_encode_raw(desc: &DescriptorMatrix, gmm: &DiagonalGmm) -> Result<EncodedVector> {
    check_dim(gmm.d, desc)?;
    let gamma = gmm.responsibilities(desc)?;
    let agg = GmmAggregation::new(gmm);
    fv_encode_with_posteriors(desc, &gamma, &agg.params(gmm))
}

pub fn fv_encode(desc: &DescriptorMatrix, gmm: &DiagonalGmm) -> Result<EncodedVector> {
    normalize(&fv_encode_raw(desc, gmm)?)
}

pub fn avgpool_encode_raw(desc: &DescriptorMatrix) -> Result<EncodedVector> {
    if desc.n_patches() == 0 {
        return Err(Error::EmptyImage("<unnamed>".into()));
    }
    let mut mean = vec![0.0; desc.dim()];
    for f in desc.rows() {
        util::add_assign(&mut mean, f);
    }
    let n = desc.n_patches() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    EncodedVector::new(mean, Layout::Avgpool, (1, desc.dim()))
}

pub fn avgpool_encode(desc: &DescriptorMatrix) -> Result<EncodedVector> {
    normalize(&avgpool_encode_raw(desc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::gmm::{gmm_fit, GmmOptions};
    use rand::Rng as _;

    fn km(centers: Vec<f64>, k: usize, d: usize) -> KMeansCodebook {
        KMeansCodebook {
            k,
            d,
            centers,
            inertia: 0.0,
            inertia_trace: vec![],
        }
    }

    fn unit_gmm() -> DiagonalGmm {
        DiagonalGmm {
            k: 1,
            d: 1,
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![1.0],
            variance_floor: 1e-6,
            log_likelihood: 0.0,
            ll_trace: vec![],
        }
    }

    #[test]
    fn vlad_examples() {
        let cb = km(vec![0.0, 2.0], 2, 1);
        let desc = DescriptorMatrix::new(vec![0.5, 2.5], 2, 1).unwrap();
        assert_eq!(vlad_encode_raw(&desc, &cb).unwrap().data, vec![0.5, 0.5]);

        let at_center = DescriptorMatrix::new(vec![2.0], 1, 1).unwrap();
        assert_eq!(vlad_encode_raw(&at_center, &cb).unwrap().data, vec![0.0, 0.0]);
        assert_eq!(vlad_encode(&at_center, &cb).unwrap().data, vec![0.0, 0.0]);

        let only_first = DescriptorMatrix::new(vec![-1.0, 0.2], 2, 1).unwrap();
        let v = vlad_encode_raw(&only_first, &cb).unwrap();
        assert_eq!(v.data[1], 0.0);

        // ties go to the lower index
        let tie = DescriptorMatrix::new(vec![1.0], 1, 1).unwrap();
        assert_eq!(vlad_encode_raw(&tie, &cb).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn fv_examples() {
        let g = unit_gmm();
        let desc = DescriptorMatrix::new(vec![2.0], 1, 1).unwrap();
        assert_eq!(fv_encode_raw(&desc, &g).unwrap().data, vec![2.0, 3.0]);
        let at_mean = DescriptorMatrix::new(vec![0.0], 1, 1).unwrap();
        assert_eq!(fv_encode_raw(&at_mean, &g).unwrap().data, vec![0.0, -1.0]);
    }

    #[test]
    fn at_mean_gives_negative_weight_g_block() {
        let g = DiagonalGmm {
            k: 2,
            d: 2,
            weights: vec![0.25, 0.75],
            means: vec![0.0, 0.0, 5.0, 5.0],
            variances: vec![1.0, 1.0, 1.0, 1.0],
            variance_floor: 1e-6,
            log_likelihood: 0.0,
            ll_trace: vec![],
        };
        let desc = DescriptorMatrix::new(vec![0.0, 0.0], 1, 2).unwrap();
        let gamma = g.responsibilities(&desc).unwrap();
        let v = fv_encode_raw(&desc, &g).unwrap();
        let blocks = v.blocks().unwrap();
        assert_eq!(blocks[0].0, &[0.0, 0.0]);
        for c in 0..2 {
            for &x in blocks[c].1 {
                let expected = -gamma[c] / g.weights[c].sqrt();
                if c == 0 {
                    assert!((x - expected).abs() < 1e-12);
                } else {
                    // f is not at component 1's mean: only check it is finite
                    assert!(x.is_finite());
                }
            }
        }
    }

    #[test]
    fn avgpool_examples() {
        let desc = DescriptorMatrix::new(vec![0.0, 2.0, 2.0, 0.0], 2, 2).unwrap();
        let v = avgpool_encode(&desc).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((v.data[0] - h).abs() < 1e-15 && (v.data[1] - h).abs() < 1e-15);

        let single = DescriptorMatrix::new(vec![4.0, -9.0], 1, 2).unwrap();
        let v = avgpool_encode(&single).unwrap();
        let s13 = 13f64.sqrt();
        assert!((v.data[0] - 2.0 / s13).abs() < 1e-15);

        let zeros = DescriptorMatrix::new(vec![0.0; 6], 3, 2).unwrap();
        assert_eq!(avgpool_encode(&zeros).unwrap().data, vec![0.0, 0.0]);

        let empty = DescriptorMatrix::new(vec![], 0, 2).unwrap();
        assert!(matches!(avgpool_encode(&empty), Err(Error::EmptyImage(_))));
    }

    #[test]
    fn dim_mismatch() {
        let desc = DescriptorMatrix::new(vec![1.0, 2.0], 1, 2).unwrap();
        assert!(matches!(fv_encode(&desc, &unit_gmm()), Err(Error::DimMismatch { .. })));
        assert!(matches!(
            vlad_encode(&desc, &km(vec![0.0], 1, 1)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn fitted_gmm_encodes_unit_vectors() {
        let mut rng = crate::util::stream(2, &[]);
        let pts: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let desc = DescriptorMatrix::new(pts, 200, 2).unwrap();
        let g = gmm_fit(&desc, 3, &GmmOptions::default()).unwrap();
        let v = fv_encode(&desc.slice_rows(0..10), &g).unwrap();
        assert_eq!(v.len(), 2 * 3 * 2);
        assert!((v.l2_norm() - 1.0).abs() < 1e-9);
    }
}
