//! Vector of semantically aggregated descriptors.

use rayon::prelude::*;

use crate::aggregate::aggregate;
use crate::codebook::{SemanticCodebook, SubsetPrior};
use crate::data::{normalize, DescriptorMatrix, EncodedVector, Layout, PatchManifest, ProbabilityMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VsadConfig {
    pub codebook: SemanticCodebook,
    /// Original codeword indices to keep; `None` encodes every codeword.
    pub selected: Option<Vec<usize>>,
    pub normalize: bool,
    pub subset_prior: SubsetPrior,
}

impl VsadConfig {
    pub fn new(codebook: SemanticCodebook) -> Self {
        Self {
            codebook,
            selected: None,
            normalize: true,
            subset_prior: SubsetPrior::default(),
        }
    }

    pub fn with_selection(mut self, selected: Vec<usize>) -> Self {
        self.selected = Some(selected);
        self
    }

    pub fn without_normalization(mut self) -> Self {
        self.normalize = false;
        self
    }
}

/// A prepared encoder: the (possibly restricted) codebook plus the probability
/// columns it reads.
#[derive(Debug, Clone)]
pub struct VsadEncoder {
    codebook: SemanticCodebook,
    /// Width of the probability rows this encoder accepts.
    input_classes: usize,
    columns: Option<Vec<usize>>,
    normalize: bool,
}

impl VsadEncoder {
    pub fn new(cfg: &VsadConfig) -> Result<Self> {
        let input_classes = cfg.codebook.k;
        match &cfg.selected {
            None => Ok(Self {
                codebook: cfg.codebook.clone(),
                input_classes,
                columns: None,
                normalize: cfg.normalize,
            }),
            Some(sel) => {
                let codebook = cfg.codebook.restrict(sel, cfg.subset_prior)?;
                let mut columns = sel.clone();
                columns.sort_unstable();
                columns.dedup();
                Ok(Self {
                    codebook,
                    input_classes,
                    columns: Some(columns),
                    normalize: cfg.normalize,
                })
            }
        }
    }

    pub fn codebook(&self) -> &SemanticCodebook {
        &self.codebook
    }

    pub fn output_len(&self) -> usize {
        2 * self.codebook.k * self.codebook.d
    }

    pub fn encode(&self, desc: &DescriptorMatrix, prob: &ProbabilityMatrix) -> Result<EncodedVector> {
        if desc.n_patches() != prob.n_patches() {
            return Err(Error::MismatchedRows {
                what: format!(
                    "{} descriptors vs {} probability rows",
                    desc.n_patches(),
                    prob.n_patches()
                ),
            });
        }
        if desc.n_patches() == 0 {
            return Err(Error::EmptyImage("<unnamed>".into()));
        }
        if desc.dim() != self.codebook.d {
            return Err(Error::DimMismatch {
                expected: self.codebook.d,
                actual: desc.dim(),
            });
        }
        if prob.n_classes() != self.input_classes {
            return Err(Error::DimMismatch {
                expected: self.input_classes,
                actual: prob.n_classes(),
            });
        }
        let raw = match &self.columns {
            None => aggregate(desc, prob.as_slice(), &self.codebook.params(), Layout::Vsad)?,
            Some(cols) => {
                let restricted = prob.select_columns(cols);
                aggregate(desc, restricted.as_slice(), &self.codebook.params(), Layout::Vsad)?
            }
        };
        if self.normalize {
            normalize(&raw)
        } else {
            Ok(raw)
        }
    }

    /// One vector per manifest image, in manifest order. Images are encoded in
    /// parallel; each result depends only on that image's patches.
    pub fn encode_batch(
        &self,
        desc: &DescriptorMatrix,
        prob: &ProbabilityMatrix,
        manifest: &PatchManifest,
    ) -> Result<Vec<(String, EncodedVector)>> {
        check_coverage(desc.n_patches(), prob.n_patches(), manifest)?;
        manifest
            .image_ids()
            .par_iter()
            .zip(manifest.ranges().par_iter())
            .map(|(id, range)| {
                if range.is_empty() {
                    return Err(Error::EmptyImage(id.clone()));
                }
                let v = self.encode(&desc.slice_rows(range.clone()), &prob.slice_rows(range.clone()))?;
                Ok((id.clone(), v))
            })
            .collect()
    }
}

pub(crate) fn check_coverage(n_desc: usize, n_prob: usize, manifest: &PatchManifest) -> Result<()> {
    if n_desc != n_prob || manifest.coverage() != n_desc {
        return Err(Error::MismatchedRows {
            what: format!(
                "descriptors have {n_desc} rows, probabilities {n_prob}, manifest covers {}",
                manifest.coverage()
            ),
        });
    }
    Ok(())
}

/// Encodes one image's patches.
pub fn encode_vsad(
    desc: &DescriptorMatrix,
    prob: &ProbabilityMatrix,
    cfg: &VsadConfig,
) -> Result<EncodedVector> {
    VsadEncoder::new(cfg)?.encode(desc, prob)
}

/// Encodes every image in a bundle.
pub fn encode_batch(
    desc: &DescriptorMatrix,
    prob: &ProbabilityMatrix,
    manifest: &PatchManifest,
    cfg: &VsadConfig,
) -> Result<Vec<(String, EncodedVector)>> {
    VsadEncoder::new(cfg)?.encode_batch(desc, prob, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{build_codebook, CodebookOptions};
    use proptest::prelude::*;

    fn worked_codebook() -> SemanticCodebook {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 3, 2).unwrap();
        build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap()
    }

    #[test]
    fn worked_single_patch() {
        let cfg = VsadConfig::new(worked_codebook()).without_normalization();
        let desc = DescriptorMatrix::new(vec![1.0], 1, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![0.5, 0.5], 1, 2).unwrap();
        let raw = encode_vsad(&desc, &prob, &cfg).unwrap();
        let h = 2f64.sqrt() / 2.0;
        let expected = [1.0, h, -1.0, h];
        for (a, b) in raw.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", raw.data);
        }

        let cfg = VsadConfig::new(worked_codebook());
        let v = encode_vsad(&desc, &prob, &cfg).unwrap();
        let expected = [0.54120, 0.45509, -0.54120, 0.45509];
        for (a, b) in v.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{:?}", v.data);
        }
        assert!(v.normalized);
    }

    #[test]
    fn self_encoding_is_zero() {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 3, 2).unwrap();
        let cfg = VsadConfig::new(worked_codebook()).without_normalization();
        let v = encode_vsad(&desc, &prob, &cfg).unwrap();
        assert!(v.data.iter().all(|x| x.abs() < 1e-12), "{:?}", v.data);
    }

    #[test]
    fn one_hot_rows_reduce_to_scaled_residuals() {
        let desc = DescriptorMatrix::new(vec![0.0, 2.0, 5.0, 7.0, 9.0], 5, 1).unwrap();
        let prob = ProbabilityMatrix::new(
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            5,
            2,
        )
        .unwrap();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        let cfg = VsadConfig::new(cb.clone()).without_normalization();
        let image = DescriptorMatrix::new(vec![1.5, 8.5], 2, 1).unwrap();
        let image_p = ProbabilityMatrix::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let v = encode_vsad(&image, &image_p, &cfg).unwrap();
        let blocks = v.blocks().unwrap();
        let s0 = (1.5 - cb.mu[0]) / (cb.pi[0].sqrt() * cb.sigma[0]);
        let s1 = (8.5 - cb.mu[1]) / (cb.pi[1].sqrt() * cb.sigma[1]);
        assert!((blocks[0].0[0] - s0).abs() < 1e-12);
        assert!((blocks[1].0[0] - s1).abs() < 1e-12);
    }

    #[test]
    fn inactive_codewords_encode_to_zero() {
        let desc = DescriptorMatrix::new(vec![1.0, 2.0], 2, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![1.0, 0.0, 1.0, 0.0], 2, 2).unwrap();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        let cfg = VsadConfig::new(cb).without_normalization();
        let img = ProbabilityMatrix::new(vec![0.5, 0.5], 1, 2).unwrap();
        let v = encode_vsad(&desc.slice_rows(0..1), &img, &cfg).unwrap();
        assert_eq!(&v.data[2..], &[0.0, 0.0]);
    }

    #[test]
    fn subset_encoding_layout_and_zero_self_encoding() {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0, 4.0], 4, 1).unwrap();
        let prob = ProbabilityMatrix::new(
            vec![0.6, 0.2, 0.2, 0.1, 0.5, 0.4, 0.3, 0.3, 0.4, 0.2, 0.2, 0.6],
            4,
            3,
        )
        .unwrap();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        let cfg = VsadConfig::new(cb).with_selection(vec![2, 0]).without_normalization();
        let v = encode_vsad(&desc, &prob, &cfg).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.block_dims, (2, 1));
        assert!(v.data.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn batch_matches_single_calls() {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 3, 2).unwrap();
        let manifest = PatchManifest::new(
            vec!["a".into(), "b".into()],
            vec![0..1, 1..3],
            vec![Some(0), Some(1)],
        )
        .unwrap();
        let cfg = VsadConfig::new(worked_codebook());
        let out = encode_batch(&desc, &prob, &manifest, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, "a");
        assert_eq!(out[1].0, "b");
        let single = encode_vsad(&desc.slice_rows(1..3), &prob.slice_rows(1..3), &cfg).unwrap();
        assert_eq!(out[1].1, single);

        let with_empty = PatchManifest::new(
            vec!["a".into(), "b".into()],
            vec![0..3, 3..3],
            vec![None, None],
        )
        .unwrap();
        assert!(matches!(
            encode_batch(&desc, &prob, &with_empty, &cfg),
            Err(Error::EmptyImage(id)) if id == "b"
        ));
    }

    #[test]
    fn dimension_checks() {
        let cfg = VsadConfig::new(worked_codebook());
        let desc = DescriptorMatrix::new(vec![1.0, 2.0], 1, 2).unwrap();
        let prob = ProbabilityMatrix::new(vec![0.5, 0.5], 1, 2).unwrap();
        assert!(matches!(
            encode_vsad(&desc, &prob, &cfg),
            Err(Error::DimMismatch { .. })
        ));
    }

    fn random_population(n: usize, k: usize, d: usize, seed: u64) -> (DescriptorMatrix, ProbabilityMatrix) {
        use rand::Rng as _;
        let mut rng = crate::util::stream(seed, &[7]);
        let desc: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut prob = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            prob.extend(row.iter().map(|p| p / s));
        }
        (
            DescriptorMatrix::new(desc, n, d).unwrap(),
            ProbabilityMatrix::new(prob, n, k).unwrap(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn additivity_before_normalization(n in 2usize..60, k in 1usize..5, d in 1usize..4, split in 1usize..59, seed in any::<u64>()) {
            let split = split.min(n - 1);
            let (desc, prob) = random_population(n, k, d, seed);
            let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
            let cfg = VsadConfig::new(cb).without_normalization();
            let whole = encode_vsad(&desc, &prob, &cfg).unwrap();
            let a = encode_vsad(&desc.slice_rows(0..split), &prob.slice_rows(0..split), &cfg).unwrap();
            let b = encode_vsad(&desc.slice_rows(split..n), &prob.slice_rows(split..n), &cfg).unwrap();
            for i in 0..whole.len() {
                prop_assert!((whole.data[i] - a.data[i] - b.data[i]).abs() <= 1e-9 * whole.data[i].abs().max(1.0));
            }
        }

        #[test]
        fn permutation_invariance(n in 1usize..40, k in 1usize..5, seed in any::<u64>()) {
            let (desc, prob) = random_population(n, k, 2, seed);
            let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
            let cfg = VsadConfig::new(cb);
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(n / 3);
            order.reverse();
            let a = encode_vsad(&desc, &prob, &cfg).unwrap();
            let b = encode_vsad(&desc.select_rows(&order), &prob.select_rows(&order), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
