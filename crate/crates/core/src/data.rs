//! Shared data model: patch descriptors, semantic probabilities, the patch
//! manifest that groups patches into images, and encoded image vectors.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability rows whose sums fall inside this band are renormalized on ingest.
pub const RENORMALIZE_BAND: (f64, f64) = (0.5, 2.0);
/// Entries below this are rejected; entries in `[NEGATIVE_SLACK, 0)` are clamped to zero.
pub const NEGATIVE_SLACK: f64 = -1e-9;
/// Row-sum tolerance accepted without renormalization.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Rows are always rescaled to sum to one; only drift beyond f32 storage
/// rounding is reported.
const FLAG_DRIFT: f64 = 1e-5;

/// N×D patch descriptors, row-major, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    data: Vec<f64>,
    n_patches: usize,
    dim: usize,
}

impl DescriptorMatrix {
    pub fn new(data: Vec<f64>, n_patches: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InconsistentDim("descriptor dim must be >= 1".into()));
        }
        if data.len() != n_patches * dim {
            return Err(Error::InconsistentDim(format!(
                "descriptor buffer has {} values, expected {}x{}",
                data.len(),
                n_patches,
                dim
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!(
                "descriptor row {} col {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self {
            data,
            n_patches,
            dim,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InconsistentDim("ragged descriptor rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Copies a contiguous range of patches.
    pub fn slice_rows(&self, range: Range<usize>) -> DescriptorMatrix {
        DescriptorMatrix {
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            n_patches: range.len(),
            dim: self.dim,
        }
    }

    /// Gathers arbitrary patches in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> DescriptorMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DescriptorMatrix {
            data,
            n_patches: indices.len(),
            dim: self.dim,
        }
    }

    /// Stacks two matrices with the same dimension.
    pub fn vstack(&self, other: &DescriptorMatrix) -> Result<DescriptorMatrix> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(DescriptorMatrix {
            data,
            n_patches: self.n_patches + other.n_patches,
            dim: self.dim,
        })
    }
}

/// N×K per-patch semantic probabilities, one distribution per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    data: Vec<f64>,
    n_patches: usize,
    n_classes: usize,
}

impl ProbabilityMatrix {
    /// Builds a matrix whose rows already satisfy the distribution invariant.
    pub fn new(data: Vec<f64>, n_patches: usize, n_classes: usize) -> Result<Self> {
        let m = Self::from_raw(data, n_patches, n_classes)?;
        for (i, row) in m.rows().enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::DegenerateRow {
                    row: i,
                    reason: "negative entry".into(),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::DegenerateRow {
                    row: i,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(m)
    }

    /// Shape and finiteness checks only. Rows still need [`ProbabilityMatrix::renormalize`]
    /// (or [`validate_bundle`]) before use as distributions.
    pub fn from_raw(data: Vec<f64>, n_patches: usize, n_classes: usize) -> Result<Self> {
        if data.len() != n_patches * n_classes {
            return Err(Error::InconsistentDim(format!(
                "probability buffer has {} values, expected {}x{}",
                data.len(),
                n_patches,
                n_classes
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!(
                "probability row {} col {}",
                i / n_classes.max(1),
                i % n_classes.max(1)
            )));
        }
        Ok(Self {
            data,
            n_patches,
            n_classes,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InconsistentDim("ragged probability rows".into()));
        }
        Self::new(rows.concat(), rows.len(), k)
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on 0; a K=0 matrix has no row content.
        self.data
            .chunks_exact(self.n_classes.max(1))
            .take(if self.n_classes == 0 { 0 } else { self.n_patches })
    }

    pub fn slice_rows(&self, range: Range<usize>) -> ProbabilityMatrix {
        ProbabilityMatrix {
            data: self.data[range.start * self.n_classes..range.end * self.n_classes].to_vec(),
            n_patches: range.len(),
            n_classes: self.n_classes,
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> ProbabilityMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.n_classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        ProbabilityMatrix {
            data,
            n_patches: indices.len(),
            n_classes: self.n_classes,
        }
    }

    /// Keeps only the given columns, without renormalizing the rows.
    pub fn select_columns(&self, columns: &[usize]) -> ProbabilityMatrix {
        let mut data = Vec::with_capacity(self.n_patches * columns.len());
        for row in self.rows() {
            data.extend(columns.iter().map(|&c| row[c]));
        }
        ProbabilityMatrix {
            data,
            n_patches: self.n_patches,
            n_classes: columns.len(),
        }
    }

    pub fn vstack(&self, other: &ProbabilityMatrix) -> Result<ProbabilityMatrix> {
        if self.n_classes != other.n_classes {
            return Err(Error::DimMismatch {
                expected: self.n_classes,
                actual: other.n_classes,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(ProbabilityMatrix {
            data,
            n_patches: self.n_patches + other.n_patches,
            n_classes: self.n_classes,
        })
    }

    /// Clamps tiny negatives, divides drifting rows by their sum and rejects broken rows.
    /// Returns the indices of rows whose drift exceeded rounding noise.
    pub fn renormalize(mut self) -> Result<(ProbabilityMatrix, Vec<usize>)> {
        let k = self.n_classes;
        let mut touched = Vec::new();
        if k == 0 {
            return Ok((self, touched));
        }
        for (i, row) in self.data.chunks_exact_mut(k).enumerate() {
            if let Some(&p) = row.iter().find(|&&p| p < NEGATIVE_SLACK) {
                return Err(Error::DegenerateRow {
                    row: i,
                    reason: format!("entry {p} is negative"),
                });
            }
            for p in row.iter_mut() {
                if *p < 0.0 {
                    *p = 0.0;
                }
            }
            let sum: f64 = row.iter().sum();
            if !(RENORMALIZE_BAND.0..=RENORMALIZE_BAND.1).contains(&sum) {
                return Err(Error::DegenerateRow {
                    row: i,
                    reason: format!("row sums to {sum}"),
                });
            }
            if sum != 1.0 {
                row.iter_mut().for_each(|p| *p /= sum);
                if (sum - 1.0).abs() > FLAG_DRIFT {
                    touched.push(i);
                }
            }
        }
        Ok((self, touched))
    }
}

/// Groups the patch axis into images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchManifest {
    image_ids: Vec<String>,
    ranges: Vec<Range<usize>>,
    labels: Vec<Option<usize>>,
}

impl PatchManifest {
    /// Ranges must be sorted, disjoint and contiguous from 0; empty ranges are allowed.
    pub fn new(
        image_ids: Vec<String>,
        ranges: Vec<Range<usize>>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        if image_ids.len() != ranges.len() || labels.len() != ranges.len() {
            return Err(Error::InvalidManifest(
                "ids, ranges and labels must have equal length".into(),
            ));
        }
        let mut expected_start = 0;
        for (id, r) in image_ids.iter().zip(&ranges) {
            if r.start != expected_start {
                return Err(Error::InvalidManifest(format!(
                    "image {id} starts at {} but previous coverage ends at {expected_start}",
                    r.start
                )));
            }
            if r.end < r.start {
                return Err(Error::InvalidManifest(format!("image {id} has end < start")));
            }
            expected_start = r.end;
        }
        Ok(Self {
            image_ids,
            ranges,
            labels,
        })
    }

    /// One image per row, as used for feature files.
    pub fn one_per_row(image_ids: Vec<String>, labels: Vec<Option<usize>>) -> Result<Self> {
        let ranges = (0..image_ids.len()).map(|i| i..i + 1).collect();
        Self::new(image_ids, ranges, labels)
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Total patches covered.
    pub fn coverage(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// All labels, or `MissingLabels` if any image is unlabeled.
    pub fn required_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.ok_or(Error::MissingLabels))
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |&m| m + 1)
    }

    /// Keeps the listed images, re-packing their patch ranges contiguously.
    pub fn subset(&self, images: &[usize]) -> PatchManifest {
        let mut start = 0;
        let mut ranges = Vec::with_capacity(images.len());
        for &i in images {
            let len = self.ranges[i].len();
            ranges.push(start..start + len);
            start += len;
        }
        PatchManifest {
            image_ids: images.iter().map(|&i| self.image_ids[i].clone()).collect(),
            ranges,
            labels: images.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Patch indices of the listed images, in order.
    pub fn patch_indices(&self, images: &[usize]) -> Vec<usize> {
        images
            .iter()
            .flat_map(|&i| self.ranges[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Vsad,
    Fv,
    Vlad,
    Avgpool,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Vsad => "vsad",
            Layout::Fv => "fv",
            Layout::Vlad => "vlad",
            Layout::Avgpool => "avgpool",
        }
    }

    /// Expected vector length for `k` blocks of dimension `d`.
    pub fn expected_len(self, k: usize, d: usize) -> usize {
        match self {
            Layout::Vsad | Layout::Fv => 2 * k * d,
            Layout::Vlad => k * d,
            Layout::Avgpool => d,
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsad" => Ok(Layout::Vsad),
            "fv" => Ok(Layout::Fv),
            "vlad" => Ok(Layout::Vlad),
            "avgpool" => Ok(Layout::Avgpool),
            other => Err(Error::Parse(format!("unknown encoding method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An image-level representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub data: Vec<f64>,
    pub layout: Layout,
    /// `(K, D)`; for average pooling K is 1.
    pub block_dims: (usize, usize),
    pub normalized: bool,
}

impl EncodedVector {
    pub fn new(data: Vec<f64>, layout: Layout, block_dims: (usize, usize)) -> Result<Self> {
        let expected = layout.expected_len(block_dims.0, block_dims.1);
        if data.len() != expected {
            return Err(Error::InconsistentDim(format!(
                "{layout} vector has length {}, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            layout,
            block_dims,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Splits a vsad/fv vector back into `(S_k, G_k)` blocks.
    pub fn blocks(&self) -> Result<Vec<(&[f64], &[f64])>> {
        if !matches!(self.layout, Layout::Vsad | Layout::Fv) {
            return Err(Error::InconsistentDim(format!(
                "{} vectors have no (S, G) blocks",
                self.layout
            )));
        }
        let d = self.block_dims.1;
        Ok(self
            .data
            .chunks_exact(2 * d)
            .map(|b| b.split_at(d))
            .collect())
    }
}

/// Elementwise `sign(x) * sqrt(|x|)`.
pub fn signed_sqrt(x: f64) -> f64 {
    x.signum() * x.abs().sqrt()
}

/// Signed square root followed by a single global L2 normalization.
pub fn normalize(v: &EncodedVector) -> Result<EncodedVector> {
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("encoded vector"));
    }
    let mut data: Vec<f64> = v
        .data
        .iter()
        .map(|&x| if x == 0.0 { 0.0 } else { signed_sqrt(x) })
        .collect();
    let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        data.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(EncodedVector {
        data,
        layout: v.layout,
        block_dims: v.block_dims,
        normalized: true,
    })
}

/// Lays blocks out as `S_1 | G_1 | S_2 | G_2 | ... | S_K | G_K`.
pub fn concat_blocks<S, G>(blocks: &[(S, G)]) -> Result<EncodedVector>
where
    S: AsRef<[f64]>,
    G: AsRef<[f64]>,
{
    let Some((first, _)) = blocks.first() else {
        return Err(Error::InconsistentDim("no blocks to concatenate".into()));
    };
    let d = first.as_ref().len();
    if d == 0 {
        return Err(Error::InconsistentDim("blocks have zero width".into()));
    }
    let mut data = Vec::with_capacity(2 * d * blocks.len());
    for (k, (s, g)) in blocks.iter().enumerate() {
        let (s, g) = (s.as_ref(), g.as_ref());
        if s.len() != d || g.len() != d {
            return Err(Error::InconsistentDim(format!(
                "block {k} has widths ({}, {}), expected {d}",
                s.len(),
                g.len()
            )));
        }
        data.extend_from_slice(s);
        data.extend_from_slice(g);
    }
    EncodedVector::new(data, Layout::Vsad, (blocks.len(), d))
}

/// Outcome of [`validate_bundle`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n_patches: usize,
    pub n_images: usize,
    /// Rows divided by their sum on ingest.
    pub renormalized_rows: Vec<usize>,
    /// Largest `|row sum - 1|` before renormalization.
    pub max_row_drift: f64,
    /// The probability matrix after renormalization.
    pub probabilities: ProbabilityMatrix,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.renormalized_rows.is_empty()
    }
}

/// Checks that descriptors, probabilities and manifest agree and repairs
/// probability rows with small sum drift.
pub fn validate_bundle(
    desc: &DescriptorMatrix,
    prob: &ProbabilityMatrix,
    manifest: &PatchManifest,
) -> Result<ValidationReport> {
    let n = desc.n_patches();
    if prob.n_patches() != n || manifest.coverage() != n {
        return Err(Error::MismatchedRows {
            what: format!(
                "descriptors have {n} rows, probabilities {}, manifest covers {}",
                prob.n_patches(),
                manifest.coverage()
            ),
        });
    }
    if desc.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("descriptors"));
    }
    if prob.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("probabilities"));
    }
    let max_row_drift = prob
        .rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let (probabilities, renormalized_rows) = prob.clone().renormalize()?;
    Ok(ValidationReport {
        n_patches: n,
        n_images: manifest.len(),
        renormalized_rows,
        max_row_drift,
        probabilities,
    })
}
