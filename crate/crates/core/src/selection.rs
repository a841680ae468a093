//! Scene-object response aggregation and discriminative codeword selection.

use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{PatchManifest, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::util::{self, rank_descending};

/// Object responses summed per image, per category and over the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub n_images: usize,
    pub n_categories: usize,
    pub n_classes: usize,
    /// `I×V`: sum of the image's patch rows.
    pub per_image: Vec<f64>,
    /// `C×V`: sum of the category's image rows.
    pub per_category: Vec<f64>,
    /// `V`: sum of the category rows.
    pub global: Vec<f64>,
}

impl ResponseTable {
    pub fn image(&self, i: usize) -> &[f64] {
        &self.per_image[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn category(&self, c: usize) -> &[f64] {
        &self.per_category[c * self.n_classes..(c + 1) * self.n_classes]
    }

    /// Builds a table directly from category responses (single image per category).
    pub fn from_category_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(Error::InconsistentDim("ragged response rows".into()));
        }
        let per_category = rows.concat();
        let mut global = vec![0.0; v];
        for r in rows {
            util::add_assign(&mut global, r);
        }
        Ok(Self {
            n_images: rows.len(),
            n_categories: rows.len(),
            n_classes: v,
            per_image: per_category.clone(),
            per_category,
            global,
        })
    }
}

pub fn aggregate_responses(prob: &ProbabilityMatrix, manifest: &PatchManifest) -> Result<ResponseTable> {
    let labels = manifest.required_labels()?;
    if manifest.coverage() != prob.n_patches() {
        return Err(Error::MismatchedRows {
            what: format!(
                "manifest covers {} patches, probabilities have {}",
                manifest.coverage(),
                prob.n_patches()
            ),
        });
    }
    let v = prob.n_classes();
    let n_images = manifest.len();
    let n_categories = manifest.n_classes();

    let mut per_image = vec![0.0; n_images * v];
    for (i, range) in manifest.ranges().iter().enumerate() {
        let row = &mut per_image[i * v..(i + 1) * v];
        for t in range.clone() {
            util::add_assign(row, prob.row(t));
        }
    }
    let mut per_category = vec![0.0; n_categories * v];
    for (i, &c) in labels.iter().enumerate() {
        let (dst, src) = (c * v..(c + 1) * v, &per_image[i * v..(i + 1) * v]);
        util::add_assign(&mut per_category[dst], src);
    }
    let mut global = vec![0.0; v];
    for c in 0..n_categories {
        util::add_assign(&mut global, &per_category[c * v..(c + 1) * v]);
    }
    Ok(ResponseTable {
        n_images,
        n_categories,
        n_classes: v,
        per_image,
        per_category,
        global,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Chosen class indices, ascending.
    pub selected: Vec<usize>,
    /// Per-category depth at which the intersection first reached K.
    pub t_final: usize,
    /// Top-2K classes by dataset response, in rank order.
    pub o_data: Vec<usize>,
    /// Union of every category's top-`t_final` classes, ascending.
    pub o_category: Vec<usize>,
}

/// Intersects the dataset-level top-2K with a growing union of per-category
/// top-T lists, stopping at the first T that yields at least K classes.
/// Overshoot is trimmed by dataset response rank. Ties: lower index first.
pub fn select_codewords(table: &ResponseTable, k: usize) -> Result<SelectionResult> {
    let v = table.n_classes;
    if k == 0 || 2 * k > v {
        return Err(Error::KTooLarge { k, classes: v });
    }
    let data_rank = rank_descending(&table.global);
    let o_data: Vec<usize> = data_rank[..2 * k].to_vec();
    let in_data: BTreeSet<usize> = o_data.iter().copied().collect();
    let category_ranks: Vec<Vec<usize>> = (0..table.n_categories)
        .map(|c| rank_descending(table.category(c)))
        .collect();

    let mut o_category = BTreeSet::new();
    for t in 1..=v {
        for rank in &category_ranks {
            o_category.insert(rank[t - 1]);
        }
        let hits: BTreeSet<usize> = o_category.intersection(&in_data).copied().collect();
        if hits.len() >= k {
            let mut selected: Vec<usize> = if hits.len() == k {
                hits.into_iter().collect()
            } else {
                data_rank
                    .iter()
                    .copied()
                    .filter(|c| hits.contains(c))
                    .take(k)
                    .collect()
            };
            selected.sort_unstable();
            return Ok(SelectionResult {
                selected,
                t_final: t,
                o_data,
                o_category: o_category.into_iter().collect(),
            });
        }
    }
    // t = v puts every class in o_category, so the intersection is all of o_data.
    unreachable!("selection loop always terminates by t = V")
}

/// K distinct classes drawn uniformly at random, ascending.
pub fn random_selection(n_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n_classes {
        return Err(Error::KTooLarge { k, classes: n_classes });
    }
    let mut rng = util::stream(seed, &[0x5e1ec7]);
    let mut out = index::sample(&mut rng, n_classes, k).into_vec();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn worked_table() -> ResponseTable {
        let prob = ProbabilityMatrix::new(
            vec![0.6, 0.3, 0.1, 0.0, 0.0, 0.3, 0.1, 0.6],
            2,
            4,
        )
        .unwrap();
        let manifest = PatchManifest::new(
            vec!["a".into(), "b".into()],
            vec![0..1, 1..2],
            vec![Some(0), Some(1)],
        )
        .unwrap();
        aggregate_responses(&prob, &manifest).unwrap()
    }

    #[test]
    fn worked_responses() {
        let t = worked_table();
        let expected = [0.6, 0.6, 0.2, 0.6];
        for (a, b) in t.global.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_selection() {
        let r = select_codewords(&worked_table(), 2).unwrap();
        assert_eq!(r.o_data, vec![0, 1, 3, 2]);
        assert_eq!(r.t_final, 1);
        assert_eq!(r.selected, vec![0, 3]);
    }

    #[test]
    fn nesting_collapses_for_one_image() {
        let prob = ProbabilityMatrix::new(vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8], 2, 3).unwrap();
        let manifest = PatchManifest::new(vec!["x".into()], vec![0..2], vec![Some(0)]).unwrap();
        let t = aggregate_responses(&prob, &manifest).unwrap();
        assert_eq!(t.per_image, t.per_category);
        assert_eq!(t.per_category, t.global);
        assert!((t.global.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_category_takes_its_top_k() {
        let t = ResponseTable::from_category_rows(&[vec![0.1, 0.4, 0.05, 0.3, 0.15]]).unwrap();
        assert_eq!(select_codewords(&t, 2).unwrap().selected, vec![1, 3]);
    }

    #[test]
    fn all_ties_pick_lowest_indices() {
        let t = ResponseTable::from_category_rows(&[vec![1.0; 6], vec![1.0; 6]]).unwrap();
        let a = select_codewords(&t, 2).unwrap();
        assert_eq!(a.o_data, vec![0, 1, 2, 3]);
        // T=1 gives {0}; T=2 gives {0, 1}
        assert_eq!(a.selected, vec![0, 1]);
        assert_eq!(a, select_codewords(&t, 2).unwrap());
    }

    #[test]
    fn errors() {
        let t = worked_table();
        assert!(matches!(select_codewords(&t, 3), Err(Error::KTooLarge { .. })));
        assert!(matches!(select_codewords(&t, 0), Err(Error::KTooLarge { .. })));
        let prob = ProbabilityMatrix::new(vec![1.0], 1, 1).unwrap();
        let m = PatchManifest::new(vec!["a".into()], vec![0..1], vec![None]).unwrap();
        assert!(matches!(aggregate_responses(&prob, &m), Err(Error::MissingLabels)));
    }

    #[test]
    fn random_baseline_is_seeded() {
        let a = random_selection(50, 5, 3).unwrap();
        assert_eq!(a, random_selection(50, 5, 3).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(random_selection(4, 5, 0).is_err());
    }

    fn table_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..6, 2usize..30).prop_flat_map(|(c, v)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..5, v), c)
                    .prop_map(|rows| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect()),
                1usize..=v / 2,
            )
        })
    }

    proptest! {
        #[test]
        fn selection_properties((rows, k) in table_strategy()) {
            let t = ResponseTable::from_category_rows(&rows).unwrap();
            let r = select_codewords(&t, k).unwrap();
            prop_assert_eq!(r.selected.len(), k);
            prop_assert!(r.selected.windows(2).all(|w| w[0] < w[1]));
            for c in &r.selected {
                prop_assert!(r.o_data.contains(c));
                prop_assert!(r.o_category.contains(c));
            }
            // category order does not matter
            let mut rev = rows.clone();
            rev.reverse();
            let r2 = select_codewords(&ResponseTable::from_category_rows(&rev).unwrap(), k).unwrap();
            prop_assert_eq!(&r.selected, &r2.selected);
        }
    }
}
