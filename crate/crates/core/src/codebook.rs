//! Semantic codebook: probability-weighted prior, mean and per-dimension
//! deviation for every semantic class.

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationParams;
use crate::data::{DescriptorMatrix, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::util::{add_assign, chunked_reduce};

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookOptions {
    /// Lower bound on every per-dimension variance.
    pub variance_floor: f64,
    /// Codewords with `mass < activation_threshold * N` are inactive.
    pub activation_threshold: f64,
    /// Accumulate over patch chunks in parallel. Results are bit-identical either way.
    pub parallel: bool,
}

impl Default for CodebookOptions {
    fn default() -> Self {
        Self {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            activation_threshold: DEFAULT_ACTIVATION_THRESHOLD,
            parallel: true,
        }
    }
}

/// Per-codeword prior, mean and deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCodebook {
    pub k: usize,
    pub d: usize,
    pub pi: Vec<f64>,
    /// `K×D` row-major.
    pub mu: Vec<f64>,
    /// `K×D` row-major, already floored.
    pub sigma: Vec<f64>,
    pub mass: Vec<f64>,
    pub active: Vec<bool>,
    pub total_mass: f64,
    pub variance_floor: f64,
    #[serde(default)]
    pub provenance: String,
    /// Original class index of each codeword when the codebook is a restriction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_ids: Option<Vec<usize>>,
}

/// Unfloored weighted moments of a population.
#[derive(Debug, Clone)]
pub struct WeightedMoments {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub mass: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Computes `N_k = Σ p_i^k`, `μ_k = Σ p_i^k f_i / N_k` and the diagonal of
/// `Σ_k = Σ p_i^k (f_i − μ_k)(f_i − μ_k)ᵀ / N_k`. Zero-mass codewords get zero moments.
pub fn weighted_moments(
    desc: &DescriptorMatrix,
    prob: &ProbabilityMatrix,
    parallel: bool,
) -> Result<WeightedMoments> {
    let n = desc.n_patches();
    if prob.n_patches() != n {
        return Err(Error::MismatchedRows {
            what: format!("{n} descriptors vs {} probability rows", prob.n_patches()),
        });
    }
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    let (k, d) = (prob.n_classes(), desc.dim());

    let first = chunked_reduce(
        n,
        parallel,
        |rows| {
            let mut mass = vec![0.0; k];
            let mut wsum = vec![0.0; k * d];
            for i in rows {
                let f = desc.row(i);
                for (c, &p) in prob.row(i).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    mass[c] += p;
                    for (acc, &x) in wsum[c * d..(c + 1) * d].iter_mut().zip(f) {
                        *acc += p * x;
                    }
                }
            }
            (mass, wsum)
        },
        |(mut m1, mut s1), (m2, s2)| {
            add_assign(&mut m1, &m2);
            add_assign(&mut s1, &s2);
            (m1, s1)
        },
    )
    .expect("n > 0");
    let (mass, wsum) = first;

    let mut mean = vec![0.0; k * d];
    for c in 0..k {
        if mass[c] > 0.0 {
            for j in 0..d {
                mean[c * d + j] = wsum[c * d + j] / mass[c];
            }
        }
    }

    let mut variance = chunked_reduce(
        n,
        parallel,
        |rows| {
            let mut acc = vec![0.0; k * d];
            for i in rows {
                let f = desc.row(i);
                for (c, &p) in prob.row(i).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mu = &mean[c * d..(c + 1) * d];
                    for j in 0..d {
                        let r = f[j] - mu[j];
                        acc[c * d + j] += p * r * r;
                    }
                }
            }
            acc
        },
        |mut a, b| {
            add_assign(&mut a, &b);
            a
        },
    )
    .expect("n > 0");
    for c in 0..k {
        for j in 0..d {
            variance[c * d + j] = if mass[c] > 0.0 {
                variance[c * d + j] / mass[c]
            } else {
                0.0
            };
        }
    }

    Ok(WeightedMoments {
        k,
        d,
        n,
        mass,
        mean,
        variance,
    })
}

/// Builds the semantic codebook from a descriptor/probability population.
pub fn build_codebook(
    desc: &DescriptorMatrix,
    prob: &ProbabilityMatrix,
    opts: &CodebookOptions,
) -> Result<SemanticCodebook> {
    if !(opts.variance_floor > 0.0) || !(opts.activation_threshold >= 0.0) {
        return Err(Error::Config(
            "variance floor must be > 0 and activation threshold >= 0".into(),
        ));
    }
    let m = weighted_moments(desc, prob, opts.parallel)?;
    let (k, d) = (m.k, m.d);
    let n = m.n as f64;
    let floor_sigma = opts.variance_floor.sqrt();

    let mut mu = m.mean;
    let mut sigma = vec![floor_sigma; k * d];
    let mut active = vec![false; k];
    for c in 0..k {
        if m.mass[c] < opts.activation_threshold * n || m.mass[c] <= 0.0 {
            mu[c * d..(c + 1) * d].fill(0.0);
            continue;
        }
        active[c] = true;
        for j in 0..d {
            sigma[c * d + j] = m.variance[c * d + j].max(opts.variance_floor).sqrt();
        }
    }
    let pi = m.mass.iter().map(|&mk| mk / n).collect();

    Ok(SemanticCodebook {
        k,
        d,
        pi,
        mu,
        sigma,
        mass: m.mass,
        active,
        total_mass: n,
        variance_floor: opts.variance_floor,
        provenance: format!("semantic codebook over {} patches", m.n),
        selected_ids: None,
    })
}

/// How the prior is set when a codebook is restricted to selected codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetPrior {
    /// `π_k = N_k / Σ_{j ∈ selected} N_j`, so the subset prior sums to one.
    #[default]
    Renormalized,
    /// Keep the full-codebook `π_k`.
    Full,
}

impl SemanticCodebook {
    pub fn params(&self) -> AggregationParams<'_> {
        AggregationParams {
            prior: &self.pi,
            mean: &self.mu,
            sigma: &self.sigma,
            active: &self.active,
            k: self.k,
            d: self.d,
        }
    }

    pub fn mu_row(&self, c: usize) -> &[f64] {
        &self.mu[c * self.d..(c + 1) * self.d]
    }

    pub fn sigma_row(&self, c: usize) -> &[f64] {
        &self.sigma[c * self.d..(c + 1) * self.d]
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Original class index of codeword `c`.
    pub fn original_id(&self, c: usize) -> usize {
        self.selected_ids.as_ref().map_or(c, |ids| ids[c])
    }

    /// Keeps the listed codewords (ascending original order).
    ///
    /// Restricting probability columns without renormalizing rows leaves every
    /// `N_k`, `μ_k` and `σ_k` unchanged, so only the prior needs rebuilding.
    pub fn restrict(&self, selected: &[usize], prior: SubsetPrior) -> Result<SemanticCodebook> {
        let mut sel = selected.to_vec();
        sel.sort_unstable();
        sel.dedup();
        if sel.is_empty() {
            return Err(Error::InconsistentDim("empty codeword selection".into()));
        }
        for &c in &sel {
            if c >= self.k {
                return Err(Error::BadCodeword { index: c, k: self.k });
            }
            if !self.active[c] {
                return Err(Error::InactiveSelected(c));
            }
        }
        let d = self.d;
        let mass: Vec<f64> = sel.iter().map(|&c| self.mass[c]).collect();
        let pi = match prior {
            SubsetPrior::Renormalized => {
                let total: f64 = mass.iter().sum();
                mass.iter().map(|m| m / total).collect()
            }
            SubsetPrior::Full => sel.iter().map(|&c| self.pi[c]).collect(),
        };
        let gather = |src: &[f64]| -> Vec<f64> {
            sel.iter()
                .flat_map(|&c| src[c * d..(c + 1) * d].iter().copied())
                .collect()
        };
        Ok(SemanticCodebook {
            k: sel.len(),
            d,
            pi,
            mu: gather(&self.mu),
            sigma: gather(&self.sigma),
            total_mass: mass.iter().sum(),
            mass,
            active: vec![true; sel.len()],
            variance_floor: self.variance_floor,
            provenance: format!("{} (restricted to {} codewords)", self.provenance, sel.len()),
            selected_ids: Some(sel.iter().map(|&c| self.original_id(c)).collect()),
        })
    }

    /// Checks shape, the prior simplex and the sigma floor.
    pub fn check_invariants(&self) -> Result<()> {
        let (k, d) = (self.k, self.d);
        if self.pi.len() != k
            || self.mass.len() != k
            || self.active.len() != k
            || self.mu.len() != k * d
            || self.sigma.len() != k * d
        {
            return Err(Error::InvariantViolation(format!(
                "codebook arrays do not match K={k}, D={d}"
            )));
        }
        if let Some(ids) = &self.selected_ids {
            if ids.len() != k {
                return Err(Error::InvariantViolation(
                    "selected_ids length differs from K".into(),
                ));
            }
        }
        let all = self
            .pi
            .iter()
            .chain(&self.mu)
            .chain(&self.sigma)
            .chain(&self.mass);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::InvariantViolation("non-finite codebook entry".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvariantViolation("variance floor must be > 0".into()));
        }
        let active_sum: f64 = self
            .pi
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(p, _)| p)
            .sum();
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-6 || active_sum > 1.0 + 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "priors sum to {total} ({active_sum} over active codewords)"
            )));
        }
        if self.pi.iter().any(|&p| p < 0.0) {
            return Err(Error::InvariantViolation("negative prior".into()));
        }
        let floor = self.variance_floor.sqrt() * (1.0 - 1e-12);
        if let Some(s) = self.sigma.iter().find(|&&s| s < floor) {
            return Err(Error::InvariantViolation(format!(
                "sigma {s} below floor {}",
                self.variance_floor.sqrt()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn worked_example() -> (DescriptorMatrix, ProbabilityMatrix) {
        let desc = DescriptorMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], 3, 2).unwrap();
        (desc, prob)
    }

    #[test]
    fn worked_codebook() {
        let (desc, prob) = worked_example();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        assert_eq!(cb.mass, vec![1.5, 1.5]);
        assert_eq!(cb.pi, vec![0.5, 0.5]);
        assert!((cb.mu[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((cb.mu[1] - 7.0 / 3.0).abs() < 1e-15);
        assert!((cb.sigma[0] * cb.sigma[0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((cb.sigma[1] * cb.sigma[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((cb.sigma[0] - 0.47140).abs() < 1e-5);
        assert!((cb.sigma[1] - 0.94281).abs() < 1e-5);
        cb.check_invariants().unwrap();
    }

    #[test]
    fn one_hot_rows_give_hard_partition() {
        let desc = DescriptorMatrix::new(vec![1.0, 2.0, 3.0, 10.0, 20.0], 5, 1).unwrap();
        let prob = ProbabilityMatrix::new(
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            5,
            2,
        )
        .unwrap();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        assert_eq!(cb.mu, vec![2.0, 15.0]);
        assert_eq!(cb.pi, vec![0.6, 0.4]);
    }

    #[test]
    fn identical_patches_hit_floor() {
        let desc = DescriptorMatrix::new(vec![4.2; 6], 3, 2).unwrap();
        let prob =
            ProbabilityMatrix::new(vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1], 3, 2).unwrap();
        let opts = CodebookOptions::default();
        let cb = build_codebook(&desc, &prob, &opts).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                assert!((cb.mu[c * 2 + j] - 4.2).abs() < 1e-14);
                assert_eq!(cb.sigma[c * 2 + j], opts.variance_floor.sqrt());
            }
        }
    }

    #[test]
    fn unused_class_is_inactive() {
        let desc = DescriptorMatrix::new(vec![1.0, 2.0], 2, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![1.0, 0.0, 1.0, 0.0], 2, 2).unwrap();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        assert_eq!(cb.active, vec![true, false]);
        assert_eq!(cb.mu[1], 0.0);
        assert_eq!(cb.sigma[1], DEFAULT_VARIANCE_FLOOR.sqrt());
        assert!(matches!(
            cb.restrict(&[1], SubsetPrior::Renormalized),
            Err(Error::InactiveSelected(1))
        ));
    }

    #[test]
    fn empty_population_rejected() {
        let desc = DescriptorMatrix::new(vec![], 0, 1).unwrap();
        let prob = ProbabilityMatrix::new(vec![], 0, 2).unwrap();
        assert!(matches!(
            build_codebook(&desc, &prob, &CodebookOptions::default()),
            Err(Error::EmptyPopulation)
        ));
        let (d, _) = worked_example();
        let p = ProbabilityMatrix::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(
            build_codebook(&d, &p, &CodebookOptions::default()),
            Err(Error::MismatchedRows { .. })
        ));
    }

    #[test]
    fn restriction_renormalizes_prior() {
        let (desc, prob) = worked_example();
        let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        let r = cb.restrict(&[1], SubsetPrior::Renormalized).unwrap();
        assert_eq!(r.pi, vec![1.0]);
        assert_eq!(r.mu, vec![cb.mu[1]]);
        assert_eq!(r.selected_ids, Some(vec![1]));
        let f = cb.restrict(&[1], SubsetPrior::Full).unwrap();
        assert_eq!(f.pi, vec![0.5]);
    }

    fn population(n: usize, k: usize, d: usize, seed: u64) -> (DescriptorMatrix, ProbabilityMatrix) {
        use rand::Rng as _;
        let mut rng = crate::util::stream(seed, &[]);
        let desc: Vec<f64> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut prob = Vec::with_capacity(n * k);
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
            let s: f64 = row.iter().sum();
            prob.extend(row.iter().map(|p| p / s));
        }
        (
            DescriptorMatrix::new(desc, n, d).unwrap(),
            ProbabilityMatrix::new(prob, n, k).unwrap(),
        )
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let (desc, prob) = population(5000, 7, 3, 11);
        let par = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
        let seq = build_codebook(
            &desc,
            &prob,
            &CodebookOptions {
                parallel: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(par, seq);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conservation_laws(n in 1usize..300, k in 1usize..8, d in 1usize..4, seed in any::<u64>()) {
            let (desc, prob) = population(n, k, d, seed);
            let cb = build_codebook(&desc, &prob, &CodebookOptions::default()).unwrap();
            let pi_sum: f64 = cb.pi.iter().sum();
            prop_assert!((pi_sum - 1.0).abs() <= 1e-9);
            let mass_sum: f64 = cb.mass.iter().sum();
            prop_assert!((mass_sum - n as f64).abs() <= 1e-6 * n as f64);
            for j in 0..d {
                let lhs: f64 = (0..k).map(|c| cb.mass[c] * cb.mu[c * d + j]).sum();
                let rhs: f64 = desc.rows().map(|f| f[j]).sum();
                prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1.0));
            }
        }

        #[test]
        fn law_of_total_variance(n in 2usize..300, k in 1usize..8, seed in any::<u64>()) {
            let (desc, prob) = population(n, k, 1, seed);
            let m = weighted_moments(&desc, &prob, false).unwrap();
            let lhs: f64 = (0..k)
                .map(|c| m.mass[c] / n as f64 * (m.variance[c] + m.mean[c] * m.mean[c]))
                .sum();
            let rhs = desc.as_slice().iter().map(|f| f * f).sum::<f64>() / n as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1e-12));
        }
    }
}
