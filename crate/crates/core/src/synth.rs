//! Planted generative model that stands in for the descriptor and probability
//! networks.
//!
//! Each category is a mixture over objects; each object is an isotropic Gaussian
//! in descriptor space. A patch of category `c` draws an object `v` from
//! `category_mixtures[c]`, then `f ~ N(object_means[v], σ²I)`. Its probability
//! row is the exact object posterior under the category-uniform global mixture,
//! tempered by `1/temperature`.
//!
//! Randomness: patch `t` of image `i` in category `c` draws from its own
//! ChaCha8 stream seeded with `stream_seed(seed, [c, i, t])`, so values do not
//! depend on generation order or on how images are split across threads.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DescriptorMatrix, PatchManifest, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::util::{self, log_sum_exp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub n_categories: usize,
    pub n_objects: usize,
    pub descriptor_dim: usize,
    /// `V×D` row-major.
    pub object_means: Vec<f64>,
    pub object_stddev: f64,
    /// `C×V` row-major, rows sum to one.
    pub category_mixtures: Vec<f64>,
    pub temperature: f64,
    pub seed: u64,
}

impl PlantedModel {
    pub fn validate(&self) -> Result<()> {
        let (c, v, d) = (self.n_categories, self.n_objects, self.descriptor_dim);
        if c == 0 || v == 0 || d == 0 {
            return Err(Error::InvalidModel("counts must be >= 1".into()));
        }
        if self.object_means.len() != v * d || self.category_mixtures.len() != c * v {
            return Err(Error::InvalidModel("parameter shapes do not match counts".into()));
        }
        if self.object_means.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("non-finite object mean".into()));
        }
        if !(self.object_stddev > 0.0 && self.object_stddev.is_finite()) {
            return Err(Error::InvalidModel("object stddev must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidModel("temperature must be positive".into()));
        }
        for (i, row) in self.category_mixtures.chunks_exact(v).enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::InvalidModel(format!("mixture row {i} has a bad weight")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("mixture row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn mean(&self, v: usize) -> &[f64] {
        &self.object_means[v * self.descriptor_dim..(v + 1) * self.descriptor_dim]
    }

    pub fn mixture(&self, c: usize) -> &[f64] {
        &self.category_mixtures[c * self.n_objects..(c + 1) * self.n_objects]
    }

    /// Object prior seen by the posterior: mixtures averaged over categories.
    pub fn global_mixture(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_objects];
        for c in 0..self.n_categories {
            util::add_assign(&mut g, self.mixture(c));
        }
        g.iter_mut().for_each(|x| *x /= self.n_categories as f64);
        g
    }

    /// Draws one patch: `(object, descriptor)`.
    pub fn draw_patch(&self, category: usize, image: usize, patch: usize) -> (usize, Vec<f64>) {
        let mut rng = util::stream(self.seed, &[category as u64, image as u64, patch as u64]);
        let u: f64 = rng.random();
        let mix = self.mixture(category);
        let mut acc = 0.0;
        let mut object = mix.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (v, &w) in mix.iter().enumerate() {
            acc += w;
            if u < acc && w > 0.0 {
                object = v;
                break;
            }
        }
        let f = self
            .mean(object)
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + self.object_stddev * z
            })
            .collect();
        (object, f)
    }
}

/// Softmax over objects of `[log g(v) − ‖f − m_v‖² / (2σ²)] / temperature`.
pub fn posterior(model: &PlantedModel, f: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    if f.len() != model.descriptor_dim {
        return Err(Error::DimMismatch {
            expected: model.descriptor_dim,
            actual: f.len(),
        });
    }
    Ok(posterior_with(model, &model.global_mixture(), f))
}

fn posterior_with(model: &PlantedModel, global: &[f64], f: &[f64]) -> Vec<f64> {
    let two_var = 2.0 * model.object_stddev * model.object_stddev;
    let logits: Vec<f64> = (0..model.n_objects)
        .map(|v| {
            if global[v] <= 0.0 {
                return f64::NEG_INFINITY;
            }
            (global[v].ln() - util::squared_distance(f, model.mean(v)) / two_var) / model.temperature
        })
        .collect();
    let lse = log_sum_exp(&logits);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Output of [`generate`], plus the planted object of every patch.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub descriptors: DescriptorMatrix,
    pub probabilities: ProbabilityMatrix,
    pub manifest: PatchManifest,
    pub objects: Vec<usize>,
}

/// Image ids are `c{category}_i{image}`; images are ordered category-major.
pub fn generate(
    model: &PlantedModel,
    images_per_category: usize,
    patches_per_image: usize,
) -> Result<SyntheticBundle> {
    model.validate()?;
    if images_per_category == 0 || patches_per_image == 0 {
        return Err(Error::InvalidModel("image and patch counts must be >= 1".into()));
    }
    let (c_count, v, d) = (model.n_categories, model.n_objects, model.descriptor_dim);
    let global = model.global_mixture();
    let images: Vec<(usize, usize)> = (0..c_count)
        .flat_map(|c| (0..images_per_category).map(move |i| (c, i)))
        .collect();

    let per_image: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = images
        .par_iter()
        .map(|&(c, i)| {
            let mut desc = Vec::with_capacity(patches_per_image * d);
            let mut prob = Vec::with_capacity(patches_per_image * v);
            let mut objects = Vec::with_capacity(patches_per_image);
            for t in 0..patches_per_image {
                let (obj, f) = model.draw_patch(c, i, t);
                prob.extend(posterior_with(model, &global, &f));
                desc.extend(f);
                objects.push(obj);
            }
            (desc, prob, objects)
        })
        .collect();

    let n = images.len() * patches_per_image;
    let mut desc = Vec::with_capacity(n * d);
    let mut prob = Vec::with_capacity(n * v);
    let mut objects = Vec::with_capacity(n);
    for (dd, pp, oo) in per_image {
        desc.extend(dd);
        prob.extend(pp);
        objects.extend(oo);
    }
    let ids = images.iter().map(|&(c, i)| format!("c{c:03}_i{i:04}")).collect();
    let ranges = (0..images.len())
        .map(|k| k * patches_per_image..(k + 1) * patches_per_image)
        .collect();
    let labels = images.iter().map(|&(c, _)| Some(c)).collect();
    Ok(SyntheticBundle {
        descriptors: DescriptorMatrix::new(desc, n, d)?,
        probabilities: ProbabilityMatrix::new(prob, n, v)?,
        manifest: PatchManifest::new(ids, ranges, labels)?,
        objects,
    })
}

/// Mean Shannon entropy (bits) of posterior rows over a fixed sample of patches.
pub fn mean_posterior_entropy_bits(model: &PlantedModel, images_per_category: usize, patches: usize) -> Result<f64> {
    model.validate()?;
    let global = model.global_mixture();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..model.n_categories {
        for i in 0..images_per_category {
            for t in 0..patches {
                let (_, f) = model.draw_patch(c, i, t);
                let p = posterior_with(model, &global, &f);
                total -= p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.log2()).sum::<f64>();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Finds the object stddev whose posteriors have the requested mean entropy, by
/// bisection in log-space. The sample is fixed, so the result is deterministic.
pub fn calibrate_stddev(model: &PlantedModel, target_bits: f64) -> Result<f64> {
    let max_bits = (model.n_objects as f64).log2();
    if !(target_bits > 0.0 && target_bits < max_bits) {
        return Err(Error::InvalidModel(format!(
            "target entropy {target_bits} bits outside (0, {max_bits})"
        )));
    }
    let entropy_at = |log_sd: f64| -> Result<f64> {
        let m = PlantedModel {
            object_stddev: log_sd.exp(),
            ..model.clone()
        };
        mean_posterior_entropy_bits(&m, 2, 50)
    };
    let (mut lo, mut hi) = ((1e-4f64).ln(), (1e4f64).ln());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if entropy_at(mid)? < target_bits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Mixtures where category `c` spreads `signature_mass` evenly over objects
/// `c·per_category .. (c+1)·per_category` (wrapping mod `V`) and the remaining
/// mass uniformly over all objects.
pub fn signature_mixtures(
    n_categories: usize,
    n_objects: usize,
    per_category: usize,
    signature_mass: f64,
) -> Result<Vec<f64>> {
    if n_objects == 0 || per_category == 0 || per_category > n_objects {
        return Err(Error::InvalidModel(format!(
            "{per_category} signature objects per category out of {n_objects}"
        )));
    }
    if !(0.0..=1.0).contains(&signature_mass) {
        return Err(Error::InvalidModel(format!("signature mass {signature_mass} outside [0, 1]")));
    }
    let background = (1.0 - signature_mass) / n_objects as f64;
    let mut out = vec![background; n_categories * n_objects];
    for c in 0..n_categories {
        for j in 0..per_category {
            out[c * n_objects + (c * per_category + j) % n_objects] += signature_mass / per_category as f64;
        }
    }
    Ok(out)
}

/// Object means with i.i.d. standard normal coordinates.
pub fn random_object_means(n_objects: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::stream(seed, &[u64::MAX, 1]);
    (0..n_objects * dim).map(|_| rng.sample(StandardNormal)).collect()
}
