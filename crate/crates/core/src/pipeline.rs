//! Config-driven experiment runner: input → optional PCA → dictionary →
//! codeword selection → encoding → one-vs-all SVM → evaluation.
//!
//! Expensive stages (PCA, dictionaries, selection, encodings) are cached under
//! `output_dir/cache`, keyed by a hash of the stage name, the input data and
//! the config subsection the stage reads. Cached values are stored losslessly,
//! so a cache hit gives the same bits as a recomputation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{
    avgpool_encode, fv_encode, gmm_fit, kmeans_fit, pca_fit, vlad_encode, DiagonalGmm, GmmOptions,
    KMeansCodebook, KMeansOptions, PcaModel, PcaOptions,
};
use crate::classifier::{evaluate, svm_train, EvalReport, LinearOvaModel, SvmOptions};
use crate::codebook::{
    build_codebook, CodebookOptions, SemanticCodebook, SubsetPrior, DEFAULT_ACTIVATION_THRESHOLD,
    DEFAULT_VARIANCE_FLOOR,
};
use crate::data::{
    validate_bundle, DescriptorMatrix, EncodedVector, Layout, PatchManifest, ProbabilityMatrix,
};
use crate::error::{Error, Result, StageContext};
use crate::io;
use crate::sampler::{self, DEFAULT_GRID, DEFAULT_IMAGE_SIDE, DEFAULT_SCALES};
use crate::selection::{aggregate_responses, random_selection, select_codewords};
use crate::synth::{self, PlantedModel};
use crate::vsad::{VsadConfig, VsadEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub classifier: SvmOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    Synth(SynthConfig),
    Bundle(BundleInput),
}

/// Planted benchmark: category `c` puts `signature_mass` on its own
/// `signature_objects` objects and spreads the rest over all objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: usize,
    pub objects: usize,
    pub dim: usize,
    /// Fixed object stddev; when absent it is calibrated to `target_entropy_bits`.
    pub stddev: Option<f64>,
    pub target_entropy_bits: f64,
    pub temperature: f64,
    pub signature_objects: usize,
    pub signature_mass: f64,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub patches_per_image: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            categories: 10,
            objects: 50,
            dim: 16,
            stddev: None,
            target_entropy_bits: 2.0,
            temperature: 2.0,
            signature_objects: 5,
            signature_mass: 0.2,
            train_per_category: 40,
            test_per_category: 20,
            patches_per_image: 100,
            seed: 7,
        }
    }
}

/// Pre-extracted patches. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleInput {
    pub train_bundle: PathBuf,
    pub train_manifest: PathBuf,
    pub test_bundle: PathBuf,
    pub test_manifest: PathBuf,
}

/// Patch geometry. Recorded in the report; the patch content itself comes
/// from the input source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub image_side: u32,
    pub scales: Vec<u32>,
    pub grid: u32,
    pub flips: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            image_side: DEFAULT_IMAGE_SIDE,
            scales: DEFAULT_SCALES.to_vec(),
            grid: DEFAULT_GRID,
            flips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub method: Layout,
    /// Dictionary size for FV and VLAD. VSAD's dictionary is the class set.
    pub codebook_size: usize,
    pub pca_dim: Option<usize>,
    pub pca_whiten: bool,
    /// At most this many training patches (even stride) fit k-means, GMM and PCA.
    pub fit_sample: usize,
    pub seed: u64,
    pub variance_floor: f64,
    pub activation_threshold: f64,
    pub subset_prior: SubsetPrior,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            method: Layout::Vsad,
            codebook_size: 50,
            pca_dim: None,
            pca_whiten: false,
            fit_sample: 10_000,
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            activation_threshold: DEFAULT_ACTIVATION_THRESHOLD,
            subset_prior: SubsetPrior::Renormalized,
        }
    }
}

/// Codeword selection for VSAD; other methods ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: Option<usize>,
    /// Draw `k` classes uniformly instead of running the selection rule.
    pub random: bool,
    pub seed: u64,
}

impl PipelineConfig {
    /// Reference operating points at synthetic scale: 9 scales on a 10×10
    /// grid with flips, VSAD, SVM with C = 1. The 256-codeword selection needs
    /// at least 512 classes, so it stays off for the 50-object benchmark.
    pub fn paper_defaults(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            input: InputConfig::Synth(SynthConfig::default()),
            sampling: SamplingConfig::default(),
            encoder: EncoderConfig::default(),
            selection: SelectionConfig::default(),
            classifier: SvmOptions::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file and resolves its relative paths against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let InputConfig::Bundle(b) = &mut cfg.input {
            resolve(&mut b.train_bundle);
            resolve(&mut b.train_manifest);
            resolve(&mut b.test_bundle);
            resolve(&mut b.test_manifest);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.codebook_size == 0 {
            return Err(Error::Config("encoder.codebook_size must be >= 1".into()));
        }
        if e.fit_sample == 0 {
            return Err(Error::Config("encoder.fit_sample must be >= 1".into()));
        }
        if e.pca_dim == Some(0) {
            return Err(Error::Config("encoder.pca_dim must be >= 1".into()));
        }
        if self.selection.k == Some(0) {
            return Err(Error::Config("selection.k must be >= 1".into()));
        }
        if let InputConfig::Synth(s) = &self.input {
            if s.train_per_category == 0 || s.test_per_category == 0 {
                return Err(Error::Config("synth needs train and test images per category".into()));
            }
        }
        Ok(())
    }
}

/// Patches of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub desc: DescriptorMatrix,
    pub prob: ProbabilityMatrix,
    pub manifest: PatchManifest,
}

impl Split {
    fn labels(&self) -> Result<Vec<usize>> {
        self.manifest.required_labels()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// Set for synthetic input.
    pub planted: Option<PlantedModel>,
}

/// The planted model a synth config describes, with the stddev calibrated if unset.
pub fn planted_model(s: &SynthConfig) -> Result<PlantedModel> {
    let mut model = PlantedModel {
        n_categories: s.categories,
        n_objects: s.objects,
        descriptor_dim: s.dim,
        object_means: synth::random_object_means(s.objects, s.dim, s.seed),
        object_stddev: s.stddev.unwrap_or(1.0),
        category_mixtures: synth::signature_mixtures(
            s.categories,
            s.objects,
            s.signature_objects,
            s.signature_mass,
        )?,
        temperature: s.temperature,
        seed: s.seed,
    };
    model.validate()?;
    if s.stddev.is_none() {
        model.object_stddev = synth::calibrate_stddev(&model, s.target_entropy_bits)?;
    }
    Ok(model)
}

fn split_of(desc: &DescriptorMatrix, prob: &ProbabilityMatrix, manifest: &PatchManifest, images: &[usize]) -> Split {
    let rows = manifest.patch_indices(images);
    Split {
        desc: desc.select_rows(&rows),
        prob: prob.select_rows(&rows),
        manifest: manifest.subset(images),
    }
}

pub fn load_dataset(input: &InputConfig) -> Result<Dataset> {
    match input {
        InputConfig::Synth(s) => {
            let model = planted_model(s)?;
            let per_cat = s.train_per_category + s.test_per_category;
            let bundle = synth::generate(&model, per_cat, s.patches_per_image)?;
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..bundle.manifest.len()).partition(|i| i % per_cat < s.train_per_category);
            let (d, p, m) = (&bundle.descriptors, &bundle.probabilities, &bundle.manifest);
            Ok(Dataset {
                train: split_of(d, p, m, &train),
                test: split_of(d, p, m, &test),
                planted: Some(model),
            })
        }
        InputConfig::Bundle(b) => {
            let load = |bundle: &Path, manifest: &Path| -> Result<Split> {
                let (desc, raw) = io::read_bundle(bundle)?;
                let manifest = io::read_manifest(manifest)?;
                let report = validate_bundle(&desc, &raw, &manifest)?;
                if !report.ok() {
                    log::warn!(
                        "{}: renormalized {} probability rows (max drift {:.3e})",
                        bundle.display(),
                        report.renormalized_rows.len(),
                        report.max_row_drift
                    );
                }
                Ok(Split {
                    desc,
                    prob: report.probabilities,
                    manifest,
                })
            };
            let train = load(&b.train_bundle, &b.train_manifest)?;
            let test = load(&b.test_bundle, &b.test_manifest)?;
            if train.desc.dim() != test.desc.dim() || train.prob.n_classes() != test.prob.n_classes() {
                return Err(Error::InconsistentDim(
                    "train and test bundles differ in descriptor or class width".into(),
                ));
            }
            Ok(Dataset {
                train,
                test,
                planted: None,
            })
        }
    }
}

/// Content hash of a split (all values as f64 bits, plus the manifest text).
fn hash_split(h: &mut Sha256, s: &Split) -> Result<()> {
    for x in s.desc.as_slice().iter().chain(s.prob.as_slice()) {
        h.update(x.to_bits().to_le_bytes());
    }
    h.update((s.desc.dim() as u64).to_le_bytes());
    h.update((s.prob.n_classes() as u64).to_le_bytes());
    h.update(io::manifest_to_string(&s.manifest)?.as_bytes());
    Ok(())
}

fn stage_key(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config sections serialize")
}

/// Lossless on-disk memo for stage outputs.
#[derive(Debug, Clone)]
struct Cache {
    dir: PathBuf,
}

impl Cache {
    fn path(&self, stage: &str, key: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{}.{ext}", &key[..16]))
    }

    fn get_json<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let p = self.path(stage, key, "json");
        let text = fs::read_to_string(p).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn put_json<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let text = serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))?;
        io::write_atomic(&self.path(stage, key, "json"), text.as_bytes())
    }

    fn get_vectors(&self, stage: &str, key: &str) -> Option<Vec<EncodedVector>> {
        let bytes = fs::read(self.path(stage, key, "bin")).ok()?;
        decode_vectors(&bytes)
    }

    fn put_vectors(&self, stage: &str, key: &str, vs: &[EncodedVector]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        io::write_atomic(&self.path(stage, key, "bin"), &encode_vectors(vs))
    }
}

#[derive(Serialize, Deserialize)]
struct VectorsHeader {
    layout: Layout,
    block_dims: (usize, usize),
    normalized: bool,
    count: usize,
    len: usize,
}

/// JSON header line, then every vector as f64 LE.
fn encode_vectors(vs: &[EncodedVector]) -> Vec<u8> {
    let first = &vs[0];
    let header = VectorsHeader {
        layout: first.layout,
        block_dims: first.block_dims,
        normalized: first.normalized,
        count: vs.len(),
        len: first.len(),
    };
    let mut out = json(&header).into_bytes();
    out.push(b'\n');
    for v in vs {
        for x in &v.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_vectors(bytes: &[u8]) -> Option<Vec<EncodedVector>> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    let h: VectorsHeader = serde_json::from_slice(&bytes[..nl]).ok()?;
    let body = &bytes[nl + 1..];
    if body.len() != h.count * h.len * 8 {
        return None;
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    values
        .chunks(h.len.max(1))
        .take(h.count)
        .map(|chunk| {
            let mut v = EncodedVector::new(chunk.to_vec(), h.layout, h.block_dims).ok()?;
            v.normalized = h.normalized;
            Some(v)
        })
        .collect()
}

/// Evenly strided subsample of at most `cap` rows.
fn fit_subsample(desc: &DescriptorMatrix, cap: usize) -> DescriptorMatrix {
    let n = desc.n_patches();
    if n <= cap {
        return desc.clone();
    }
    let rows: Vec<usize> = (0..cap).map(|i| i * n / cap).collect();
    desc.select_rows(&rows)
}

/// A fitted dictionary for one encoder method.
#[derive(Debug, Clone)]
pub enum Dictionary {
    Semantic(SemanticCodebook),
    KMeans(KMeansCodebook),
    Gmm(DiagonalGmm),
    None,
}

/// Everything one method produced.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Layout,
    pub dictionary: Dictionary,
    pub selected: Option<Vec<usize>>,
    pub train_features: Vec<EncodedVector>,
    pub test_features: Vec<EncodedVector>,
    pub model: LinearOvaModel,
    pub train_report: EvalReport,
    pub test_report: EvalReport,
    /// Stage name → seconds.
    pub timings: BTreeMap<String, f64>,
    pub cache_hits: Vec<String>,
}

/// Loaded (and optionally PCA-projected) data shared by several method runs.
pub struct Experiment {
    pub config: PipelineConfig,
    pub data: Dataset,
    pub pca: Option<PcaModel>,
    data_key: String,
    cache: Option<Cache>,
    pub timings: BTreeMap<String, f64>,
    pub cache_hits: Vec<String>,
}

impl Experiment {
    /// Loads the input and applies PCA. With `use_cache`, stage outputs are
    /// memoized under `output_dir/cache`.
    pub fn prepare(config: &PipelineConfig, use_cache: bool) -> Result<Self> {
        config.validate()?;
        let mut timings = BTreeMap::new();
        let mut cache_hits = Vec::new();
        let t = Instant::now();
        let mut data = load_dataset(&config.input).stage("input")?;
        timings.insert("input".into(), t.elapsed().as_secs_f64());

        let mut h = Sha256::new();
        hash_split(&mut h, &data.train)?;
        hash_split(&mut h, &data.test)?;
        let mut data_key = hex::encode(h.finalize());
        let cache = use_cache.then(|| Cache {
            dir: config.output_dir.join("cache"),
        });

        let mut pca = None;
        if let Some(dim) = config.encoder.pca_dim {
            let t = Instant::now();
            let key = stage_key(
                "pca",
                &[&data_key, &json(&(dim, config.encoder.pca_whiten, config.encoder.fit_sample))],
            );
            let model: PcaModel = match cache.as_ref().and_then(|c| c.get_json("pca", &key)) {
                Some(m) => {
                    cache_hits.push("pca".into());
                    m
                }
                None => {
                    let sample = fit_subsample(&data.train.desc, config.encoder.fit_sample);
                    let opts = PcaOptions {
                        whiten: config.encoder.pca_whiten,
                        strict_rank: false,
                    };
                    let m = pca_fit(&sample, dim, &opts).stage("pca")?;
                    if let Some(c) = &cache {
                        c.put_json("pca", &key, &m)?;
                    }
                    m
                }
            };
            data.train.desc = model.transform(&data.train.desc).stage("pca")?;
            data.test.desc = model.transform(&data.test.desc).stage("pca")?;
            data_key = stage_key("pca-data", &[&data_key, &key]);
            pca = Some(model);
            timings.insert("pca".into(), t.elapsed().as_secs_f64());
        }
        Ok(Self {
            config: config.clone(),
            data,
            pca,
            data_key,
            cache,
            timings,
            cache_hits,
        })
    }

    fn cached<T, F>(&self, stage: &'static str, key: &str, hits: &mut Vec<String>, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.cache.as_ref().and_then(|c| c.get_json(stage, key)) {
            hits.push(stage.into());
            return Ok(v);
        }
        let v = compute().stage(stage)?;
        if let Some(c) = &self.cache {
            c.put_json(stage, key, &v).stage(stage)?;
        }
        Ok(v)
    }

    fn cached_vectors<F>(&self, key: &str, hits: &mut Vec<String>, compute: F) -> Result<Vec<EncodedVector>>
    where
        F: FnOnce() -> Result<Vec<EncodedVector>>,
    {
        if let Some(v) = self.cache.as_ref().and_then(|c| c.get_vectors("encode", key)) {
            hits.push("encode".into());
            return Ok(v);
        }
        let v = compute().stage("encode")?;
        if let (Some(c), false) = (&self.cache, v.is_empty()) {
            c.put_vectors("encode", key, &v).stage("encode")?;
        }
        Ok(v)
    }

    /// Fits the dictionary, selects, encodes both splits, trains and evaluates.
    pub fn run_method(
        &self,
        encoder: &EncoderConfig,
        selection: &SelectionConfig,
        classifier: &SvmOptions,
    ) -> Result<MethodOutcome> {
        let mut timings = BTreeMap::new();
        let mut hits = Vec::new();
        let (train, test) = (&self.data.train, &self.data.test);
        let fit_key = json(&(encoder.codebook_size, encoder.fit_sample, encoder.seed));

        let t = Instant::now();
        let (dictionary, dict_key) = match encoder.method {
            Layout::Vsad => {
                let opts = CodebookOptions {
                    variance_floor: encoder.variance_floor,
                    activation_threshold: encoder.activation_threshold,
                    ..Default::default()
                };
                let key = stage_key(
                    "codebook",
                    &[&self.data_key, &json(&(opts.variance_floor, opts.activation_threshold))],
                );
                let cb: SemanticCodebook = self.cached("codebook", &key, &mut hits, || {
                    build_codebook(&train.desc, &train.prob, &opts)
                })?;
                (Dictionary::Semantic(cb), key)
            }
            Layout::Vlad => {
                let key = stage_key("kmeans", &[&self.data_key, &fit_key]);
                let km: KMeansCodebook = self.cached("kmeans", &key, &mut hits, || {
                    let sample = fit_subsample(&train.desc, encoder.fit_sample);
                    let opts = KMeansOptions {
                        seed: encoder.seed,
                        ..Default::default()
                    };
                    kmeans_fit(&sample, encoder.codebook_size, &opts)
                })?;
                (Dictionary::KMeans(km), key)
            }
            Layout::Fv => {
                let key = stage_key("gmm", &[&self.data_key, &fit_key]);
                let gmm: DiagonalGmm = self.cached("gmm", &key, &mut hits, || {
                    let sample = fit_subsample(&train.desc, encoder.fit_sample);
                    let opts = GmmOptions {
                        seed: encoder.seed,
                        ..Default::default()
                    };
                    gmm_fit(&sample, encoder.codebook_size, &opts)
                })?;
                (Dictionary::Gmm(gmm), key)
            }
            Layout::Avgpool => (Dictionary::None, stage_key("avgpool", &[&self.data_key])),
        };
        timings.insert("dictionary".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let selected = match (&dictionary, selection.k) {
            (Dictionary::Semantic(cb), Some(k)) => {
                let key = stage_key("select", &[&self.data_key, &json(selection)]);
                Some(self.cached("select", &key, &mut hits, || {
                    if selection.random {
                        random_selection(cb.k, k, selection.seed)
                    } else {
                        let table = aggregate_responses(&train.prob, &train.manifest)?;
                        Ok(select_codewords(&table, k)?.selected)
                    }
                })?)
            }
            _ => None,
        };
        timings.insert("select".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let encode_key = |split: &str| {
            stage_key(
                "encode",
                &[&dict_key, split, &json(&selected), &json(&encoder.subset_prior), encoder.method.name()],
            )
        };
        let encode = |split: &Split| -> Result<Vec<EncodedVector>> {
            match &dictionary {
                Dictionary::Semantic(cb) => {
                    let mut cfg = VsadConfig::new(cb.clone());
                    cfg.subset_prior = encoder.subset_prior;
                    if let Some(sel) = &selected {
                        cfg = cfg.with_selection(sel.clone());
                    }
                    let enc = VsadEncoder::new(&cfg)?;
                    Ok(enc
                        .encode_batch(&split.desc, &split.prob, &split.manifest)?
                        .into_iter()
                        .map(|(_, v)| v)
                        .collect())
                }
                dict => per_image(split, |desc| match dict {
                    Dictionary::KMeans(km) => vlad_encode(desc, km),
                    Dictionary::Gmm(g) => fv_encode(desc, g),
                    _ => avgpool_encode(desc),
                }),
            }
        };
        let train_features = self.cached_vectors(&encode_key("train"), &mut hits, || encode(train))?;
        let test_features = self.cached_vectors(&encode_key("test"), &mut hits, || encode(test))?;
        timings.insert("encode".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let train_labels = train.labels().stage("train")?;
        let model = svm_train(&train_features, &train_labels, classifier).stage("train")?;
        timings.insert("train".into(), t.elapsed().as_secs_f64());

        let t = Instant::now();
        let train_report = evaluate(&model, &train_features, &train_labels).stage("eval")?;
        let test_labels = test.labels().stage("eval")?;
        let test_report = evaluate(&model, &test_features, &test_labels).stage("eval")?;
        timings.insert("eval".into(), t.elapsed().as_secs_f64());

        Ok(MethodOutcome {
            method: encoder.method,
            dictionary,
            selected,
            train_features,
            test_features,
            model,
            train_report,
            test_report,
            timings,
            cache_hits: hits,
        })
    }
}

/// Applies `f` to every image of a split, in parallel, keeping manifest order.
fn per_image<F>(split: &Split, f: F) -> Result<Vec<EncodedVector>>
where
    F: Fn(&DescriptorMatrix) -> Result<EncodedVector> + Sync,
{
    split
        .manifest
        .image_ids()
        .par_iter()
        .zip(split.manifest.ranges().par_iter())
        .map(|(id, r)| {
            if r.is_empty() {
                return Err(Error::EmptyImage(id.clone()));
            }
            f(&split.desc.slice_rows(r.clone())).map_err(|e| match e {
                Error::EmptyImage(_) => Error::EmptyImage(id.clone()),
                e => e,
            })
        })
        .collect()
}

/// Reproducible part of the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub config_hash: String,
    pub method: Layout,
    pub seeds: BTreeMap<String, u64>,
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub n_train_patches: usize,
    pub descriptor_dim: usize,
    pub n_semantic_classes: usize,
    pub rectangles_per_image: usize,
    pub feature_dim: usize,
    pub planted_stddev: Option<f64>,
    pub selected: Option<Vec<usize>>,
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    pub test: EvalReport,
    pub svm_epochs: Vec<usize>,
    pub svm_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub body: ReportBody,
    /// Stage name → seconds. Varies between runs.
    pub timings: BTreeMap<String, f64>,
    pub cache_hits: Vec<String>,
}

impl RunReport {
    /// Canonical JSON of the reproducible part.
    pub fn body_json(&self) -> String {
        serde_json::to_string_pretty(&self.body).expect("report serializes")
    }
}

fn seeds_of(config: &PipelineConfig) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::new();
    if let InputConfig::Synth(s) = &config.input {
        seeds.insert("synth".into(), s.seed);
    }
    seeds.insert("encoder".into(), config.encoder.seed);
    seeds.insert("selection".into(), config.selection.seed);
    seeds.insert("classifier".into(), config.classifier.seed);
    seeds
}

/// Runs the configured method and writes every artifact plus `report.json`
/// to `output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let total = Instant::now();
    let exp = Experiment::prepare(config, true)?;
    let out = exp.run_method(&config.encoder, &config.selection, &config.classifier)?;
    let rectangles = sampler::sample_grid(
        config.sampling.image_side,
        &config.sampling.scales,
        config.sampling.grid,
        config.sampling.flips,
    )
    .stage("sampling")?
    .len();

    let t = Instant::now();
    write_artifacts(&exp, &out).stage("write")?;
    let mut timings = exp.timings.clone();
    timings.extend(out.timings.clone());
    timings.insert("write".into(), t.elapsed().as_secs_f64());

    let body = ReportBody {
        config_hash: config.hash()?,
        method: out.method,
        seeds: seeds_of(config),
        n_train_images: exp.data.train.manifest.len(),
        n_test_images: exp.data.test.manifest.len(),
        n_train_patches: exp.data.train.desc.n_patches(),
        descriptor_dim: exp.data.train.desc.dim(),
        n_semantic_classes: exp.data.train.prob.n_classes(),
        rectangles_per_image: rectangles,
        feature_dim: out.train_features.first().map_or(0, EncodedVector::len),
        planted_stddev: exp.data.planted.as_ref().map(|m| m.object_stddev),
        selected: out.selected.clone(),
        train_accuracy: out.train_report.overall_accuracy,
        accuracy: out.test_report.overall_accuracy,
        mean_class_accuracy: out.test_report.mean_class_accuracy,
        test: out.test_report.clone(),
        svm_epochs: out.model.training_meta.iter().map(|t| t.epochs).collect(),
        svm_converged: out.model.training_meta.iter().all(|t| t.converged),
    };
    timings.insert("total".into(), total.elapsed().as_secs_f64());
    let mut cache_hits = exp.cache_hits.clone();
    cache_hits.extend(out.cache_hits.clone());
    let report = RunReport {
        body,
        timings,
        cache_hits,
    };
    io::write_json(&report, &config.output_dir.join("report.json")).stage("write")?;
    Ok(report)
}

fn feature_manifest(m: &PatchManifest) -> Result<PatchManifest> {
    PatchManifest::one_per_row(m.image_ids().to_vec(), m.labels().to_vec())
}

fn write_artifacts(exp: &Experiment, out: &MethodOutcome) -> Result<()> {
    let dir = &exp.config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_atomic(&dir.join("config.toml"), exp.config.to_toml()?.as_bytes())?;
    if let Some(p) = &exp.pca {
        io::write_json(p, &dir.join("pca.json"))?;
    }
    match &out.dictionary {
        Dictionary::Semantic(cb) => io::write_codebook(cb, &dir.join("codebook.json"))?,
        Dictionary::KMeans(km) => io::write_json(km, &dir.join("kmeans.json"))?,
        Dictionary::Gmm(g) => io::write_json(g, &dir.join("gmm.json"))?,
        Dictionary::None => {}
    }
    if let Some(sel) = &out.selected {
        io::write_selection(sel, &dir.join("selected.txt"))?;
    }
    io::write_features(&out.train_features, &dir.join("train_features.vsbn"))?;
    io::write_features(&out.test_features, &dir.join("test_features.vsbn"))?;
    io::write_manifest(&feature_manifest(&exp.data.train.manifest)?, &dir.join("train_features.tsv"))?;
    io::write_manifest(&feature_manifest(&exp.data.test.manifest)?, &dir.join("test_features.tsv"))?;
    io::write_json(&out.model, &dir.join("model.json"))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Layout,
    pub accuracy: f64,
    pub runtime_secs: f64,
}

/// Runs each method on the same loaded data. Rows are sorted by accuracy,
/// descending; equal accuracies keep the order of `methods`.
pub fn compare_encoders(config: &PipelineConfig, methods: &[Layout]) -> Result<Vec<ComparisonRow>> {
    let exp = Experiment::prepare(config, true)?;
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let t = Instant::now();
        let encoder = EncoderConfig {
            method,
            ..config.encoder.clone()
        };
        let out = exp.run_method(&encoder, &config.selection, &config.classifier)?;
        rows.push(ComparisonRow {
            method,
            accuracy: out.test_report.overall_accuracy,
            runtime_secs: t.elapsed().as_secs_f64(),
        });
    }
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    Ok(rows)
}

/// Tab-separated `method accuracy runtime_s` with a header line.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("method\taccuracy\truntime_s\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.4}\t{:.3}\n", r.method, r.accuracy, r.runtime_secs));
    }
    s
}
