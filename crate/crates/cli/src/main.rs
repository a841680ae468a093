use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vsad_core::baseline::{
    avgpool_encode, fv_encode, gmm_fit, kmeans_fit, pca_fit, vlad_encode, DiagonalGmm, GmmOptions,
    KMeansCodebook, KMeansOptions, PcaModel, PcaOptions,
};
use vsad_core::classifier::{average_reports, evaluate, predict, svm_train, LinearOvaModel, SvmOptions};
use vsad_core::codebook::{build_codebook, CodebookOptions, SubsetPrior};
use vsad_core::data::{validate_bundle, DescriptorMatrix, EncodedVector, Layout, PatchManifest, ProbabilityMatrix};
use vsad_core::io;
use vsad_core::pipeline::{self, PipelineConfig, SynthConfig};
use vsad_core::sampler::{self, DEFAULT_GRID, DEFAULT_IMAGE_SIDE};
use vsad_core::selection::{aggregate_responses, random_selection, select_codewords};
use vsad_core::synth;
use vsad_core::vsad::{VsadConfig, VsadEncoder};
use vsad_core::{Error, Result, StageContext};

#[derive(Parser)]
#[command(name = "vsad", version, about = "Semantic aggregation of patch descriptors for scene recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic bundle and manifest.
    Synth(SynthArgs),
    /// Print the dense multi-scale patch grid, one rectangle per line.
    SampleGrid(SampleGridArgs),
    /// Build a semantic codebook from a bundle.
    BuildCodebook(BuildCodebookArgs),
    /// Pick discriminative codewords from labeled training patches.
    Select(SelectArgs),
    /// Fit a k-means dictionary for VLAD.
    KmeansFit(FitArgs),
    /// Fit a diagonal GMM for Fisher vectors.
    GmmFit(FitArgs),
    /// Fit a PCA projection of the descriptors.
    PcaFit(PcaFitArgs),
    /// Encode every image of a bundle into a feature file.
    Encode(EncodeArgs),
    /// Train a one-vs-all linear SVM on a feature file.
    Train(TrainArgs),
    /// Print the predicted class of every feature row.
    Predict(PredictArgs),
    /// Evaluate one or more (model, features, manifest) splits and average them.
    Eval(EvalArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
    /// Run several encoders on the same inputs and print an accuracy table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    categories: usize,
    #[arg(long, default_value_t = 50)]
    objects: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Object stddev; calibrated to --target-entropy bits when omitted.
    #[arg(long)]
    stddev: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    target_entropy: f64,
    #[arg(long, default_value_t = 2.0)]
    temp: f64,
    #[arg(long, default_value_t = 5)]
    signature_objects: usize,
    #[arg(long, default_value_t = 0.2)]
    signature_mass: f64,
    #[arg(long, default_value_t = 60)]
    images_per_cat: usize,
    #[arg(long, default_value_t = 100)]
    patches: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the planted model as JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleGridArgs {
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIDE)]
    image_side: u32,
    /// Comma-separated patch sides.
    #[arg(long, value_delimiter = ',', default_values_t = sampler::DEFAULT_SCALES.to_vec())]
    scales: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: u32,
    #[arg(long)]
    flips: bool,
}

#[derive(Args)]
struct BuildCodebookArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Manifest checked against the bundle before building.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = vsad_core::codebook::DEFAULT_VARIANCE_FLOOR)]
    variance_floor: f64,
    #[arg(long, default_value_t = vsad_core::codebook::DEFAULT_ACTIVATION_THRESHOLD)]
    activation_threshold: f64,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Uniformly random classes instead of the selection rule.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Apply this PCA model to the descriptors first.
    #[arg(long)]
    pca: Option<PathBuf>,
}

#[derive(Args)]
struct PcaFitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    whiten: bool,
    /// Fail when the data has lower rank than --dim.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "vsad")]
    method: Layout,
    /// Semantic codebook (vsad), k-means model (vlad) or GMM (fv).
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    selected: Option<PathBuf>,
    /// Keep the full-codebook priors for a selected subset.
    #[arg(long)]
    full_prior: bool,
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the one-row-per-image manifest of the features.
    #[arg(long)]
    out_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Image manifest whose rows match the feature rows (labels are read from it).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Supplies image ids for the output.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// One per split; --features and --manifest pair with it by position.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long, required = true)]
    features: Vec<PathBuf>,
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Write the per-split reports and the averages as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "paper_defaults")]
    config: Option<PathBuf>,
    /// Use the built-in reference operating points instead of a config file.
    #[arg(long)]
    paper_defaults: bool,
    /// Output directory; overrides the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, required_unless_present = "paper_defaults")]
    config: Option<PathBuf>,
    #[arg(long)]
    paper_defaults: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "vsad,fv,vlad,avgpool")]
    methods: Vec<Layout>,
    /// Also write the table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::Synth(a) => ("synth", cmd_synth(a)),
        Command::SampleGrid(a) => ("sample-grid", cmd_sample_grid(a)),
        Command::BuildCodebook(a) => ("build-codebook", cmd_build_codebook(a)),
        Command::Select(a) => ("select", cmd_select(a)),
        Command::KmeansFit(a) => ("kmeans-fit", cmd_kmeans_fit(a)),
        Command::GmmFit(a) => ("gmm-fit", cmd_gmm_fit(a)),
        Command::PcaFit(a) => ("pca-fit", cmd_pca_fit(a)),
        Command::Encode(a) => ("encode", cmd_encode(a)),
        Command::Train(a) => ("train", cmd_train(a)),
        Command::Predict(a) => ("predict", cmd_predict(a)),
        Command::Eval(a) => ("eval", cmd_eval(a)),
        Command::Run(a) => ("run", cmd_run(a)),
        Command::Compare(a) => ("compare", cmd_compare(a)),
    };
    match result.stage(stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        categories: a.categories,
        objects: a.objects,
        dim: a.dim,
        stddev: a.stddev,
        target_entropy_bits: a.target_entropy,
        temperature: a.temp,
        signature_objects: a.signature_objects,
        signature_mass: a.signature_mass,
        seed: a.seed,
        ..Default::default()
    };
    let model = pipeline::planted_model(&cfg)?;
    let bundle = synth::generate(&model, a.images_per_cat, a.patches)?;
    io::write_bundle(&bundle.descriptors, &bundle.probabilities, &a.out)?;
    io::write_manifest(&bundle.manifest, &a.manifest)?;
    if let Some(p) = &a.model_out {
        io::write_json(&model, p)?;
    }
    eprintln!(
        "wrote {} patches in {} images (stddev {:.4})",
        bundle.descriptors.n_patches(),
        bundle.manifest.len(),
        model.object_stddev
    );
    Ok(())
}

fn cmd_sample_grid(a: SampleGridArgs) -> Result<()> {
    let rects = sampler::sample_grid(a.image_side, &a.scales, a.grid, a.flips)?;
    let mut out = String::with_capacity(rects.len() * 16);
    for r in rects {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

/// Reads a bundle and repairs small probability-row drift.
fn load_bundle(path: &Path, manifest: Option<&PatchManifest>) -> Result<(DescriptorMatrix, ProbabilityMatrix)> {
    let (desc, raw) = io::read_bundle(path)?;
    let whole;
    let manifest = match manifest {
        Some(m) => m,
        None => {
            whole = PatchManifest::new(vec!["all".into()], std::iter::once(0..desc.n_patches()).collect(), vec![None])?;
            &whole
        }
    };
    let report = validate_bundle(&desc, &raw, manifest)?;
    if !report.ok() {
        eprintln!(
            "warning: renormalized {} probability rows (max drift {:.3e})",
            report.renormalized_rows.len(),
            report.max_row_drift
        );
    }
    Ok((desc, report.probabilities))
}

fn project(desc: DescriptorMatrix, pca: Option<&Path>) -> Result<DescriptorMatrix> {
    match pca {
        Some(p) => io::read_json::<PcaModel>(p)?.transform(&desc),
        None => Ok(desc),
    }
}

fn cmd_build_codebook(a: BuildCodebookArgs) -> Result<()> {
    let manifest = a.manifest.as_deref().map(io::read_manifest).transpose()?;
    let (desc, prob) = load_bundle(&a.bundle, manifest.as_ref())?;
    let opts = CodebookOptions {
        variance_floor: a.variance_floor,
        activation_threshold: a.activation_threshold,
        ..Default::default()
    };
    let cb = build_codebook(&desc, &prob, &opts)?;
    io::write_codebook(&cb, &a.out)?;
    eprintln!("codebook: {} codewords ({} active), D = {}", cb.k, cb.n_active(), cb.d);
    Ok(())
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let manifest = io::read_manifest(&a.manifest)?;
    let (_, prob) = load_bundle(&a.bundle, Some(&manifest))?;
    let selected = if a.random {
        random_selection(prob.n_classes(), a.k, a.seed)?
    } else {
        let table = aggregate_responses(&prob, &manifest)?;
        let r = select_codewords(&table, a.k)?;
        eprintln!("selected {} codewords at depth T = {}", r.selected.len(), r.t_final);
        r.selected
    };
    io::write_selection(&selected, &a.out)
}

fn cmd_kmeans_fit(a: FitArgs) -> Result<()> {
    let (desc, _) = io::read_bundle(&a.bundle)?;
    let desc = project(desc, a.pca.as_deref())?;
    let opts = KMeansOptions {
        max_iter: a.max_iter,
        seed: a.seed,
        ..Default::default()
    };
    let km = kmeans_fit(&desc, a.k, &opts)?;
    eprintln!("k-means inertia {:.6}", km.inertia);
    io::write_json(&km, &a.out)
}

fn cmd_gmm_fit(a: FitArgs) -> Result<()> {
    let (desc, _) = io::read_bundle(&a.bundle)?;
    let desc = project(desc, a.pca.as_deref())?;
    let opts = GmmOptions {
        max_iter: a.max_iter,
        seed: a.seed,
        ..Default::default()
    };
    let gmm = gmm_fit(&desc, a.k, &opts)?;
    eprintln!("GMM log-likelihood {:.6}", gmm.log_likelihood);
    io::write_json(&gmm, &a.out)
}

fn cmd_pca_fit(a: PcaFitArgs) -> Result<()> {
    let (desc, _) = io::read_bundle(&a.bundle)?;
    let opts = PcaOptions {
        whiten: a.whiten,
        strict_rank: a.strict,
    };
    let model = pca_fit(&desc, a.dim, &opts)?;
    io::write_json(&model, &a.out)
}

fn per_image<F>(desc: &DescriptorMatrix, manifest: &PatchManifest, f: F) -> Result<Vec<EncodedVector>>
where
    F: Fn(&DescriptorMatrix) -> Result<EncodedVector>,
{
    manifest
        .image_ids()
        .iter()
        .zip(manifest.ranges())
        .map(|(id, r)| {
            if r.is_empty() {
                return Err(Error::EmptyImage(id.clone()));
            }
            f(&desc.slice_rows(r.clone()))
        })
        .collect()
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let manifest = io::read_manifest(&a.manifest)?;
    let (desc, prob) = load_bundle(&a.bundle, Some(&manifest))?;
    let desc = project(desc, a.pca.as_deref())?;
    let needs_codebook = || {
        a.codebook
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--codebook is required for {}", a.method)))
    };
    if a.no_normalize && a.method != Layout::Vsad {
        return Err(Error::Config("--no-normalize applies to vsad only".into()));
    }
    let vectors = match a.method {
        Layout::Vsad => {
            let mut cfg = VsadConfig::new(io::read_codebook(needs_codebook()?)?);
            if let Some(p) = &a.selected {
                cfg = cfg.with_selection(io::read_selection(p)?);
            }
            if a.full_prior {
                cfg.subset_prior = SubsetPrior::Full;
            }
            if a.no_normalize {
                cfg = cfg.without_normalization();
            }
            VsadEncoder::new(&cfg)?
                .encode_batch(&desc, &prob, &manifest)?
                .into_iter()
                .map(|(_, v)| v)
                .collect()
        }
        Layout::Vlad => {
            let km: KMeansCodebook = io::read_json(needs_codebook()?)?;
            per_image(&desc, &manifest, |d| vlad_encode(d, &km))?
        }
        Layout::Fv => {
            let gmm: DiagonalGmm = io::read_json(needs_codebook()?)?;
            per_image(&desc, &manifest, |d| fv_encode(d, &gmm))?
        }
        Layout::Avgpool => per_image(&desc, &manifest, avgpool_encode)?,
    };
    io::write_features(&vectors, &a.out)?;
    if let Some(p) = &a.out_manifest {
        let m = PatchManifest::one_per_row(manifest.image_ids().to_vec(), manifest.labels().to_vec())?;
        io::write_manifest(&m, p)?;
    }
    Ok(())
}

/// Feature rows plus the manifest that names and labels them.
fn load_features(features: &Path, manifest_path: &Path) -> Result<(Vec<Vec<f64>>, PatchManifest)> {
    let desc = io::read_features(features)?;
    let manifest = io::read_manifest(manifest_path)?;
    if manifest.len() != desc.n_patches() {
        return Err(Error::MismatchedRows {
            what: format!(
                "{} has {} rows but {} lists {} images",
                features.display(),
                desc.n_patches(),
                manifest_path.display(),
                manifest.len()
            ),
        });
    }
    Ok((desc.rows().map(<[f64]>::to_vec).collect(), manifest))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (x, manifest) = load_features(&a.features, &a.manifest)?;
    let labels = manifest.required_labels()?;
    let opts = SvmOptions {
        c: a.c,
        tol: a.tol,
        max_epochs: a.max_epochs,
        seed: a.seed,
    };
    let model = svm_train(&x, &labels, &opts)?;
    let report = evaluate(&model, &x, &labels)?;
    eprintln!("training accuracy {:.4}", report.overall_accuracy);
    io::write_json(&model, &a.out)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model: LinearOvaModel = io::read_json(&a.model)?;
    let desc = io::read_features(&a.features)?;
    let ids: Vec<String> = match &a.manifest {
        Some(m) => io::read_manifest(m)?.image_ids().to_vec(),
        None => (0..desc.n_patches()).map(|i| i.to_string()).collect(),
    };
    if ids.len() != desc.n_patches() {
        return Err(Error::MismatchedRows {
            what: format!("{} ids for {} feature rows", ids.len(), desc.n_patches()),
        });
    }
    let mut out = String::new();
    for (id, row) in ids.iter().zip(desc.rows()) {
        let (class, scores) = predict(&model, row)?;
        out.push_str(&format!("{id}\t{class}\t{:.6}\n", scores[class]));
    }
    print!("{out}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.model.len() != a.features.len() || a.model.len() != a.manifest.len() {
        return Err(Error::Config(
            "--model, --features and --manifest must be given the same number of times".into(),
        ));
    }
    let mut reports = Vec::new();
    for ((m, f), t) in a.model.iter().zip(&a.features).zip(&a.manifest) {
        let model: LinearOvaModel = io::read_json(m)?;
        let (x, manifest) = load_features(f, t)?;
        let report = evaluate(&model, &x, &manifest.required_labels()?)?;
        println!(
            "split\t{}\taccuracy\t{:.4}\tmean_class\t{:.4}",
            reports.len(),
            report.overall_accuracy,
            report.mean_class_accuracy
        );
        reports.push(report);
    }
    let (overall, mean_class) = average_reports(&reports);
    println!("average\t{}\taccuracy\t{overall:.4}\tmean_class\t{mean_class:.4}", reports.len());
    if let Some(p) = &a.out {
        let doc = serde_json::json!({
            "splits": reports,
            "average_accuracy": overall,
            "average_mean_class_accuracy": mean_class,
        });
        io::write_json(&doc, p)?;
    }
    Ok(())
}

fn load_config(config: Option<&Path>, paper_defaults: bool, out: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = match (config, paper_defaults) {
        (Some(p), _) => PipelineConfig::from_file(p)?,
        (None, true) => PipelineConfig::paper_defaults("vsad-run"),
        (None, false) => return Err(Error::Config("need --config or --paper-defaults".into())),
    };
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.paper_defaults, a.out)?;
    let report = pipeline::run_pipeline(&cfg)?;
    println!(
        "{}\taccuracy\t{:.4}\tmean_class\t{:.4}\ttrain\t{:.4}",
        report.body.method, report.body.accuracy, report.body.mean_class_accuracy, report.body.train_accuracy
    );
    eprintln!("report: {}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.paper_defaults, a.out)?;
    let rows = pipeline::compare_encoders(&cfg, &a.methods)?;
    let table = pipeline::format_comparison(&rows);
    print!("{table}");
    if let Some(p) = &a.table {
        io::write_atomic(p, table.as_bytes())?;
    }
    Ok(())
}
