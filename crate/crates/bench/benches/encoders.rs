use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vsad_core::baseline::{fv_encode, gmm_fit, kmeans_fit, vlad_encode, GmmOptions, KMeansOptions};
use vsad_core::codebook::{build_codebook, CodebookOptions};
use vsad_core::pipeline::{planted_model, SynthConfig};
use vsad_core::synth::{generate, SyntheticBundle};
use vsad_core::vsad::{VsadConfig, VsadEncoder};

fn bundle(patches: usize) -> SyntheticBundle {
    let cfg = SynthConfig {
        stddev: Some(1.0),
        ..Default::default()
    };
    let model = planted_model(&cfg).unwrap();
    generate(&model, 4, patches).unwrap()
}

fn codebook(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_codebook");
    for patches in [100, 1000] {
        let b = bundle(patches);
        for parallel in [false, true] {
            let opts = CodebookOptions {
                parallel,
                ..Default::default()
            };
            let id = BenchmarkId::new(if parallel { "parallel" } else { "sequential" }, b.descriptors.n_patches());
            group.bench_with_input(id, &b, |bench, b| {
                bench.iter(|| build_codebook(black_box(&b.descriptors), black_box(&b.probabilities), &opts).unwrap())
            });
        }
    }
    group.finish();
}

fn encode_one_image(c: &mut Criterion) {
    let b = bundle(200);
    let image = b.manifest.ranges()[0].clone();
    let desc = b.descriptors.slice_rows(image.clone());
    let prob = b.probabilities.slice_rows(image);
    let cb = build_codebook(&b.descriptors, &b.probabilities, &CodebookOptions::default()).unwrap();
    let vsad = VsadEncoder::new(&VsadConfig::new(cb)).unwrap();
    let km = kmeans_fit(&b.descriptors, 50, &KMeansOptions::default()).unwrap();
    let gmm = gmm_fit(&b.descriptors, 50, &GmmOptions::default()).unwrap();

    let mut group = c.benchmark_group("encode_200_patches");
    group.bench_function("vsad", |bench| bench.iter(|| vsad.encode(black_box(&desc), black_box(&prob)).unwrap()));
    group.bench_function("fv", |bench| bench.iter(|| fv_encode(black_box(&desc), &gmm).unwrap()));
    group.bench_function("vlad", |bench| bench.iter(|| vlad_encode(black_box(&desc), &km).unwrap()));
    group.finish();
}

criterion_group!(benches, codebook, encode_one_image);
criterion_main!(benches);
