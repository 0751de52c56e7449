use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use c2f_core::exec::Exec;
use c2f_core::inference::{run_inference, InferenceConfig};
use c2f_core::model::ModelParams;
use c2f_core::synthdata::{generate_corpus, generate_splits, CorpusConfig, CorpusLayout, Manifest};
use c2f_core::trainer::{batch_gradient, make_batch, TrainConfig};

const ARMS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus() -> CorpusConfig {
    CorpusConfig {
        num_videos: 40,
        ..CorpusConfig::default()
    }
}

fn bench_generation(c: &mut Criterion) {
    let config = corpus();
    let mut g = c.benchmark_group("generate_splits");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_splits(&config, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_training_and_inference(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus();
    generate_corpus(&config, dir.path(), Exec::Parallel).unwrap();
    let layout = CorpusLayout::new(dir.path());
    let train = Manifest::read(&layout.train_manifest()).unwrap();
    let test = Manifest::read(&layout.test_manifest()).unwrap();
    let tc = TrainConfig::default();
    let model = tc.effective_model();
    let params = ModelParams::init(&model, 0).unwrap();

    let indices: Vec<usize> = (0..tc.batch_size).collect();
    let batch = make_batch(&train, &indices, model.max_frames, 0, tc.bg_fraction).unwrap();
    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&params, &batch, tc.mode, &tc.loss, exec).unwrap())
        });
    }
    g.finish();

    let inference = InferenceConfig::default();
    let mut g = c.benchmark_group("run_inference");
    g.sample_size(10);
    for (name, exec) in ARMS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_inference(&params, &test, &inference, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_generation, bench_training_and_inference);
criterion_main!(benches);
