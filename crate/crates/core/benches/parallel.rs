//! Sequential vs data-parallel execution of the hot loops: matmul, corpus
//! metrics, value tagging, and batch decoding with a small dual model.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recycled_core::decoding::BeamConfig;
use recycled_core::exec::ExecMode;
use recycled_core::metrics::{evaluate, GoldRecord, Prediction};
use recycled_core::model::{build_examples, decode_examples, AnyModel, DualSourceConfig, ModelSpec, Seq2Seq, TaskMode};
use recycled_core::recycler::tag_records;
use recycled_core::synth;
use recycled_core::tensor::matmul;
use recycled_core::tokenize::SubwordModel;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_256x512x512");
    let (m, k, n) = (256, 512, 512);
    let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (name, mode) in MODES {
        group.bench_function(name, |bench| bench.iter(|| black_box(matmul(mode, &a, &b, m, k, n))));
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let records = synth::split_corpus(20_000, 40, 1);
    let golds: Vec<GoldRecord> = records.iter().map(GoldRecord::from).collect();
    let preds: Vec<Prediction> = records
        .iter()
        .enumerate()
        .map(|(i, r)| Prediction {
            id: r.id.clone(),
            properties: r
                .properties
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        if i % 3 == 0 {
                            vec!["wrong".to_string()]
                        } else {
                            v.clone()
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_20k_articles");
    for (name, mode) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| black_box(evaluate(mode, &preds, &golds, None).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("tag_em_in_20k_articles");
    for (name, mode) in MODES {
        group.bench_function(name, |bench| bench.iter(|| black_box(tag_records(mode, &records))));
    }
    group.finish();
}

fn bench_decoding(c: &mut Criterion) {
    let records = synth::extraction_fixture(16, 3);
    let tok = SubwordModel::train(synth::tokenizer_corpus(&records), 600).unwrap();
    let cfg = DualSourceConfig {
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        vocab: tok.vocab_size(),
        ..DualSourceConfig::desk()
    };
    let spec = ModelSpec::Dual(cfg);
    let model = AnyModel::<f32>::new(&spec, 0).unwrap();
    let (examples, _) = build_examples(&records, &tok, TaskMode::Multi, spec.layout(), spec.max_positions());
    let beam = BeamConfig {
        width: 4,
        max_len: 24,
        ..BeamConfig::default()
    };
    let mut group = c.benchmark_group("beam_decode_16_articles");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| {
                black_box(
                    decode_examples(
                        mode,
                        &examples,
                        |e| model.scorer(e),
                        &tok,
                        TaskMode::Multi,
                        &beam,
                        |s| s.to_string(),
                    )
                    .unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_metrics, bench_decoding);
criterion_main!(benches);
