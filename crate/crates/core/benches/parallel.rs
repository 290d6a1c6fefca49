//! Parallel vs sequential throughput on the data-parallel hot paths: batch
//! query encoding and evaluation fan-out, plus the finite-difference sweep.
//! The `parallel` variants go through the rayon-backed dispatch, the
//! `sequential` ones through the always-available sequential path; both
//! produce identical bytes.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use nameinv_core::data::{default_vocabulary, generate_synthetic, Dataset, SyntheticConfig};
use nameinv_core::encoder::{encode_sequence, EncoderConfig, Model};
use nameinv_core::gradcheck::{finite_difference_check, ClassQueryLoss};
use nameinv_core::par;
use nameinv_core::store::{generate_model, init_class_embeddings, LearnableClassEmbeddings};
use nameinv_core::tensor::Tensor;
use nameinv_core::tokenizer::{render_query, PromptTemplate, TokenSequence};
use nameinv_core::train::{build_query_set, evaluate_classification, QueryKind, TrainConfig};

struct Bench {
    model: Model<f32>,
    learned: LearnableClassEmbeddings<f32>,
    queries: Vec<TokenSequence>,
    dataset: Dataset,
}

fn setup() -> Bench {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    let model = generate_model(&config, vocab.len(), 17).unwrap();
    let synth = generate_synthetic(
        &SyntheticConfig::classification(8, 16, 20, 0.05, 3),
        &model,
        &vocab,
    )
    .unwrap();
    let dataset = synth.dataset().unwrap();
    let (learned, _) =
        init_class_embeddings(&dataset.manifest.class_names(), &vocab, &model.pretrained, 1)
            .unwrap();
    let template = PromptTemplate::default_photo();
    let queries: Vec<TokenSequence> = (0..8)
        .map(|c| render_query(&template, c, 1, &vocab, config.context_len).unwrap())
        .collect();
    Bench {
        model,
        learned,
        queries,
        dataset,
    }
}

fn encode_batch(c: &mut Criterion) {
    let b = setup();
    let mut group = c.benchmark_group("encode_batch");
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            let rows = par::map_slice(&b.queries, |q| {
                encode_sequence(&b.model, q, &b.learned, None).unwrap()
            });
            criterion::black_box(rows)
        })
    });
    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            let rows = par::map_indexed_seq(b.queries.len(), |i| {
                encode_sequence(&b.model, &b.queries[i], &b.learned, None).unwrap()
            });
            criterion::black_box(rows)
        })
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let b = setup();
    let vocab = default_vocabulary();
    let selection: Vec<(usize, QueryKind)> = (0..8).map(|i| (i, QueryKind::Learned)).collect();
    let qs = build_query_set(
        &b.model,
        &vocab,
        "default",
        &b.dataset,
        &b.learned,
        None,
        &selection,
        &TrainConfig::classification(),
    )
    .unwrap();
    let eval_ids = b.dataset.manifest.splits.eval.clone();
    let mut group = c.benchmark_group("evaluate");
    group.bench_function("parallel", |bench| {
        bench.iter(|| {
            let per_sample = par::map_indexed(eval_ids.len(), |i| {
                evaluate_classification(&b.dataset, &eval_ids[i..i + 1], &qs, b.model.logit_scale)
                    .unwrap()
            });
            criterion::black_box(per_sample)
        })
    });
    group.bench_function("sequential", |bench| {
        bench.iter(|| {
            let per_sample = par::map_indexed_seq(eval_ids.len(), |i| {
                evaluate_classification(&b.dataset, &eval_ids[i..i + 1], &qs, b.model.logit_scale)
                    .unwrap()
            });
            criterion::black_box(per_sample)
        })
    });
    group.finish();
}

fn gradcheck_sweep(c: &mut Criterion) {
    let b = setup();
    let d = b.dataset.features.dim;
    let ids = &b.dataset.manifest.splits.eval[..4];
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for &id in ids {
        let (f, l) = b.dataset.classification_sample(id).unwrap();
        data.extend(f.iter().map(|&v| v as f64));
        targets.push(l);
    }
    let probe = ClassQueryLoss {
        model: b.model.convert::<f64>(),
        queries: b.queries.clone(),
        images: Tensor::from_vec(&[ids.len(), d], data).unwrap(),
        targets,
        m: 1,
    };
    let params = b.learned.table().convert::<f64>();
    let mut group = c.benchmark_group("finite_difference");
    group.sample_size(10);
    group.bench_function("full_table", |bench| {
        bench.iter_batched(
            || params.clone(),
            |p| finite_difference_check(&probe, &p, 1e-4).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, encode_batch, evaluation, gradcheck_sweep);
criterion_main!(benches);
