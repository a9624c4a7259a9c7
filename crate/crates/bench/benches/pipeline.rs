use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use docloc_bench::{corpus, oracle_pipeline};
use docloc_core::detection::reference_detect;
use docloc_core::model::prompt_answer_extraction;
use docloc_core::{build_constructed_image, run, LayoutConfig, Mode, PromptContext, ReferenceParams};

fn bench_stages(c: &mut Criterion) {
    let corpus = corpus(1);
    let rec = &corpus.records[0];
    let image = corpus.image(&rec.doc_id).unwrap();
    let params = ReferenceParams::default();
    let regions = reference_detect(&image, &params).unwrap();
    let layout = LayoutConfig::default();
    let ctx = PromptContext::default();

    c.bench_function("reference_detect", |b| {
        b.iter(|| reference_detect(black_box(&image), &params).unwrap())
    });
    c.bench_function("constructed_image", |b| {
        b.iter(|| build_constructed_image(&rec.doc_id, black_box(&regions), &layout).unwrap())
    });
    c.bench_function("extraction_request_wire_body", |b| {
        b.iter(|| {
            prompt_answer_extraction(black_box(&image), &rec.question, &ctx, "bench")
                .unwrap()
                .wire_body()
        })
    });
}

fn bench_end_to_end(c: &mut Criterion) {
    let corpus = corpus(1);
    let rec = &corpus.records[0];
    let image = corpus.image(&rec.doc_id).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(20);
    for mode in [Mode::OcrDependent, Mode::OcrFree] {
        let cfg = oracle_pipeline(&corpus, mode);
        group.bench_function(mode.to_string(), |b| {
            b.iter(|| run(black_box(&image), &rec.question_id, &rec.question, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_stages, bench_end_to_end);
criterion_main!(benches);
