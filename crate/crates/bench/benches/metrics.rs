use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use docloc_bench::corpus;
use docloc_core::model::{parse_grounded_answer, ParseContext};
use docloc_core::{anls_score, iou, map_at_iou, score_run, AnlsConfig, BBox, Prediction, ScoreConfig};

fn bench_anls(c: &mut Criterion) {
    let cfg = AnlsConfig::default();
    let mut group = c.benchmark_group("anls");
    for len in [8usize, 32, 128] {
        let gold: String = "THE STATE OF TEXAS ".chars().cycle().take(len).collect();
        let pred: String = gold.chars().rev().collect();
        let golds = vec![gold.clone(), gold.to_lowercase()];
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| anls_score(black_box(&pred), black_box(&golds), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_boxes(c: &mut Criterion) {
    let pairs: Vec<(Option<BBox>, BBox)> = (0..1000u32)
        .map(|i| {
            let g = BBox::new(i % 97, i % 53, i % 97 + 40, i % 53 + 20).unwrap();
            let p = BBox::new(i % 89, i % 47, i % 89 + 44, i % 47 + 18).unwrap();
            ((i % 10 != 0).then_some(p), g)
        })
        .collect();
    c.bench_function("iou", |b| {
        let (p, g) = (pairs[1].0.unwrap(), pairs[1].1);
        b.iter(|| iou(black_box(&p), black_box(&g)))
    });
    c.bench_function("map_at_iou/1000", |b| b.iter(|| map_at_iou(black_box(&pairs)).unwrap()));
}

fn bench_score_run(c: &mut Criterion) {
    let corpus = corpus(20);
    let preds: Vec<Prediction> = corpus
        .records
        .iter()
        .map(|r| Prediction {
            answer: r.gold_answers[0].clone(),
            answer_box: r.gold_box,
            ..Prediction::empty(r.question_id.clone())
        })
        .collect();
    let cfg = ScoreConfig::default();
    c.bench_function(&format!("score_run/{}", preds.len()), |b| {
        b.iter(|| score_run(black_box(&preds), &corpus.records, &cfg).unwrap())
    });
}

fn bench_repair(c: &mut Criterion) {
    let ctx = ParseContext {
        expects_box: true,
        valid_ids: None,
    };
    let inputs = [
        ("strict", r#"{"answer": "11,000", "region_ids": [3, 4]}"#),
        (
            "fenced",
            "```json\n{\"answer\": \"11,000\", \"box\": [10, 20, 90, 40]}\n```",
        ),
        (
            "relaxed",
            "Sure! {answer: 'Jan 12, 1999', regions: [B3, B4,], // done\n",
        ),
    ];
    let mut group = c.benchmark_group("repair");
    for (name, raw) in inputs {
        group.bench_function(name, |b| {
            b.iter(|| parse_grounded_answer(black_box(raw), &ctx).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_anls, bench_boxes, bench_score_run, bench_repair);
criterion_main!(benches);
