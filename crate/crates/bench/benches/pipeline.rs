// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use entlens::evaluation::chr_f;
use entlens::model::{LogitRows, MixedInput};
use entlens::representations::{Representation, RepKind};
use entlens::task_vectors::{decode_mention, DecodingConfig, Setting, TaskVector};
use entlens_bench::load_fixture_model;

const TEXT: &str = "German Chancellor Helmut Kohl told reporters in Berlin on Monday that the talks would continue .";

fn forward(c: &mut Criterion) {
    let h = load_fixture_model();
    let ids = h.tokenize(TEXT).unwrap().ids;
    c.bench_function("trace_tokens", |b| {
        b.iter(|| h.trace_tokens(black_box(&ids), LogitRows::Last).unwrap())
    });
    let input = MixedInput::from_tokens(&ids);
    c.bench_function("forward_mixed", |b| b.iter(|| h.forward_mixed(black_box(&input)).unwrap()));
}

fn decode(c: &mut Criterion) {
    let h = load_fixture_model();
    let tv = TaskVector::random(&h, 1, Setting::Uncontextual, 0);
    let rep = Representation {
        vector: h.model().embedding_row(100).to_vec(),
        kind: RepKind::Last,
        layer: 1,
        sample_id: "bench".into(),
        model_id: h.model_id.clone(),
        cleaning_id: None,
    };
    let cfg = DecodingConfig::default();
    c.bench_function("decode_mention", |b| {
        b.iter(|| decode_mention(&h, &tv, black_box(&rep), None, &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    c.bench_function("chr_f", |b| {
        b.iter(|| chr_f(black_box("Kohl's government in Bonn"), black_box("Helmut Kohl")))
    });
}

criterion_group!(benches, forward, decode, metrics);
criterion_main!(benches);
