// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::HashSet;

use common::{fixtures, model, oracle};
use entlens::corpus::{
    align_all, align_with_tokens, corpus_hash, make_control_corpus, parse_conll, parse_conll_str, read_jsonl,
    stats, write_jsonl, EntitySample,
};
use entlens::Split;

fn count_entities(path: &std::path::Path) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| l.split_whitespace().last().is_some_and(|t| t.starts_with("B-")))
        .count()
}

#[test]
fn parses_fixture_files_one_sample_per_entity() {
    for split in [Split::Train, Split::Test] {
        let path = fixtures().join("conll").join(format!("{split}.txt"));
        let parsed = parse_conll(&path, split).unwrap();
        assert_eq!(parsed.samples.len(), count_entities(&path));
        assert!(parsed.warnings.is_empty(), "{:?}", parsed.warnings);
        for s in &parsed.samples {
            assert_eq!(s.span_text(), s.mention);
            assert_eq!(s.split, split);
            assert!(!s.text.contains("-DOCSTART-"));
        }
        let ids: HashSet<_> = parsed.samples.iter().map(|s| &s.sample_id).collect();
        assert_eq!(ids.len(), parsed.samples.len());
    }
}

#[test]
fn alignment_matches_exhaustive_reference() {
    let h = model();
    let cases = oracle("alignment.json");
    let cases = cases.as_array().unwrap();
    assert!(cases.len() > 500);
    let mut last: Option<(String, entlens::model::TokenSequence)> = None;
    for c in cases {
        let text = c["text"].as_str().unwrap().to_string();
        if last.as_ref().map(|(t, _)| t != &text).unwrap_or(true) {
            last = Some((text.clone(), h.tokenize(&text).unwrap()));
        }
        let toks = &last.as_ref().unwrap().1;
        let span = (c["char_span"][0].as_u64().unwrap() as usize, c["char_span"][1].as_u64().unwrap() as usize);
        let sample = EntitySample {
            mention: text.chars().skip(span.0).take(span.1 - span.0).collect(),
            text: text.clone(),
            char_span: span,
            token_span: None,
            category: "X".into(),
            split: Split::Test,
            sample_id: "t".into(),
        };
        let got = align_with_tokens(toks, &sample).ok().and_then(|s| s.token_span);
        let want = c["token_span"]
            .as_array()
            .map(|a| (a[0].as_u64().unwrap() as usize, a[1].as_u64().unwrap() as usize));
        assert_eq!(got, want, "{text:?} {span:?}");
    }
}

#[test]
fn aligned_spans_decode_to_the_mention() {
    let h = model();
    let path = fixtures().join("conll/test.txt");
    let parsed = parse_conll(&path, Split::Test).unwrap();
    let report = align_all(&h, &parsed.samples);
    assert!(report.drop_rate() < 0.05, "drop rate {}", report.drop_rate());
    for s in &report.aligned {
        let (a, b) = s.token_span.unwrap();
        let ids = h.tokenize(&s.text).unwrap().ids;
        assert_eq!(h.detokenize(&ids[a..=b]).unwrap().trim(), s.mention);
    }
}

#[test]
fn stats_are_consistent() {
    let h = model();
    let samples = common::samples(&h, Split::Train);
    let st = stats(&h, &samples).unwrap();
    assert_eq!(st.n_samples, samples.len());
    assert_eq!(st.length_histogram.values().sum::<usize>(), samples.len());
    let unique: HashSet<_> = samples.iter().map(|s| &s.mention).collect();
    assert_eq!(st.n_unique_mentions, unique.len());
    let mut lens: Vec<usize> = samples.iter().map(|s| s.mention_len().unwrap()).collect();
    lens.sort_unstable();
    assert_eq!(st.median_mention_tokens, lens[(lens.len() - 1) / 2]);
}

#[test]
fn jsonl_round_trip_preserves_hash() {
    let h = model();
    let samples = common::samples(&h, Split::Test);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_jsonl(&path, &samples).unwrap();
    let back = read_jsonl(&path).unwrap();
    assert_eq!(back, samples);
    assert_eq!(corpus_hash(&back), corpus_hash(&samples));
}

#[test]
fn control_corpus_spans_are_whole_tokens_of_length_k() {
    let h = model();
    let samples = common::samples(&h, Split::Test);
    for k in 1..=3 {
        let ctl = make_control_corpus(&h, &samples, k, 4).unwrap();
        assert!(!ctl.is_empty());
        for s in &ctl {
            let (a, b) = s.token_span.unwrap();
            assert_eq!(b - a + 1, k);
            assert_eq!(s.span_text(), s.mention);
            assert_eq!(s.category, "CONTROL");
        }
        assert_eq!(ctl, make_control_corpus(&h, &samples, k, 4).unwrap());
    }
}

#[test]
fn malformed_input_is_reported() {
    assert!(parse_conll_str("EU NNP B-NP Q-ORG\n", Split::Train, "mem").is_err());
    let p = parse_conll_str("Kohl NNP I-NP I-PER\nsaid VBD I-VP O\n", Split::Train, "mem").unwrap();
    assert_eq!(p.samples.len(), 1);
    assert_eq!(p.warnings.len(), 1);
    assert!(parse_conll(std::path::Path::new("/nonexistent/x.txt"), Split::Train).is_err());
}
