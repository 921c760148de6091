// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{fixtures, model};
use entlens::evaluation::{
    bucket_report, cross_setting_matrix, evaluate, evaluate_cached, read_count_table, row_spearman,
    sweep_layers, write_csv, FreqSource, FrequencyClient, FrequencyConfig,
};
use entlens::representations::{extract_layers, RepCache};
use entlens::task_vectors::{DecodingConfig, Setting, TaskVector};
use entlens::{Error, RepKind, Split};

fn decoding() -> DecodingConfig {
    DecodingConfig {
        max_new_tokens: 6,
        ..DecodingConfig::default()
    }
}

#[test]
fn evaluate_scores_every_sample() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(12).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    let tv = TaskVector::random(&h, 2, Setting::Uncontextual, 1);
    let report = evaluate(&h, &tv, &samples, &reps, &decoding()).unwrap();
    assert_eq!(report.per_layer.len(), 1);
    let score = &report.per_layer[0];
    assert_eq!(score.n, 12);
    assert_eq!(report.best_layer, Some(2));
    assert_eq!(report.chrf_order, 6);
    assert_eq!(report.chrf_beta, 3.0);
    let em = score.samples.iter().filter(|s| s.em).count() as f64 / 12.0;
    assert!((score.em - em).abs() < 1e-12);
    let chrf = score.samples.iter().map(|s| s.chrf).sum::<f64>() / 12.0;
    assert!((score.chrf - chrf).abs() < 1e-12);
    for s in &score.samples {
        assert_eq!(s.em, s.prediction == s.mention);
        assert!((0.0..=1.0).contains(&s.chrf));
    }

    let again = evaluate(&h, &tv, &samples, &reps, &decoding()).unwrap();
    assert_eq!(again.per_layer, report.per_layer);
    assert_eq!(again.config_hash, report.config_hash);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    write_csv(&csv, &report).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn evaluate_cached_requires_a_populated_cache() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(5).collect();
    let dir = tempfile::tempdir().unwrap();
    let cache = RepCache::new(dir.path());
    let tv = TaskVector::random(&h, 1, Setting::Uncontextual, 1);
    let err = evaluate_cached(&h, &tv, &samples, &cache, RepKind::Last, &decoding()).unwrap_err();
    assert!(matches!(err, Error::CacheMiss(_)), "{err}");
    cache.get_or_extract(&h, &samples, &[1], RepKind::Last).unwrap();
    let r = evaluate_cached(&h, &tv, &samples, &cache, RepKind::Last, &decoding()).unwrap();
    assert_eq!(r.per_layer[0].n, 5);
}

#[test]
fn sweep_lists_missing_layers() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(6).collect();
    let layers = [0, 2];
    let reps = extract_layers(&h, &samples, &layers, RepKind::Average).unwrap();
    let by_layer: BTreeMap<usize, _> = layers.iter().copied().zip(reps).collect();
    let tvs: Vec<_> = [0, 2, 3]
        .iter()
        .map(|&l| TaskVector::random(&h, l, Setting::Uncontextual, l as u64))
        .collect();
    let report = sweep_layers(&h, &tvs, &samples, &by_layer, &decoding()).unwrap();
    let got: Vec<usize> = report.per_layer.iter().map(|s| s.layer).collect();
    assert_eq!(got, vec![0, 2]);
    let expected_missing: Vec<usize> = (0..=h.n_layers()).filter(|l| !layers.contains(l)).collect();
    assert_eq!(report.missing_layers, expected_missing);
    assert_eq!(report.rep_kind, RepKind::Average);

    let mixed = vec![tvs[0].clone(), TaskVector::random(&h, 2, Setting::Contextual, 0)];
    assert!(sweep_layers(&h, &mixed, &samples, &by_layer, &decoding()).is_err());
}

#[test]
fn cross_setting_matrix_has_three_rows() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(4).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    let unc = TaskVector::random(&h, 2, Setting::Uncontextual, 10);
    let ctx = TaskVector::random(&h, 2, Setting::Contextual, 11);
    let t = cross_setting_matrix(&h, &unc, &ctx, &samples, &reps, &decoding(), 0).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(names, ["uncontextual", "contextual", "random"]);
    let other = TaskVector::random(&h, 3, Setting::Contextual, 11);
    assert!(cross_setting_matrix(&h, &unc, &other, &samples, &reps, &decoding(), 0).is_err());
}

#[test]
fn offline_buckets_from_count_table() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(60).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    let tv = TaskVector::random(&h, 2, Setting::Uncontextual, 1);
    let report = evaluate(&h, &tv, &samples, &reps, &decoding()).unwrap();

    let client = FrequencyClient::new(FrequencyConfig {
        offline: true,
        offline_table: Some(fixtures().join("counts.tsv")),
        ..FrequencyConfig::default()
    });
    let mentions: Vec<String> = samples.iter().map(|s| s.mention.clone()).collect();
    let freqs = client.fetch(&mentions).unwrap();
    assert_eq!(client.requests_made(), 0);
    assert_eq!(freqs.len(), mentions.len());
    assert!(freqs.iter().all(|f| f.source == Some(FreqSource::OfflineStub)));

    let bucketed = bucket_report(&report, &freqs, 4, 3).unwrap();
    let b = bucketed.buckets.as_ref().unwrap();
    assert_eq!(b.frequency_coverage, 1.0);
    let total: usize = b.cells.iter().map(|c| c.n).sum();
    assert_eq!(total + b.n_unbucketed, 60);
    for c in &b.cells {
        assert!(c.length >= 1 && c.length <= 3);
        assert!(c.quantile_bin < 4);
        assert_eq!(c.suppressed, c.n < 5);
    }
    let populated = b.populated().count();
    let rows = row_spearman(b);
    assert_eq!(rows.values().map(|r| r.0).sum::<usize>(), populated);

    let sparse: Vec<_> = freqs.iter().take(10).cloned().collect();
    assert!(bucket_report(&report, &sparse, 4, 3).is_err());
    assert!(bucket_report(&report, &freqs, 0, 3).is_err());
}

#[test]
fn count_tables_reject_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.tsv");
    std::fs::write(&p, "# header\nParis\t12\n\nNew York\t7\n").unwrap();
    let t = read_count_table(&p).unwrap();
    assert_eq!(t["New York"], 7);
    std::fs::write(&p, "Paris 12\n").unwrap();
    assert!(read_count_table(&p).is_err());
    std::fs::write(&p, "Paris\tmany\n").unwrap();
    assert!(read_count_table(&p).is_err());
    let client = FrequencyClient::new(FrequencyConfig::default());
    assert!(client.fetch(&["Paris".into()]).is_err());
}

/// Serves `{"count": len(q)}` (or `{"hits": ...}` when `alt`), failing the
/// first `fail_first` requests with a 500.
fn mock_server(fail_first: usize, alt: bool) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/count", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                    break;
                }
            }
            let n = seen.fetch_add(1, Ordering::SeqCst);
            let target = line.split_whitespace().nth(1).unwrap_or("");
            let q = target.split_once("q=").map(|p| p.1).unwrap_or("");
            let q = q.replace('+', " ");
            let decoded = percent_decode(&q);
            let (status, body) = if n < fail_first {
                ("500 Internal Server Error", "{}".to_string())
            } else if alt {
                ("200 OK", format!("{{\"hits\": {}}}", decoded.len()))
            } else {
                ("200 OK", format!("{{\"count\": {}}}", decoded.len()))
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, hits)
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).unwrap();
            out.push(u8::from_str_radix(hex, 16).unwrap());
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).unwrap()
}

fn remote_config(url: &str, cache: &std::path::Path) -> FrequencyConfig {
    FrequencyConfig {
        base_url: Some(url.into()),
        cache_dir: Some(cache.to_path_buf()),
        backoff_ms: 1,
        timeout_secs: 5.0,
        ..FrequencyConfig::default()
    }
}

#[test]
fn remote_counts_are_cached() {
    let (url, hits) = mock_server(0, false);
    let dir = tempfile::tempdir().unwrap();
    let mentions: Vec<String> = ["Paris", "New York", "Paris", "Kohl"].iter().map(|s| s.to_string()).collect();

    let client = FrequencyClient::new(remote_config(&url, dir.path()));
    let first = client.fetch(&mentions).unwrap();
    assert_eq!(client.requests_made(), 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let counts: Vec<_> = first.iter().map(|r| r.count).collect();
    assert_eq!(counts, vec![Some(5), Some(8), Some(5), Some(4)]);
    assert!(first.iter().all(|r| r.source == Some(FreqSource::Remote)));
    assert_eq!(first[3].quantile, Some(0.0));
    assert_eq!(first[0].quantile, Some(0.25));
    assert_eq!(first[1].quantile, Some(0.75));

    let second = FrequencyClient::new(remote_config(&url, dir.path()));
    let again = second.fetch(&mentions).unwrap();
    assert_eq!(second.requests_made(), 0);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert!(again.iter().all(|r| r.source == Some(FreqSource::Cache)));
    assert_eq!(
        again.iter().map(|r| r.count).collect::<Vec<_>>(),
        counts
    );

    let offline = FrequencyClient::new(FrequencyConfig {
        offline: true,
        offline_table: Some(fixtures().join("counts.tsv")),
        ..remote_config(&url, dir.path())
    });
    offline.fetch(&mentions).unwrap();
    assert_eq!(offline.requests_made(), 0);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn failed_requests_are_retried() {
    let (url, hits) = mock_server(2, false);
    let dir = tempfile::tempdir().unwrap();
    let client = FrequencyClient::new(FrequencyConfig {
        concurrency: 1,
        ..remote_config(&url, dir.path())
    });
    let r = client.fetch(&["Bonn".into()]).unwrap();
    assert_eq!(r[0].count, Some(4));
    assert_eq!(client.requests_made(), 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, _) = mock_server(usize::MAX, false);
    let client = FrequencyClient::new(FrequencyConfig {
        retries: 1,
        ..remote_config(&url, dir.path())
    });
    let r = client.fetch(&["Lyon".into()]).unwrap();
    assert_eq!(r[0].count, None);
    assert_eq!(r[0].quantile, None);
    assert!(r[0].error.is_some());
    assert_eq!(client.requests_made(), 2);
}

#[test]
fn custom_parsers_read_other_schemas() {
    let (url, _) = mock_server(0, true);
    let dir = tempfile::tempdir().unwrap();
    let plain = FrequencyClient::new(remote_config(&url, dir.path()));
    let r = plain.fetch(&["Rome".into()]).unwrap();
    assert_eq!(r[0].count, None);
    let custom = FrequencyClient::new(remote_config(&url, dir.path()))
        .with_parser(Box::new(|v| v.get("hits").and_then(|h| h.as_u64())));
    let r = custom.fetch(&["Rome".into()]).unwrap();
    assert_eq!(r[0].count, Some(4));
}
