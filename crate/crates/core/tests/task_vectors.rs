// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::model;
use entlens::representations::{extract_layers, train_cleaning, CleaningHyper, RepCache};
use entlens::task_vectors::{
    decode_mention, tv_similarity_matrix, train_task_vector, DecodingConfig, Setting, TaskVector, TvHyper,
};
use entlens::{RepKind, Split};

fn hyper(epochs: usize) -> TvHyper {
    TvHyper {
        epochs,
        learning_rate: 0.03,
        batch_size: 4,
        ..TvHyper::default()
    }
}

#[test]
fn training_lowers_the_loss_and_keeps_the_best_epoch() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Train).into_iter().take(16).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    for setting in [Setting::Uncontextual, Setting::Contextual] {
        let tv = train_task_vector(&h, &samples, &reps, setting, &hyper(3)).unwrap();
        let meta = tv.meta.as_ref().unwrap();
        assert_eq!(meta.epoch_losses.len(), 3);
        assert!(meta.best_epoch >= 1, "{:?}", meta.epoch_losses);
        assert_eq!(meta.epoch_losses[meta.best_epoch - 1], meta.final_loss);
        assert!(meta.epoch_losses.iter().all(|&l| l >= meta.final_loss));
        assert!(meta.epoch_losses[2] < meta.epoch_losses[0], "{:?}", meta.epoch_losses);
        assert_eq!(tv.layer, 2);
        assert_eq!(tv.setting, setting);
        assert!(meta.aborted.is_none());
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Train).into_iter().take(8).collect();
    let reps = extract_layers(&h, &samples, &[1], RepKind::Average).unwrap().remove(0);
    let a = train_task_vector(&h, &samples, &reps, Setting::Uncontextual, &hyper(2)).unwrap();
    let b = train_task_vector(&h, &samples, &reps, Setting::Uncontextual, &hyper(2)).unwrap();
    assert_eq!(a.theta, b.theta);
    let c = train_task_vector(&h, &samples, &reps, Setting::Uncontextual, &TvHyper { seed: 5, ..hyper(2) }).unwrap();
    assert_ne!(a.theta, c.theta);
}

#[test]
fn checkpoints_round_trip() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Train).into_iter().take(4).collect();
    let reps = extract_layers(&h, &samples, &[3], RepKind::Last).unwrap().remove(0);
    let tv = train_task_vector(&h, &samples, &reps, Setting::Contextual, &hyper(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join(TaskVector::file_stem(tv.setting, tv.layer));
    tv.save(&stem).unwrap();
    assert_eq!(TaskVector::load(&stem).unwrap(), tv);
    assert!(TaskVector::load(&dir.path().join("missing")).is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Train).into_iter().take(4).collect();
    let reps = extract_layers(&h, &samples, &[1, 2], RepKind::Last).unwrap();
    assert!(train_task_vector(&h, &samples[..3], &reps[0], Setting::Uncontextual, &hyper(1)).is_err());
    let mixed = vec![reps[0][0].clone(), reps[1][1].clone(), reps[0][2].clone(), reps[0][3].clone()];
    assert!(train_task_vector(&h, &samples, &mixed, Setting::Uncontextual, &hyper(1)).is_err());
    assert!(train_task_vector(&h, &[], &[], Setting::Uncontextual, &hyper(1)).is_err());

    let tv = TaskVector::random(&h, 1, Setting::Contextual, 0);
    let cfg = DecodingConfig::default();
    assert!(decode_mention(&h, &tv, &reps[0][0], None, &cfg).is_err());
    assert!(decode_mention(&h, &tv, &reps[0][0], Some(&samples[0]), &cfg).is_ok());
    let bad = DecodingConfig {
        max_new_tokens: 0,
        ..DecodingConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn decoding_stops_within_budget() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(5).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    let tv = TaskVector::random(&h, 2, Setting::Uncontextual, 3);
    let cfg = DecodingConfig {
        max_new_tokens: 3,
        ..DecodingConfig::default()
    };
    for r in &reps {
        let m = decode_mention(&h, &tv, r, None, &cfg).unwrap();
        let long = decode_mention(&h, &tv, r, None, &DecodingConfig::default()).unwrap();
        assert!(!m.contains('\n'));
        assert!(long.starts_with(&m), "{m:?} vs {long:?}");
        assert_eq!(m, m.trim());
    }
    let sims = tv_similarity_matrix(&[tv.clone(), TaskVector::random(&h, 3, Setting::Uncontextual, 4)]).unwrap();
    assert!((sims[0][0] - 1.0).abs() < 1e-5);
}

#[test]
fn representation_cache_reuses_extractions() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Test).into_iter().take(6).collect();
    let dir = tempfile::tempdir().unwrap();
    let cache = RepCache::new(dir.path());
    let a = cache.get_or_extract(&h, &samples, &[0, 2], RepKind::Average).unwrap();
    let b = cache.get_or_extract(&h, &samples, &[2, 0], RepKind::Average).unwrap();
    assert_eq!(a[0], b[1]);
    assert_eq!(a[1], b[0]);
    let direct = extract_layers(&h, &samples, &[2], RepKind::Average).unwrap();
    assert_eq!(direct[0], a[1]);
    // Layer-0 average of a one-token mention equals its embedding.
    for (s, r) in samples.iter().zip(&a[0]) {
        if s.mention_len() == Some(1) {
            let id = h.tokenize(&s.text).unwrap().ids[s.token_span.unwrap().0];
            assert_eq!(r.vector, h.model().embedding_row(id));
        }
    }
}

#[test]
fn cleaning_map_trains_from_identity() {
    let h = model();
    let samples: Vec<_> = common::samples(&h, Split::Train).into_iter().take(12).collect();
    let reps = extract_layers(&h, &samples, &[2], RepKind::Last).unwrap().remove(0);
    let tv = train_task_vector(&h, &samples, &reps, Setting::Uncontextual, &hyper(2)).unwrap();
    let too_strict = CleaningHyper::default();
    assert!(train_cleaning(&h, &tv, &samples, &reps, &too_strict).is_err());
    let hyper = CleaningHyper {
        epochs: 2,
        min_samples: 10,
        batch_size: 4,
        learning_rate: 1e-3,
        ..CleaningHyper::default()
    };
    let map = train_cleaning(&h, &tv, &samples, &reps, &hyper).unwrap();
    let cleaned = map.apply(&reps[0]).unwrap();
    assert_eq!(cleaned.kind, RepKind::CleanedLast);
    assert_eq!(cleaned.cleaning_id.as_deref(), Some(map.id.as_str()));
    let meta = map.meta.as_ref().unwrap();
    assert!(meta.epoch_losses.last().unwrap() <= &meta.epoch_losses[0]);
}
