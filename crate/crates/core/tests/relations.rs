// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{fixtures, model};
use entlens::relations::{
    filter_known, load_relation_dataset, object_representation, split_pairs, subject_representation,
    train_relation_map, RelationHyper,
};
use entlens::{RelationMap, RepKind, Representation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rep(v: Vec<f32>, id: usize) -> Representation {
    Representation {
        vector: v,
        kind: RepKind::Last,
        layer: 2,
        sample_id: format!("s{id}"),
        model_id: "synthetic".into(),
        cleaning_id: None,
    }
}

fn random_reps(n: usize, d: usize, seed: u64) -> Vec<Representation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| rep((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), i))
        .collect()
}

#[test]
fn constant_objects_reach_the_least_squares_optimum() {
    let d = 16;
    let subjects = random_reps(40, d, 1);
    let target: Vec<f32> = (0..d).map(|i| i as f32 * 0.1 - 0.5).collect();
    let objects: Vec<_> = (0..40).map(|i| rep(target.clone(), i)).collect();
    let map = train_relation_map(&subjects, &objects, "const", &RelationHyper::default()).unwrap();
    // The optimum is W = 0, b = target, with zero error.
    assert!(map.final_mse < 1e-6, "mse {}", map.final_mse);
    for s in &subjects {
        let p = map.apply_vec(&s.vector);
        for (a, b) in p.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn realizable_linear_maps_are_recovered() {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f32> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let c: Vec<f32> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let subjects = random_reps(60, d, 3);
    let objects: Vec<_> = subjects
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let v = (0..d)
                .map(|i| (0..d).map(|j| a[i * d + j] * s.vector[j]).sum::<f32>() + c[i])
                .collect();
            rep(v, k)
        })
        .collect();
    let hyper = RelationHyper {
        steps: 20000,
        learning_rate: 0.5,
        ..RelationHyper::default()
    };
    let map = train_relation_map(&subjects, &objects, "lin", &hyper).unwrap();
    assert!(map.final_mse < 1e-6, "mse {}", map.final_mse);
    assert!(map.final_mse < map.initial_mse);
}

#[test]
fn relation_map_checkpoint_round_trip() {
    let subjects = random_reps(10, 4, 5);
    let objects = random_reps(10, 4, 6);
    let map = train_relation_map(&subjects, &objects, "rt", &RelationHyper { steps: 10, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("map");
    map.save(&stem).unwrap();
    assert_eq!(RelationMap::load(&stem).unwrap(), map);
}

#[test]
fn fixture_dataset_loads_and_extracts() {
    let h = model();
    let data = load_relation_dataset(&fixtures().join("relations/landmark_in_country.json")).unwrap();
    assert_eq!(data.samples.len(), 32);
    let known = filter_known(&h, &data.samples).unwrap();
    assert!(known.len() <= data.samples.len());
    let (train, test) = split_pairs(&data.samples, 20).unwrap();
    assert_eq!(train.len(), 20);
    assert!(test.iter().all(|t| train.iter().all(|s| s.subject != t.subject)));
    let layer = h.n_layers() / 2;
    let s = subject_representation(&h, &train[0], layer, RepKind::Last).unwrap();
    let o = object_representation(&h, &train[0].object, &data.object_template, layer, RepKind::Average).unwrap();
    assert_eq!(s.vector.len(), h.d_model());
    assert_eq!(o.kind, RepKind::Average);
}

#[test]
fn malformed_datasets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"relation_id":"x","template":"no placeholder","pairs":[]}"#).unwrap();
    assert!(load_relation_dataset(&p).is_err());
    std::fs::write(&p, "not json").unwrap();
    assert!(load_relation_dataset(&p).is_err());
}
