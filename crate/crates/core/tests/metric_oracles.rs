// SPDX-License-Identifier: MIT OR Apache-2.0

//! chrF, Spearman and Adam against values frozen from reference libraries.

mod common;

use common::{f32s, oracle};
use entlens::evaluation::{chr_f, exact_match, spearman};
use entlens::optim::Adam;

#[test]
fn chrf_matches_reference_on_random_pairs() {
    let cases = oracle("chrf.json");
    let cases = cases.as_array().unwrap();
    assert!(cases.len() >= 1000);
    let mut worst = 0f64;
    for c in cases {
        let pred = c["pred"].as_str().unwrap();
        let gold = c["gold"].as_str().unwrap();
        let want = c["chrf"].as_f64().unwrap();
        let got = chr_f(pred, gold);
        assert!((got - want).abs() < 1e-9, "{pred:?} vs {gold:?}: {got} != {want}");
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-9);
}

#[test]
fn chrf_rewards_near_misses() {
    let near = chr_f("Geston", "Gaston");
    assert!(near > 0.0 && near < 1.0);
    assert_eq!(chr_f("Gaston", "Gaston"), 1.0);
}

#[test]
fn exact_match_documented_examples() {
    assert!(exact_match("Paris", "Paris"));
    assert!(!exact_match("New York City", "NYC"));
    assert!(exact_match(" Paris ", "Paris"));
    assert!(exact_match("  Helmut   Kohl ", "Helmut Kohl"));
}

#[test]
fn spearman_matches_reference_with_ties() {
    for c in oracle("spearman.json").as_array().unwrap() {
        let x: Vec<f64> = c["x"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let y: Vec<f64> = c["y"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let got = spearman(&x, &y);
        match c["rho"].as_f64() {
            Some(want) => {
                let got = got.unwrap_or_else(|| panic!("no rho for {x:?} {y:?}"));
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
            None => assert!(got.is_none(), "expected undefined rho for {x:?} {y:?}"),
        }
    }
}

#[test]
fn adam_matches_reference_trajectory() {
    let o = oracle("adam.json");
    let lr = o["lr"].as_f64().unwrap() as f32;
    let steps = o["steps"].as_array().unwrap();
    let mut p = vec![0f32; 6];
    let mut opt = Adam::new(6, lr);
    for s in steps {
        opt.step(&mut p, &f32s(&s["grad"]));
        let want = f32s(&s["param"]);
        for (a, b) in p.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
