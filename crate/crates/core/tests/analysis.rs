// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{max_rel_diff, model};
use entlens::analysis::{knockout_effect, optimize_representation, sublayer_similarity, OptimizeHyper, SimilaritySpace};
use entlens::model::{LogitRows, SublayerKind};
use entlens::task_vectors::{Setting, TaskVector};
use entlens::Split;

const TEXT: &str = "Helmut Kohl told reporters in Bonn on Monday that the talks would continue .";

#[test]
fn residual_is_embedding_plus_sublayer_outputs() {
    let h = model();
    let toks = h.tokenize(TEXT).unwrap();
    let out = h.trace_tokens(&toks.ids, LogitRows::None).unwrap();
    for pos in [0, toks.len() / 2, toks.len() - 1] {
        let subs = h.capture_sublayer_outputs(&toks, pos).unwrap();
        assert_eq!(subs.len(), 2 * h.n_layers());
        let mut running = out.residual(0, pos).to_vec();
        for layer in 1..=h.n_layers() {
            for (tag, v) in &subs[2 * (layer - 1)..2 * layer] {
                assert_eq!(tag.layer, layer);
                for (r, x) in running.iter_mut().zip(v) {
                    *r += x;
                }
            }
            let rel = max_rel_diff(&running, out.residual(layer, pos));
            assert!(rel < 1e-4, "layer {layer} pos {pos}: {rel}");
        }
    }
}

#[test]
fn knockouts_after_the_observed_layer_change_nothing() {
    let h = model();
    let toks = h.tokenize(TEXT).unwrap();
    let pos = toks.len() - 1;
    for observe in 0..h.n_layers() {
        let clean = h.capture_hidden(&toks, observe, &[pos]).unwrap().remove(0);
        for knock in observe + 1..=h.n_layers() {
            for kind in [SublayerKind::Attention, SublayerKind::Mlp] {
                let k = h.knockout_observe(&toks, knock, kind, observe, pos).unwrap();
                assert_eq!(k.vector, clean.vector, "knock {knock} {kind} observe {observe}");
            }
        }
    }
    assert!(h.knockout_forward(&toks, 3, SublayerKind::Mlp, 2, pos).is_err());
    assert!(h.knockout_forward(&toks, 0, SublayerKind::Mlp, 2, pos).is_err());
}

#[test]
fn knockout_effect_covers_every_sublayer_up_to_the_target() {
    let h = model();
    let samples = common::samples(&h, Split::Test);
    let target = h.n_layers() / 2;
    let pts = knockout_effect(&h, &samples[0], target).unwrap();
    assert_eq!(pts.len(), 2 * target);
    assert!(pts.iter().all(|p| p.cosine <= 1.0 + 1e-5 && p.cosine.is_finite()));
    assert!(pts.iter().any(|p| p.cosine < 0.9999), "some knockout should matter");
}

#[test]
fn similarity_curve_reaches_one_at_the_target_layer() {
    let h = model();
    let target = h.n_layers() / 2;
    let pos = h.tokenize(TEXT).unwrap().len() - 1;
    for space in [SimilaritySpace::Residual, SimilaritySpace::Vocabulary] {
        let c = sublayer_similarity(&h, TEXT, pos, target, space).unwrap();
        assert_eq!(c.points.len(), 1 + 2 * h.n_layers());
        assert_eq!(c.points[0].0, "embed");
        let at_target = c.points[2 * target].1;
        assert!((at_target - 1.0).abs() < 1e-4, "{space:?}: {at_target}");
        let m = c.monotone_fraction();
        assert!((0.0..=1.0).contains(&m));
    }
    assert!(sublayer_similarity(&h, TEXT, 999, target, SimilaritySpace::Residual).is_err());
}

#[test]
fn optimized_vectors_decode_their_targets() {
    let h = model();
    let tv = TaskVector::random(&h, h.n_layers() / 2, Setting::Uncontextual, 1);
    let hyper = OptimizeHyper {
        max_steps: 1000,
        learning_rate: 0.05,
        ..OptimizeHyper::default()
    };
    for target in ["Paris", "Brian Maradona", "Paris Athletic"] {
        let r = optimize_representation(&h, &tv, target, 1, &hyper).unwrap();
        assert_eq!(r.decoded, target);
        assert_eq!(r.vector.len(), h.d_model());
    }
    let ctx = TaskVector::random(&h, 1, Setting::Contextual, 1);
    assert!(optimize_representation(&h, &ctx, "Paris", 1, &hyper).is_err());
}
