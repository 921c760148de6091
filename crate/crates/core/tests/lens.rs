// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::HashSet;

use common::model;
use entlens::lens::{compute_grid, logit_lens_top, render_html, render_term, LensOptions, TaskVectorSet, TvPolicy};
use entlens::model::{HiddenState, MixedInput, Provenance};
use entlens::task_vectors::{Setting, TaskVector};

const TEXT: &str = "The Eiffel Tower is located in";

fn tvs(h: &entlens::ModelHandle, layers: &[usize]) -> TaskVectorSet {
    let mut set = TaskVectorSet::default();
    for &l in layers {
        set.insert(TaskVector::random(h, l, Setting::Uncontextual, l as u64));
    }
    set
}

#[test]
fn grid_shape_matches_layers_and_tokens() {
    let h = model();
    let set = tvs(&h, &[0, 1, 2]);
    let n = h.tokenize(TEXT).unwrap().len();
    let layers = [0, 2, 4];
    let g = compute_grid(&h, TEXT, &set, &layers, &LensOptions::default()).unwrap();
    assert_eq!(g.shape(), (3, n));
    assert_eq!(g.tokens.len(), n);
    // Layer 4 has no task vector: cells fail but keep their logit token.
    assert!(g.cells[2].iter().all(|c| c.failed.is_some() && c.mention.is_none()));
    assert!(g.cells[0].iter().all(|c| c.failed.is_none() && c.mention.is_some()));
    assert!(g.cells.iter().flatten().all(|c| c.latency_ms.is_none()));
    assert_eq!(g.task_vector_ids[2], None);

    let one = compute_grid(&h, "Paris", &set, &[1], &LensOptions::default()).unwrap();
    assert_eq!(one.shape(), (1, h.tokenize("Paris").unwrap().len()));
}

#[test]
fn final_layer_logit_lens_is_the_greedy_next_token() {
    let h = model();
    let set = tvs(&h, &[1]);
    let ids = h.tokenize(TEXT).unwrap().ids;
    let g = compute_grid(&h, TEXT, &set, &[h.n_layers()], &LensOptions::default()).unwrap();
    let next = h
        .generate_greedy(&MixedInput::from_tokens(&ids), 1, &HashSet::new())
        .unwrap();
    let want = h.tokenizer().token_text(next.ids[0]);
    assert_eq!(g.cells[0].last().unwrap().logit_top, want);
}

#[test]
fn grids_are_deterministic_and_shared_policy_keeps_shape() {
    let h = model();
    let set = tvs(&h, &[0, 1, 2, 3, 4]);
    let layers: Vec<usize> = (0..=h.n_layers()).collect();
    let a = compute_grid(&h, TEXT, &set, &layers, &LensOptions::default()).unwrap();
    let b = compute_grid(&h, TEXT, &set, &layers, &LensOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let shared = LensOptions {
        tv_policy: TvPolicy::Shared(2),
        ..LensOptions::default()
    };
    let s = compute_grid(&h, TEXT, &set, &layers, &shared).unwrap();
    assert_eq!(s.shape(), a.shape());
    assert!(s.task_vector_ids.iter().all(|id| id.as_deref() == Some("tv-uncontextual-L2")));
    assert_eq!(s.cells[2], a.cells[2]);
    assert_ne!(s.config_hash, a.config_hash);
}

#[test]
fn renderers_escape_and_align() {
    let h = model();
    let set = tvs(&h, &[1]);
    let g = compute_grid(&h, "<b> & Paris", &set, &[1], &LensOptions::default()).unwrap();
    let html = render_html(&g);
    assert!(html.starts_with("<!DOCTYPE html>"));
    assert!(!html.contains("<b>"));
    let term = render_term(&g);
    assert!(term.lines().count() >= 2);
}

#[test]
fn logit_lens_handles_degenerate_input() {
    let h = model();
    let hs = HiddenState {
        vector: vec![0.0; h.d_model()],
        layer: 0,
        position: 0,
        provenance: Provenance {
            model_id: h.model_id.clone(),
            prompt_hash: String::new(),
        },
    };
    let a = logit_lens_top(&h, &hs, true).unwrap();
    let b = logit_lens_top(&h, &hs, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_layers_are_rejected() {
    let h = model();
    let set = tvs(&h, &[1]);
    assert!(compute_grid(&h, TEXT, &set, &[], &LensOptions::default()).is_err());
    assert!(compute_grid(&h, TEXT, &set, &[h.n_layers() + 1], &LensOptions::default()).is_err());
}
