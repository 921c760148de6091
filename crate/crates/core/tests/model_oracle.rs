// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward passes, generation and input gradients against values frozen
//! from the reference implementation.

mod common;

use std::collections::HashSet;

use common::{f32s, max_rel_diff, model, oracle, u32s};
use entlens::model::{LogitRows, MixedInput};

#[test]
fn tokenizer_ids_and_offsets_match_reference() {
    let h = model();
    for case in oracle("hf_forward.json").as_array().unwrap() {
        let text = case["text"].as_str().unwrap();
        let toks = h.tokenize(text).unwrap();
        assert_eq!(toks.ids, u32s(&case["ids"]), "{text}");
        let offs: Vec<(usize, usize)> = case["offsets"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| (p[0].as_u64().unwrap() as usize, p[1].as_u64().unwrap() as usize))
            .collect();
        assert_eq!(toks.char_offsets, offs, "{text}");
    }
}

#[test]
fn logits_and_hidden_states_match_reference() {
    let h = model();
    for case in oracle("hf_forward.json").as_array().unwrap() {
        let ids = u32s(&case["ids"]);
        let out = h.trace_tokens(&ids, LogitRows::Last).unwrap();
        let last = ids.len() - 1;
        let logits = out.logits_at(last, h.vocab_size()).unwrap();
        let rel = max_rel_diff(logits, &f32s(&case["logits_last"]));
        assert!(rel < 1e-4, "logits rel diff {rel}");
        for (layer, want) in case["hidden_last"].as_array().unwrap().iter().enumerate() {
            let mut got = out.residual(layer, last).to_vec();
            // The reference reports the last layer after the final norm.
            if layer == h.n_layers() {
                got = h.model().final_norm.apply(&got, h.d_model());
            }
            let rel = max_rel_diff(&got, &f32s(want));
            assert!(rel < 1e-4, "layer {layer} rel diff {rel}");
        }
    }
}

#[test]
fn greedy_generation_matches_reference() {
    let h = model();
    for case in oracle("hf_forward.json").as_array().unwrap() {
        let ids = u32s(&case["ids"]);
        let g = h
            .generate_greedy(&MixedInput::from_tokens(&ids), 10, &HashSet::new())
            .unwrap();
        assert_eq!(g.ids, u32s(&case["greedy10"]), "{}", case["text"]);
    }
}

#[test]
fn input_gradients_match_reference() {
    let h = model();
    let d = h.d_model();
    for case in oracle("input_grad.json").as_array().unwrap() {
        let ctx = u32s(&case["context_ids"]);
        let gold = u32s(&case["gold"]);
        let mut input = MixedInput::from_tokens(&ctx);
        input.push_vector(f32s(&case["z"]));
        input.push_vector(f32s(&case["theta"]));
        for &g in &gold[..gold.len() - 1] {
            input.push_token(g);
        }
        let rows = h.embed_mixed(&input).unwrap();
        let (loss, grad) = h.loss_and_input_grad(&rows, ctx.len() + 1, &gold);
        let want = case["loss"].as_f64().unwrap() as f32;
        assert!((loss - want).abs() / want.abs() < 1e-4, "loss {loss} vs {want}");
        let z = ctx.len();
        let gz = &grad[z * d..(z + 1) * d];
        let gt = &grad[(z + 1) * d..(z + 2) * d];
        let rz = max_rel_diff(gz, &f32s(&case["grad_z"]));
        let rt = max_rel_diff(gt, &f32s(&case["grad_theta"]));
        assert!(rz < 1e-3, "grad z rel diff {rz}");
        assert!(rt < 1e-3, "grad theta rel diff {rt}");
    }
}

#[test]
fn embedding_injection_reproduces_token_forward() {
    let h = model();
    let ids = h.tokenize("Helmut Kohl told reporters in Bonn on Monday .").unwrap().ids;
    let plain = h.forward_mixed(&MixedInput::from_tokens(&ids)).unwrap();
    let mut injected = MixedInput::default();
    for &id in &ids {
        injected.push_vector(h.model().embedding_row(id).to_vec());
    }
    let mixed = h.forward_mixed(&injected).unwrap();
    assert_eq!(plain, mixed);
}

#[test]
fn kv_cache_generation_matches_full_recompute() {
    let h = model();
    let ids = h.tokenize("The Eiffel Tower is located in").unwrap().ids;
    let g = h
        .generate_greedy(&MixedInput::from_tokens(&ids), 6, &HashSet::new())
        .unwrap();
    let mut seq = ids.clone();
    for _ in 0..6 {
        let logits = h.forward_mixed(&MixedInput::from_tokens(&seq)).unwrap();
        let v = h.vocab_size();
        let last = &logits[(seq.len() - 1) * v..seq.len() * v];
        let next = last
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0 as u32;
        seq.push(next);
    }
    assert_eq!(g.ids, seq[ids.len()..]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let h = model();
    assert!(h.forward_mixed(&MixedInput::default()).is_err());
    let mut bad = MixedInput::default();
    bad.push_vector(vec![0.0; h.d_model() + 1]);
    assert!(h.forward_mixed(&bad).is_err());
    assert!(h.trace_tokens(&[h.vocab_size() as u32], LogitRows::None).is_err());
    let long = vec![1u32; h.max_context + 1];
    assert!(h.trace_tokens(&long, LogitRows::None).is_err());
}
