// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use proptest::prelude::*;
use tomlens::model::{
    build_model, forward_logits, forward_with_hooks, score_answers, ModelConfig, ModelWeights,
};
use tomlens::probing::ProbeOptions;
use tomlens::steering::{
    apply_caa, apply_iti, caa_hooks, compute_caa, compute_caa_all_layers, iti_hooks,
    load_iti_plan, load_steering_vectors, prepare_iti, save_iti_plan, save_steering_vectors,
    ContrastPair, ItiHead, ItiPlan, SteeringVector,
};

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 20,
        max_seq: 32,
        d_mlp: Some(32),
        seed: 7,
    }
}

fn model() -> ModelWeights<f64> {
    build_model(&cfg()).unwrap()
}

fn pairs(seed: u32, n: usize) -> Vec<ContrastPair> {
    (0..n as u32)
        .map(|i| {
            let a = (seed * 7 + i * 3) % 17 + 1;
            ContrastPair {
                prompt: vec![1, a, (a + 5) % 20, 2],
                positive: vec![(a + 1) % 20, 4],
                negative: vec![(a + 9) % 20, 4],
            }
        })
        .collect()
}

#[test]
fn identical_completions_give_zero_vector() {
    let w = model();
    let mut ps = pairs(1, 5);
    for p in &mut ps {
        p.negative = p.positive.clone();
    }
    for v in compute_caa_all_layers(&w, &ps).unwrap() {
        assert!(v.v.iter().all(|x| *x == 0.0));
    }
}

#[test]
fn swapping_completions_negates() {
    let w = model();
    let ps = pairs(2, 6);
    let swapped: Vec<ContrastPair> = ps
        .iter()
        .map(|p| ContrastPair {
            prompt: p.prompt.clone(),
            positive: p.negative.clone(),
            negative: p.positive.clone(),
        })
        .collect();
    let a = compute_caa(&w, &ps, 1).unwrap();
    let b = compute_caa(&w, &swapped, 1).unwrap();
    for (x, y) in a.v.iter().zip(&b.v) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn single_pair_matches_manual_difference() {
    let w = model();
    let ps = pairs(3, 1);
    let p = &ps[0];
    let run = |c: &[u32]| {
        let toks: Vec<u32> = p.prompt.iter().chain(c).copied().collect();
        let (_, trace) = forward_with_hooks(&w, &toks, &[]).unwrap();
        trace.resid[2].row(toks.len() - 1).to_vec()
    };
    let (pos, neg) = (run(&p.positive), run(&p.negative));
    let v = compute_caa(&w, &ps, 2).unwrap();
    assert_eq!(v.n_pairs, 1);
    for ((a, b), x) in pos.iter().zip(&neg).zip(&v.v) {
        assert!((a - b - x).abs() < 1e-12);
    }
}

#[test]
fn overflowing_pairs_are_reported() {
    let w = model();
    let mut ps = pairs(4, 3);
    ps[1].prompt = vec![1; 40];
    let v = compute_caa(&w, &ps, 0).unwrap();
    assert_eq!(v.skipped, vec![1]);
    assert_eq!(v.n_pairs, 2);
    ps.retain(|p| p.prompt.len() > 30);
    assert!(compute_caa(&w, &ps, 0).is_err());
    assert!(compute_caa(&w, &[], 0).is_err());
    assert!(compute_caa(&w, &pairs(1, 1), 3).is_err());
}

#[test]
fn zero_alpha_and_empty_plan_are_identity() {
    let w = model();
    let v = compute_caa(&w, &pairs(5, 4), 1).unwrap();
    let prompt = vec![1, 3, 5, 7];
    let cands = vec![vec![2, 4], vec![6]];
    let base = score_answers(&w, &prompt, &cands, &[]).unwrap();
    assert_eq!(apply_caa(&w, &prompt, &cands, &v, 0.0).unwrap().scores, base);
    assert_eq!(apply_iti(&w, &prompt, &cands, &ItiPlan::empty(20.0)).unwrap().scores, base);
}

#[test]
fn interventions_leave_prompt_positions_and_weights_alone() {
    let w = model();
    let before = w.clone();
    let v = compute_caa(&w, &pairs(6, 4), 1).unwrap();
    let prompt = [1u32, 3, 5, 7, 9];
    let seq: Vec<u32> = prompt.iter().chain(&[2, 4, 6]).copied().collect();
    let (_, plain) = forward_with_hooks(&w, &seq, &[]).unwrap();
    let plan = ItiPlan {
        heads: vec![ItiHead {
            layer: 0,
            head: 1,
            accuracy: 1.0,
            sigma: 1.5,
            theta: vec![0.5; 8],
        }],
        alpha: 10.0,
        k: 1,
        split_seed: 0,
        excluded: vec![],
    };
    let hook_sets = [
        caa_hooks(&w, &v, 3.0, prompt.len()).unwrap(),
        iti_hooks(&w, &plan, prompt.len()).unwrap(),
    ];
    for hooks in &hook_sets {
        let (_, steered) = forward_with_hooks(&w, &seq, hooks).unwrap();
        let mut changed = false;
        for (a, b) in plain.resid.iter().zip(&steered.resid) {
            for pos in 0..seq.len() {
                if pos < prompt.len() {
                    assert_eq!(a.row(pos), b.row(pos), "prompt position {pos} moved");
                } else {
                    changed |= a.row(pos) != b.row(pos);
                }
            }
        }
        assert!(changed);
    }
    assert_eq!(w, before);
}

#[test]
fn doubling_vector_halving_alpha() {
    let w = model();
    let v = compute_caa(&w, &pairs(7, 4), 1).unwrap();
    let doubled = SteeringVector {
        v: v.v.iter().map(|x| 2.0 * x).collect(),
        ..v.clone()
    };
    let seq = [1u32, 3, 5, 7, 2, 4];
    let a = forward_logits(&w, &seq, &caa_hooks(&w, &v, 1.5, 4).unwrap()).unwrap();
    let b = forward_logits(&w, &seq, &caa_hooks(&w, &doubled, 0.75, 4).unwrap()).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn large_alpha_moves_toward_positive_completion() {
    // The vector is built from the very prompt it is applied to, with the
    // positive and negative completions as the two candidates.
    let w = model();
    let p = ContrastPair {
        prompt: vec![1, 8, 3, 11, 2],
        positive: vec![5],
        negative: vec![13],
    };
    let v = compute_caa(&w, std::slice::from_ref(&p), 2).unwrap();
    let cands = vec![vec![5, 4], vec![13, 4]];
    let margin = |alpha: f64| {
        let r = apply_caa(&w, &p.prompt, &cands, &v, alpha).unwrap();
        r.scores[0] - r.scores[1]
    };
    assert!(margin(8.0) > margin(0.0));
}

#[test]
fn shifted_head_changes_a_ranking() {
    let w = model();
    let plan = ItiPlan {
        heads: vec![ItiHead {
            layer: 1,
            head: 0,
            accuracy: 1.0,
            sigma: 1.0,
            theta: {
                let t = [1.0, -1.0, 0.5, 0.0, 0.0, 0.25, -0.5, 1.0];
                let n: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
                t.iter().map(|x| x / n).collect()
            },
        }],
        alpha: 20.0,
        k: 1,
        split_seed: 0,
        excluded: vec![],
    };
    let mut flipped = 0;
    for a in 1..15u32 {
        let prompt = vec![1, a, (a * 3) % 20, 2];
        let cands = vec![vec![(a + 2) % 20, 4], vec![(a + 7) % 20, 4]];
        let base = apply_iti(&w, &prompt, &cands, &ItiPlan::empty(0.0)).unwrap();
        let shifted = apply_iti(&w, &prompt, &cands, &plan).unwrap();
        flipped += (base.index != shifted.index) as usize;
    }
    assert!(flipped > 0);
}

#[test]
fn width_mismatch_is_an_error() {
    let w = model();
    let bad = SteeringVector {
        layer: 1,
        v: vec![1.0; 5],
        source_fingerprint: String::new(),
        n_pairs: 1,
        skipped: vec![],
    };
    assert!(apply_caa(&w, &[1, 2], &[vec![3], vec![4]], &bad, 1.0).is_err());
    assert!(apply_caa(&w, &[1, 2], &[vec![3], vec![4]], &bad, f64::NAN).is_err());
    let plan = ItiPlan {
        heads: vec![ItiHead {
            layer: 0,
            head: 0,
            accuracy: 1.0,
            sigma: 1.0,
            theta: vec![1.0; 3],
        }],
        alpha: 1.0,
        k: 1,
        split_seed: 0,
        excluded: vec![],
    };
    assert!(apply_iti(&w, &[1, 2], &[vec![3], vec![4]], &plan).is_err());
}

fn head_data(n: usize, planted: (usize, usize)) -> (Vec<Vec<Array2<f32>>>, Vec<bool>) {
    let labels: Vec<bool> = (0..n).map(|i| (i * 7) % 3 == 0 || i % 2 == 0).collect();
    let heads = (0..3)
        .map(|l| {
            (0..2)
                .map(|h| {
                    Array2::from_shape_fn((n, 4), |(i, j)| {
                        let noise = (((i * 13 + j * 7 + l * 5 + h * 3) % 11) as f32 - 5.0) / 5.0;
                        if (l, h) == planted && j == 2 {
                            (if labels[i] { 1.0 } else { -1.0 }) + 0.1 * noise
                        } else {
                            noise
                        }
                    })
                })
                .collect()
        })
        .collect();
    (heads, labels)
}

#[test]
fn all_heads_selected_in_accuracy_order() {
    let (heads, labels) = head_data(60, (2, 1));
    let plan = prepare_iti(&heads, &labels, 6, 15.0, 0, &ProbeOptions::default()).unwrap();
    assert_eq!(plan.heads.len(), 6);
    assert_eq!((plan.heads[0].layer, plan.heads[0].head), (2, 1));
    assert!(plan.heads.windows(2).all(|w| w[0].accuracy >= w[1].accuracy));
    assert!(prepare_iti(&heads, &labels, 7, 15.0, 0, &ProbeOptions::default()).is_err());
}

#[test]
fn archives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let w: ModelWeights<f32> = build_model(&cfg()).unwrap();
    let vs = compute_caa_all_layers(&w, &pairs(9, 3)).unwrap();
    let p = dir.path().join("v.bin");
    save_steering_vectors(&vs, &p).unwrap();
    let back = load_steering_vectors(&p).unwrap();
    assert_eq!(back.len(), vs.len());
    for (a, b) in vs.iter().zip(&back) {
        assert_eq!(a.layer, b.layer);
        assert_eq!(a.n_pairs, b.n_pairs);
        for (x, y) in a.v.iter().zip(&b.v) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    let (heads, labels) = head_data(40, (0, 0));
    let plan = prepare_iti(&heads, &labels, 3, 10.0, 1, &ProbeOptions::default()).unwrap();
    let p = dir.path().join("iti.bin");
    save_iti_plan(&plan, &p).unwrap();
    let back = load_iti_plan(&p).unwrap();
    assert_eq!(back.heads.len(), 3);
    assert_eq!(back.alpha, 10.0);
    for (a, b) in plan.heads.iter().zip(&back.heads) {
        assert_eq!((a.layer, a.head, a.sigma), (b.layer, b.head, b.sigma));
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn concatenation_is_size_weighted_mean(s1 in 0u32..50, n1 in 1usize..5, s2 in 50u32..100, n2 in 1usize..5) {
        let w = model();
        let a = pairs(s1, n1);
        let b = pairs(s2, n2);
        let both: Vec<ContrastPair> = a.iter().chain(&b).cloned().collect();
        let va = compute_caa(&w, &a, 2).unwrap();
        let vb = compute_caa(&w, &b, 2).unwrap();
        let vab = compute_caa(&w, &both, 2).unwrap();
        let total = (n1 + n2) as f64;
        for ((x, y), z) in va.v.iter().zip(&vb.v).zip(&vab.v) {
            let expect = (n1 as f64 * x + n2 as f64 * y) / total;
            prop_assert!((expect - z).abs() < 1e-6);
        }
    }
}
