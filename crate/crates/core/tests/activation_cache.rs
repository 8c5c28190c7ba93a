// SPDX-License-Identifier: MIT OR Apache-2.0

use tomlens::cache::{cache_activations, encode_prompt, load_dataset, save_dataset};
use tomlens::model::{build_model, forward_with_hooks, ModelConfig, ModelWeights};
use tomlens::taskgen::{generate_corpus, probe_prompt, BeliefItem, Corpus, CorpusConfig, Perspective, Task};

fn setup() -> (Corpus, ModelWeights<f32>) {
    let corpus = generate_corpus(&CorpusConfig {
        n_templates: 6,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let w = build_model::<f32>(&ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 4,
        vocab_size: corpus.vocab.len(),
        max_seq: 96,
        d_mlp: Some(32),
        seed: 11,
    })
    .unwrap();
    (corpus, w)
}

#[test]
fn shapes_and_labels() {
    let (corpus, w) = setup();
    let items = corpus.task_items(Task::ForwardBelief);
    let ds = cache_activations(&w, &corpus.vocab, &items, Perspective::Protagonist, true).unwrap();
    assert_eq!(ds.resid.len(), 4);
    for x in &ds.resid {
        assert_eq!(x.dim(), (items.len(), 16));
    }
    assert_eq!(ds.heads.len(), 3);
    assert!(ds.heads.iter().all(|l| l.len() == 4 && l.iter().all(|h| h.dim() == (items.len(), 4))));
    let z: Vec<bool> = items.iter().map(|i| i.z_p).collect();
    assert_eq!(ds.labels, z);
    assert!(!ds.is_imbalanced());
    let oracle = ds.relabel(&items, Perspective::Oracle).unwrap();
    assert_eq!(oracle.labels, items.iter().map(|i| i.z_o).collect::<Vec<_>>());
    assert_eq!(oracle.resid, ds.resid);
}

#[test]
fn final_token_matches_full_trace() {
    let (corpus, w) = setup();
    let items = corpus.task_items(Task::BackwardBelief);
    let ds = cache_activations(&w, &corpus.vocab, &items, Perspective::Oracle, true).unwrap();
    for (row, item) in items.iter().enumerate() {
        let tokens = encode_prompt(&corpus.vocab, &probe_prompt(item));
        let (_, trace) = forward_with_hooks(&w, &tokens, &[]).unwrap();
        let last = tokens.len() - 1;
        for l in 0..=3 {
            assert_eq!(ds.resid[l].row(row), trace.resid[l].row(last));
        }
        for l in 0..3 {
            for h in 0..4 {
                assert_eq!(ds.heads[l][h].row(row), trace.head_out[l][h].row(last));
            }
        }
    }
}

#[test]
fn identical_items_give_identical_rows() {
    let (corpus, w) = setup();
    let item = corpus.items[0].clone();
    let items = vec![item.clone(), item];
    let ds = cache_activations(&w, &corpus.vocab, &items, Perspective::Oracle, false).unwrap();
    assert!(ds.heads.is_empty());
    for x in &ds.resid {
        assert_eq!(x.row(0), x.row(1));
    }
}

#[test]
fn overflowing_prompts_are_skipped_not_truncated() {
    let (corpus, w) = setup();
    let mut items: Vec<BeliefItem> = corpus.task_items(Task::ForwardBelief);
    items[2].story = std::iter::repeat("the milk").take(60).collect::<Vec<_>>().join(" ");
    let ds = cache_activations(&w, &corpus.vocab, &items, Perspective::Oracle, false).unwrap();
    assert_eq!(ds.skipped, vec![2]);
    assert_eq!(ds.n_items(), items.len() - 1);
    assert!(!ds.template_ids.is_empty());
    let expect: Vec<usize> = items.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, it)| it.template_id).collect();
    assert_eq!(ds.template_ids, expect);
    // relabelling still lines up with the kept rows
    let re = ds.relabel(&items, Perspective::Protagonist).unwrap();
    assert_eq!(re.n_items(), ds.n_items());
}

#[test]
fn caching_leaves_weights_alone() {
    let (corpus, w) = setup();
    let before = w.fingerprint();
    cache_activations(&w, &corpus.vocab, &corpus.items[..4], Perspective::Oracle, true).unwrap();
    assert_eq!(w.fingerprint(), before);
}

#[test]
fn archive_round_trip_and_fingerprint_warning() {
    let (corpus, w) = setup();
    let items = corpus.task_items(Task::ForwardAction);
    let ds = cache_activations(&w, &corpus.vocab, &items, Perspective::Protagonist, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.bin");
    save_dataset(&ds, &path).unwrap();
    let (back, warning) = load_dataset(&path, Some(&w.fingerprint())).unwrap();
    assert!(warning.is_none());
    assert_eq!(back, ds);
    for (a, b) in back.resid.iter().zip(&ds.resid) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (_, warning) = load_dataset(&path, Some("0000deadbeef")).unwrap();
    assert!(warning.unwrap().contains("0000deadbeef"));
}

#[test]
fn empty_inputs_are_errors() {
    let (corpus, w) = setup();
    assert!(cache_activations(&w, &corpus.vocab, &[], Perspective::Oracle, false).is_err());
    let (corpus, w) = setup();
    let mut ds = cache_activations(&w, &corpus.vocab, &corpus.items[..2], Perspective::Oracle, false).unwrap();
    for x in &mut ds.resid {
        *x = x.slice(ndarray::s![..0, ..]).to_owned();
    }
    ds.labels.clear();
    ds.template_ids.clear();
    let dir = tempfile::tempdir().unwrap();
    assert!(save_dataset(&ds, dir.path().join("empty.bin")).is_err());
}
