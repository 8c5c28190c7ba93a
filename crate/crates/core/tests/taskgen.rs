// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use proptest::prelude::*;
use tomlens::taskgen::{
    apply_variation, generate_corpus, lexicon_vocab, load_bigtom, read_jsonl, strip_variation,
    write_jsonl, BeliefItem, Condition, CorpusConfig, Task, Variation, VariationKind,
    VariationRecord, RANDOM_TOKENS,
};
use tomlens::Error;

/// What the world holds and what the protagonist last saw, rebuilt by
/// reading the story one sentence at a time.
#[derive(Default)]
struct World {
    contents: HashMap<String, String>,
    seen: HashMap<String, String>,
    pending_swap: Option<(String, String)>,
    acted_on_initial: Option<bool>,
}

fn simulate(story: &str) -> World {
    let mut w = World::default();
    for sentence in story.split('.').map(str::trim).filter(|s| !s.is_empty()) {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        match words.as_slice() {
            [_, "fills", "the", c, "with", content @ ..] => {
                let content = content.join(" ");
                w.contents.insert(c.to_string(), content.clone());
                w.seen.insert(c.to_string(), content);
            }
            ["A", _, "swaps", "the", rest @ ..] => {
                let s = rest.join(" ");
                let (_, tail) = s.split_once(" in the ").expect("swap sentence");
                let (c, new) = tail.split_once(" with ").expect("swap target");
                w.contents.insert(c.to_string(), new.to_string());
                w.pending_swap = Some((c.to_string(), new.to_string()));
            }
            [_, "sees", "the", "swap"] => {
                let (c, new) = w.pending_swap.take().expect("swap before percept");
                w.seen.insert(c, new);
            }
            [_, "does", "not", "see", "the", "swap"] => {
                w.pending_swap = None;
            }
            [_, "goes", "to", "get", "more", ..] => w.acted_on_initial = Some(false),
            [_, "uses", "the", _] => w.acted_on_initial = Some(true),
            _ => {}
        }
    }
    // An action reveals whether the swap was witnessed.
    if let (Some(used), Some((c, new))) = (w.acted_on_initial, w.pending_swap.take()) {
        if !used {
            w.seen.insert(c, new);
        }
    }
    w
}

fn parse_belief(belief: &str) -> (String, String) {
    let words: Vec<&str> = belief.trim_end_matches('.').split_whitespace().collect();
    match words.as_slice() {
        [_, "believes", "the", c, "contains", content @ ..] => (c.to_string(), content.join(" ")),
        _ => panic!("unexpected belief statement `{belief}`"),
    }
}

#[test]
fn labels_agree_with_world_simulation() {
    let corpus = generate_corpus(&CorpusConfig {
        n_templates: 60,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    assert_eq!(corpus.items.len(), 60 * 6);
    for item in &corpus.items {
        let w = simulate(&item.story);
        let (c, content) = parse_belief(&item.belief);
        assert_eq!(item.z_o, w.contents[&c] == content, "{item:?}");
        assert_eq!(item.z_p, w.seen[&c] == content, "{item:?}");
        let witnessed = w.seen[&c] == w.contents[&c];
        assert_eq!(item.condition == Condition::TrueBelief, witnessed);
        if item.task != Task::ForwardAction {
            let (_, answer) = parse_belief(&item.answers[item.correct_index]);
            assert_eq!(answer, w.seen[&c]);
        }
    }
}

#[test]
fn items_are_balanced_per_task() {
    let corpus = generate_corpus(&CorpusConfig {
        n_templates: 10,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    for task in Task::ALL {
        let items = corpus.task_items(task);
        assert_eq!(items.len(), 20);
        let fb = items.iter().filter(|i| i.condition == Condition::FalseBelief).count();
        assert_eq!(fb, 10);
        let zp = items.iter().filter(|i| i.z_p).count();
        assert_eq!(zp, 10);
    }
}

#[test]
fn noor_style_labels() {
    let corpus = generate_corpus(&CorpusConfig {
        n_templates: 2,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    // Template 0 carries a statement about the initial contents.
    let items = corpus.task_items(Task::ForwardBelief);
    let tb = items.iter().find(|i| i.template_id == 0 && i.condition == Condition::TrueBelief).unwrap();
    let fb = items.iter().find(|i| i.template_id == 0 && i.condition == Condition::FalseBelief).unwrap();
    assert!(!tb.z_p && !tb.z_o);
    assert!(fb.z_p && !fb.z_o);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = CorpusConfig {
        n_templates: 8,
        n_train_docs: 30,
        ..CorpusConfig::default()
    };
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&CorpusConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.items, c.items);
}

#[test]
fn vocabulary_limit_is_enforced() {
    let err = generate_corpus(&CorpusConfig {
        max_vocab: Some(10),
        ..CorpusConfig::default()
    })
    .unwrap_err();
    assert!(matches!(err, Error::VocabularyOverflow { vocab_size: 10, .. }));
}

#[test]
fn jsonl_round_trip() {
    let corpus = generate_corpus(&CorpusConfig {
        n_templates: 3,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("items.jsonl");
    write_jsonl(&corpus.items, &path).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), corpus.items);
}

fn fb_items(n: usize) -> Vec<BeliefItem> {
    generate_corpus(&CorpusConfig {
        n_templates: n,
        n_train_docs: 0,
        ..CorpusConfig::default()
    })
    .unwrap()
    .task_items(Task::ForwardBelief)
}

#[test]
fn random_variation_adds_ten_tokens() {
    let items = fb_items(4);
    let vocab = lexicon_vocab();
    let v = apply_variation(&items[0], Variation { kind: VariationKind::Random, seed: 9 }, &items, &vocab).unwrap();
    let added = v.belief.split_whitespace().count() - items[0].belief.split_whitespace().count();
    assert_eq!(added, RANDOM_TOKENS);
    match &v.variation {
        VariationRecord::Random { tokens, .. } => assert_eq!(tokens.len(), RANDOM_TOKENS),
        other => panic!("{other:?}"),
    }
    assert_eq!(strip_variation(&v), items[0]);
}

#[test]
fn time_spec_prefix() {
    let items = fb_items(2);
    let vocab = lexicon_vocab();
    let v = apply_variation(&items[1], Variation { kind: VariationKind::TimeSpec, seed: 0 }, &items, &vocab).unwrap();
    assert!(v.belief.starts_with("In the end, "));
}

#[test]
fn misleading_needs_two_stories() {
    let items = fb_items(1);
    let vocab = lexicon_vocab();
    let only: Vec<BeliefItem> = items.iter().take(1).cloned().collect();
    let r = apply_variation(&only[0], Variation { kind: VariationKind::Misleading, seed: 0 }, &only, &vocab);
    assert!(r.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn variations_keep_labels_and_answers(idx in 0usize..16, kind in 0usize..5, seed in any::<u64>()) {
        let items = fb_items(8);
        let vocab = lexicon_vocab();
        let item = &items[idx];
        let v = apply_variation(item, Variation { kind: VariationKind::ALL[kind], seed }, &items, &vocab).unwrap();
        prop_assert_eq!(v.z_p, item.z_p);
        prop_assert_eq!(v.z_o, item.z_o);
        prop_assert_eq!(&v.answers, &item.answers);
        prop_assert_eq!(v.correct_index, item.correct_index);
        prop_assert_eq!(&strip_variation(&v), item);
    }
}

const NOOR_STORY: &str = "Noor is working as a barista at a busy coffee shop. Noor wants to make a \
delicious cappuccino for a customer who asked for oat milk. Noor grabs a milk pitcher and fills it \
with oat milk. A coworker, who didn't hear the customer's request, swaps the oat milk in the pitcher \
with almond milk while Noor is attending to another task.";

fn noor_csv() -> String {
    let q = "Does Noor believe the milk pitcher contains oat milk or almond milk?";
    let a = "Noor believes the milk pitcher contains oat milk.";
    let b = "Noor believes the milk pitcher contains almond milk.";
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["story", "question", "option_a", "option_b", "correct_index", "condition", "template_id"]).unwrap();
    let tb = format!("{NOOR_STORY} Noor sees her coworker swapping the milk.");
    let fb = format!("{NOOR_STORY} Noor does not see her coworker swapping the milk.");
    w.write_record([tb.as_str(), q, a, b, "b", "TB", "0"]).unwrap();
    w.write_record([fb.as_str(), q, a, b, "a", "FB", "0"]).unwrap();
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[test]
fn bigtom_forward_belief_example() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noor.csv");
    std::fs::write(&path, noor_csv()).unwrap();
    let items = load_bigtom(&path, &lexicon_vocab()).unwrap();
    assert_eq!(items.len(), 2);
    for it in &items {
        assert!(it.answers[0].ends_with("oat milk."));
        assert!(it.answers[1].ends_with("almond milk."));
        assert_eq!(it.task, Task::ForwardBelief);
        assert_eq!(it.template_id, 0);
    }
    assert_eq!(items[0].condition, Condition::TrueBelief);
    assert_eq!(items[0].correct_index, 1);
    assert_eq!(items[1].condition, Condition::FalseBelief);
    // Statement defaults to option a ("oat milk"): only the FB protagonist
    // still believes it, and the pitcher no longer holds it.
    assert!(!items[0].z_p && !items[0].z_o);
    assert!(items[1].z_p && !items[1].z_o);
    // "barista", "cappuccino" and friends are outside the synthetic lexicon.
    assert!(items.iter().all(|i| i.oov_count > 0));
}

#[test]
fn bigtom_single_row_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.json");
    std::fs::write(
        &path,
        r#"[{"story":"s","question":"q","option_a":"x","option_b":"y","correct_index":0,"condition":"false_belief","task":"backward_belief"}]"#,
    )
    .unwrap();
    let items = load_bigtom(&path, &lexicon_vocab()).unwrap();
    assert_eq!(items.len(), 1);
    assert_eq!(items[0].task, Task::BackwardBelief);
    assert_eq!(items[0].condition, Condition::FalseBelief);
}

#[test]
fn bigtom_missing_condition_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "story,question,option_a,option_b,correct_index\ns,q,a,b,0\n").unwrap();
    match load_bigtom(&path, &lexicon_vocab()) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "condition"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bigtom_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    assert!(load_bigtom(&path, &lexicon_vocab()).is_err());
}
