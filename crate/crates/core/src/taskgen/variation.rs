// SPDX-License-Identifier: MIT OR Apache-2.0

//! Surface edits to the probing prompt that leave labels untouched.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::BeliefItem;
use crate::tokenizer::Vocab;

pub const RANDOM_TOKENS: usize = 10;
pub const TIME_PREFIX: &str = "In the end, ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationKind {
    Original,
    Random,
    Misleading,
    TimeSpec,
    InitialBelief,
}

impl VariationKind {
    pub const ALL: [VariationKind; 5] = [
        VariationKind::Original,
        VariationKind::Random,
        VariationKind::Misleading,
        VariationKind::TimeSpec,
        VariationKind::InitialBelief,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariationKind::Original => "original",
            VariationKind::Random => "random",
            VariationKind::Misleading => "misleading",
            VariationKind::TimeSpec => "time_spec",
            VariationKind::InitialBelief => "initial_belief",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variation {
    pub kind: VariationKind,
    pub seed: u64,
}

/// What a variation changed, enough to undo it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariationRecord {
    Original,
    Random { seed: u64, tokens: Vec<String> },
    Misleading { seed: u64, distractor: String },
    TimeSpec,
    InitialBelief { sentence: String },
}

impl VariationRecord {
    pub fn kind(&self) -> VariationKind {
        match self {
            VariationRecord::Original => VariationKind::Original,
            VariationRecord::Random { .. } => VariationKind::Random,
            VariationRecord::Misleading { .. } => VariationKind::Misleading,
            VariationRecord::TimeSpec => VariationKind::TimeSpec,
            VariationRecord::InitialBelief { .. } => VariationKind::InitialBelief,
        }
    }
}

/// The sentence revealing the protagonist's initial belief, built from the
/// story's filling sentence (`<Name> fills the <container> with <content>.`).
fn initial_belief_sentence(story: &str) -> Result<(String, String)> {
    for sentence in story.split_inclusive('.') {
        let s = sentence.trim();
        let words: Vec<&str> = s.trim_end_matches('.').split_whitespace().collect();
        if let [name, "fills", "the", container, "with", content @ ..] = words.as_slice() {
            if !content.is_empty() {
                let reveal = format!(
                    "{name} believes that the {container} contains {}.",
                    content.join(" ")
                );
                return Ok((s.to_string(), reveal));
            }
        }
    }
    Err(Error::invalid(
        "initial_belief needs a `<name> fills the <container> with <content>.` sentence",
    ))
}

/// Applies `variation` to an unvaried item.
///
/// `pool` supplies distractor statements for the misleading variation and
/// must contain an item with a different story; `vocab` supplies the random
/// tokens, drawn uniformly from its ordinary words.
pub fn apply_variation(
    item: &BeliefItem,
    variation: Variation,
    pool: &[BeliefItem],
    vocab: &Vocab,
) -> Result<BeliefItem> {
    if item.variation != VariationRecord::Original {
        return Err(Error::invalid("item already carries a variation"));
    }
    let mut out = item.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(variation.seed ^ item.template_id as u64);
    match variation.kind {
        VariationKind::Original => {}
        VariationKind::Random => {
            let ids = vocab.regular_ids();
            let tokens: Vec<String> = (0..RANDOM_TOKENS)
                .map(|_| {
                    vocab
                        .word(rng.gen_range(ids.clone()))
                        .expect("id in range")
                        .to_string()
                })
                .collect();
            out.belief = format!("{} {}", tokens.join(" "), item.belief);
            out.variation = VariationRecord::Random {
                seed: variation.seed,
                tokens,
            };
        }
        VariationKind::Misleading => {
            let others: Vec<&BeliefItem> = pool.iter().filter(|p| p.story != item.story).collect();
            let other = others.choose(&mut rng).ok_or_else(|| {
                Error::invalid("misleading variation needs at least two stories")
            })?;
            out.belief = format!("{}\nBelief: {}", item.belief, other.belief);
            out.variation = VariationRecord::Misleading {
                seed: variation.seed,
                distractor: other.belief.clone(),
            };
        }
        VariationKind::TimeSpec => {
            out.belief = format!("{TIME_PREFIX}{}", item.belief);
            out.variation = VariationRecord::TimeSpec;
        }
        VariationKind::InitialBelief => {
            let (fill, reveal) = initial_belief_sentence(&item.story)?;
            out.story = item.story.replacen(&fill, &format!("{fill} {reveal}"), 1);
            out.variation = VariationRecord::InitialBelief { sentence: reveal };
        }
    }
    Ok(out)
}

/// Undoes [`apply_variation`].
pub fn strip_variation(item: &BeliefItem) -> BeliefItem {
    let mut out = item.clone();
    match &item.variation {
        VariationRecord::Original => {}
        VariationRecord::Random { tokens, .. } => {
            let prefix = format!("{} ", tokens.join(" "));
            out.belief = item.belief.strip_prefix(&prefix).unwrap_or(&item.belief).into();
        }
        VariationRecord::Misleading { distractor, .. } => {
            let suffix = format!("\nBelief: {distractor}");
            out.belief = item.belief.strip_suffix(&suffix).unwrap_or(&item.belief).into();
        }
        VariationRecord::TimeSpec => {
            out.belief = item.belief.strip_prefix(TIME_PREFIX).unwrap_or(&item.belief).into();
        }
        VariationRecord::InitialBelief { sentence } => {
            out.story = item.story.replacen(&format!(" {sentence}"), "", 1);
        }
    }
    out.variation = VariationRecord::Original;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_corpus, lexicon_vocab, CorpusConfig, Task};

    fn items() -> Vec<BeliefItem> {
        generate_corpus(&CorpusConfig {
            n_templates: 6,
            n_train_docs: 0,
            ..CorpusConfig::default()
        })
        .unwrap()
        .task_items(Task::ForwardBelief)
    }

    fn var(kind: VariationKind) -> Variation {
        Variation { kind, seed: 11 }
    }

    #[test]
    fn original_is_identity() {
        let v = lexicon_vocab();
        let it = &items()[0];
        assert_eq!(&apply_variation(it, var(VariationKind::Original), &[], &v).unwrap(), it);
    }

    #[test]
    fn random_prefixes_ten_vocab_tokens() {
        let v = lexicon_vocab();
        let pool = items();
        let it = &pool[3];
        let out = apply_variation(it, var(VariationKind::Random), &pool, &v).unwrap();
        let orig = v.encode_strict(&it.belief).unwrap();
        let new = v.encode_strict(&out.belief).unwrap();
        assert_eq!(new.len(), orig.len() + RANDOM_TOKENS);
        assert_eq!(&new[RANDOM_TOKENS..], &orig[..]);
        assert_eq!(strip_variation(&out), *it);
    }

    #[test]
    fn time_spec_prefix() {
        let v = lexicon_vocab();
        let it = &items()[1];
        let out = apply_variation(it, var(VariationKind::TimeSpec), &[], &v).unwrap();
        assert!(out.belief.starts_with("In the end, "));
        assert_eq!(strip_variation(&out), *it);
    }

    #[test]
    fn misleading_needs_two_stories() {
        let v = lexicon_vocab();
        let pool = items();
        let it = &pool[0];
        let alone = apply_variation(it, var(VariationKind::Misleading), &[it.clone()], &v);
        assert!(alone.is_err());
        let out = apply_variation(it, var(VariationKind::Misleading), &pool, &v).unwrap();
        assert!(out.belief.contains("\nBelief: "));
        assert_eq!(strip_variation(&out), *it);
    }

    #[test]
    fn initial_belief_reveals_first_content() {
        let v = lexicon_vocab();
        let it = &items()[0];
        let out = apply_variation(it, var(VariationKind::InitialBelief), &[], &v).unwrap();
        assert!(out.story.contains("believes that the"));
        v.encode_strict(&out.story).unwrap();
        assert_eq!(strip_variation(&out), *it);
    }

    #[test]
    fn labels_and_answers_survive_every_variation() {
        let v = lexicon_vocab();
        let pool = items();
        for it in &pool {
            for kind in VariationKind::ALL {
                let out = apply_variation(it, var(kind), &pool, &v).unwrap();
                assert_eq!((out.z_p, out.z_o), (it.z_p, it.z_o));
                assert_eq!(out.answers, it.answers);
                assert_eq!(out.correct_index, it.correct_index);
            }
        }
    }
}
