// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt layouts for probing and for multiple-choice evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::BeliefItem;

/// `Story: …` / `Belief: …` layout used for activation caching.
pub fn probe_prompt(item: &BeliefItem) -> String {
    format!("Story: {}\nBelief: {}", item.story, item.belief)
}

const DEFAULT_EVAL: &str = "Answer the questions based on the context. Keep your answer \
concise, few words are enough, maximum one sentence. Answer as 'Answer:<option>)<answer>'.\n\
\n\
Story: {story}\n\
Question: {question}\n\
Choose one of the following:\n\
a) {option_a}\n\
b) {option_b}\n\
Answer:";

const SLOTS: [&str; 4] = ["{story}", "{question}", "{option_a}", "{option_b}"];

/// Multiple-choice prompt with `{story}`, `{question}`, `{option_a}` and
/// `{option_b}` slots. Candidates are scored as the text that follows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalTemplate(String);

impl Default for EvalTemplate {
    fn default() -> Self {
        Self(DEFAULT_EVAL.to_string())
    }
}

impl EvalTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if let Some(missing) = SLOTS.iter().find(|s| !text.contains(*s)) {
            return Err(Error::Config(format!("evaluation template lacks {missing}")));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn render(&self, item: &BeliefItem) -> String {
        self.0
            .replace("{story}", &item.story)
            .replace("{question}", &item.question)
            .replace("{option_a}", &item.answers[0])
            .replace("{option_b}", &item.answers[1])
    }
}
