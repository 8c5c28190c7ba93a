// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic false-belief stories with exact labels.
//!
//! Each template is one object-swap story: the protagonist fills a container,
//! someone swaps its contents, and the protagonist either sees the swap (true
//! belief, TB) or does not (false belief, FB). Both conditions are emitted for
//! each of the three tasks.

mod bigtom;
mod prompts;
mod variation;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, BOS_ID};

pub use bigtom::load_bigtom;
pub use prompts::{probe_prompt, EvalTemplate};
pub use variation::{
    apply_variation, strip_variation, Variation, VariationKind, VariationRecord, RANDOM_TOKENS,
    TIME_PREFIX,
};

pub const NAMES: &[&str] = &[
    "noor", "sam", "maya", "omar", "lena", "ravi", "kim", "ada", "leo", "iris", "tom", "zoe",
    "hugo", "nina", "yuki", "paul",
];
pub const PLACES: &[&str] = &[
    "cafe", "bakery", "kitchen", "garden", "workshop", "studio", "market", "office",
];
pub const DISHES: &[&str] = &[
    "cake", "bread", "soup", "pie", "stew", "salad", "pasta", "pancakes",
];
pub const CONTAINERS: &[&str] = &[
    "pitcher", "jar", "bottle", "box", "bowl", "cup", "bag", "tin", "basket", "pot",
];
pub const CONTENTS: &[&str] = &[
    "milk", "juice", "water", "tea", "coffee", "sugar", "salt", "flour", "rice", "oil", "honey",
    "soda",
];
pub const AGENTS: &[&str] = &["coworker", "friend", "neighbor", "child", "cousin", "guest"];

/// Words used by the fixed sentence frames and prompt layouts.
const FRAME_WORDS: &str = "is working at the . wants to make some fills with a swaps in \
    sees see swap does not believe believes contains that goes get more uses replaces what will do ? or \
    story : belief question questions answer choose one of following ) b right wrong verdict \
    fact end , based on context keep your concise few words are enough maximum sentence as \
    ' < > option";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ForwardBelief,
    ForwardAction,
    BackwardBelief,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ForwardBelief, Task::ForwardAction, Task::BackwardBelief];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ForwardBelief => "forward_belief",
            Task::ForwardAction => "forward_action",
            Task::BackwardBelief => "backward_belief",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "TB")]
    TrueBelief,
    #[serde(rename = "FB")]
    FalseBelief,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::TrueBelief => "TB",
            Condition::FalseBelief => "FB",
        }
    }
}

/// Whose view of the world a label reflects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Protagonist,
    Oracle,
}

impl Perspective {
    pub fn as_str(self) -> &'static str {
        match self {
            Perspective::Protagonist => "protagonist",
            Perspective::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "protagonist" => Ok(Perspective::Protagonist),
            "oracle" => Ok(Perspective::Oracle),
            _ => Err(Error::invalid(format!("unknown perspective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryTemplate {
    pub id: usize,
    pub name: String,
    pub place: String,
    pub dish: String,
    pub container: String,
    pub initial: String,
    pub swapped: String,
    pub agent: String,
    /// Whether the protagonist sees the swap.
    pub witness: bool,
}

impl StoryTemplate {
    pub fn with_witness(&self, witness: bool) -> Self {
        Self {
            witness,
            ..self.clone()
        }
    }

    pub fn condition(&self) -> Condition {
        if self.witness {
            Condition::TrueBelief
        } else {
            Condition::FalseBelief
        }
    }

    /// What the protagonist thinks the container holds at the end.
    pub fn believed(&self) -> &str {
        if self.witness {
            &self.swapped
        } else {
            &self.initial
        }
    }

    pub fn context_clause(&self) -> String {
        format!("{} is working at the {}.", cap(&self.name), self.place)
    }

    pub fn desire_clause(&self) -> String {
        format!("{} wants to make some {}.", cap(&self.name), self.dish)
    }

    pub fn fill_clause(&self) -> String {
        format!("{} fills the {} with {}.", cap(&self.name), self.container, self.initial)
    }

    pub fn causal_clause(&self) -> String {
        format!(
            "A {} swaps the {} in the {} with {}.",
            self.agent, self.initial, self.container, self.swapped
        )
    }

    pub fn percept_clause(&self) -> String {
        if self.witness {
            format!("{} sees the swap.", cap(&self.name))
        } else {
            format!("{} does not see the swap.", cap(&self.name))
        }
    }

    /// Action revealing the belief (used by the backward-belief task).
    pub fn action_clause(&self) -> String {
        if self.witness {
            format!("{} goes to get more {}.", cap(&self.name), self.initial)
        } else {
            self.use_answer()
        }
    }

    pub fn initial_belief_clause(&self) -> String {
        format!(
            "{} believes that the {} contains {}.",
            cap(&self.name),
            self.container,
            self.initial
        )
    }

    pub fn belief_statement(&self, content: &str) -> String {
        format!(
            "{} believes the {} contains {}.",
            cap(&self.name),
            self.container,
            content
        )
    }

    pub fn fact_statement(&self, content: &str) -> String {
        format!("The {} contains {}.", self.container, content)
    }

    pub fn use_answer(&self) -> String {
        format!("{} uses the {}.", cap(&self.name), self.container)
    }

    pub fn replace_answer(&self) -> String {
        format!(
            "{} replaces the {} with {}.",
            cap(&self.name),
            self.swapped,
            self.initial
        )
    }

    pub fn story(&self, task: Task) -> String {
        let last = match task {
            Task::ForwardBelief | Task::ForwardAction => self.percept_clause(),
            Task::BackwardBelief => self.action_clause(),
        };
        [
            self.context_clause(),
            self.desire_clause(),
            self.fill_clause(),
            self.causal_clause(),
            last,
        ]
        .join(" ")
    }

    pub fn question(&self, task: Task) -> String {
        match task {
            Task::ForwardAction => format!("What will {} do?", cap(&self.name)),
            _ => format!(
                "Does {} believe the {} contains {} or {}?",
                cap(&self.name),
                self.container,
                self.initial,
                self.swapped
            ),
        }
    }

    /// `(correct, incorrect)` answers for `task`.
    pub fn answer_pair(&self, task: Task) -> (String, String) {
        match task {
            Task::ForwardAction => {
                if self.witness {
                    (self.replace_answer(), self.use_answer())
                } else {
                    (self.use_answer(), self.replace_answer())
                }
            }
            _ => {
                let other = if self.witness { &self.initial } else { &self.swapped };
                (
                    self.belief_statement(self.believed()),
                    self.belief_statement(other),
                )
            }
        }
    }
}

fn cap(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// One labelled story/statement/question instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefItem {
    pub template_id: usize,
    pub story: String,
    pub belief: String,
    pub z_p: bool,
    pub z_o: bool,
    pub condition: Condition,
    pub task: Task,
    pub variation: VariationRecord,
    pub question: String,
    pub answers: [String; 2],
    pub correct_index: usize,
    /// Pieces routed to `<unk>` when the item was loaded.
    #[serde(default)]
    pub oov_count: usize,
}

impl BeliefItem {
    pub fn label(&self, perspective: Perspective) -> bool {
        match perspective {
            Perspective::Protagonist => self.z_p,
            Perspective::Oracle => self.z_o,
        }
    }
}

/// Builds the labelled item for one template, task and statement content.
pub fn make_item(t: &StoryTemplate, task: Task, statement_content: &str, flip: bool) -> BeliefItem {
    let (good, bad) = t.answer_pair(task);
    let (answers, correct_index) = if flip {
        ([bad, good], 1)
    } else {
        ([good, bad], 0)
    };
    BeliefItem {
        template_id: t.id,
        story: t.story(task),
        belief: t.belief_statement(statement_content),
        z_p: statement_content == t.believed(),
        z_o: statement_content == t.swapped,
        condition: t.condition(),
        task,
        variation: VariationRecord::Original,
        question: t.question(task),
        answers,
        correct_index,
        oov_count: 0,
    }
}

/// Knobs for the plain-narration training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_templates: usize,
    pub seed: u64,
    /// Number of training documents (drawn from fresh stories).
    pub n_train_docs: usize,
    /// Fraction of documents that are answered questions.
    pub qa_share: f64,
    /// Fraction of documents that judge a statement about the container.
    pub fact_share: f64,
    /// Probability that an answered false-belief question in the training
    /// text gives the protagonist's belief rather than the true contents.
    pub fb_answer_accuracy: f64,
    /// Judged statements appended to each statement document.
    pub judgments: usize,
    /// Upper bound on the vocabulary size.
    pub max_vocab: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_templates: 200,
            seed: 0,
            n_train_docs: 4000,
            qa_share: 0.5,
            fact_share: 0.2,
            fb_answer_accuracy: 1.0,
            judgments: 1,
            max_vocab: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    /// Token sequences for language-model training.
    pub train: Vec<Vec<u32>>,
    pub templates: Vec<StoryTemplate>,
    /// Every item, grouped by task then template then condition (TB first).
    pub items: Vec<BeliefItem>,
}

impl Corpus {
    pub fn task_items(&self, task: Task) -> Vec<BeliefItem> {
        self.items.iter().filter(|i| i.task == task).cloned().collect()
    }
}

/// The closed vocabulary of the synthetic world.
pub fn lexicon_vocab() -> Vocab {
    let mut words: Vec<String> = FRAME_WORDS.split_whitespace().map(String::from).collect();
    for list in [NAMES, PLACES, DISHES, CONTAINERS, CONTENTS, AGENTS] {
        words.extend(list.iter().map(|s| s.to_string()));
    }
    Vocab::new(words)
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).expect("non-empty lexicon")
}

fn sample_template(rng: &mut ChaCha8Rng, id: usize) -> StoryTemplate {
    let initial = pick(rng, CONTENTS);
    let swapped = loop {
        let s = pick(rng, CONTENTS);
        if s != initial {
            break s;
        }
    };
    StoryTemplate {
        id,
        name: pick(rng, NAMES).into(),
        place: pick(rng, PLACES).into(),
        dish: pick(rng, DISHES).into(),
        container: pick(rng, CONTAINERS).into(),
        initial: initial.into(),
        swapped: swapped.into(),
        agent: pick(rng, AGENTS).into(),
        witness: true,
    }
}

fn training_doc(
    rng: &mut ChaCha8Rng,
    t: &StoryTemplate,
    cfg: &CorpusConfig,
    eval: &EvalTemplate,
) -> String {
    let roll: f64 = rng.gen();
    if roll < cfg.qa_share {
        let task = Task::ALL[rng.gen_range(0..3)];
        let (good, bad) = t.answer_pair(task);
        let flip = rng.gen_bool(0.5);
        let item = make_item(t, task, &t.initial, flip);
        let answer = if !t.witness && !rng.gen_bool(cfg.fb_answer_accuracy.clamp(0.0, 1.0)) {
            bad
        } else {
            good
        };
        return format!("{} {}", eval.render(&item), answer);
    }
    let task = if rng.gen_bool(0.5) {
        Task::ForwardBelief
    } else {
        Task::BackwardBelief
    };
    let fact_odds = cfg.fact_share / (1.0 - cfg.qa_share).max(f64::EPSILON);
    let mut doc = format!("Story: {}", t.story(task));
    for _ in 0..cfg.judgments.max(1) {
        let content = if rng.gen_bool(0.5) { &t.initial } else { &t.swapped };
        let (tag, statement, truth) = if rng.gen_bool(fact_odds.clamp(0.0, 1.0)) {
            ("Fact", t.fact_statement(content), *content == t.swapped)
        } else {
            ("Belief", t.belief_statement(content), content == t.believed())
        };
        let verdict = if truth { "Right" } else { "Wrong" };
        doc.push_str(&format!("\n{tag}: {statement} {verdict}."));
    }
    doc
}

/// Generates evaluation items for `n_templates` stories plus a training
/// corpus from separately sampled stories.
///
/// The statement attached to template `i` asserts the initial contents for
/// even `i` and the swapped contents for odd `i`, so protagonist labels are
/// exactly balanced within every task and condition pair.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n_templates == 0 {
        return Err(Error::invalid("n_templates must be at least 1"));
    }
    let vocab = lexicon_vocab();
    if let Some(max) = cfg.max_vocab {
        if vocab.len() > max {
            return Err(Error::VocabularyOverflow {
                needed: vocab.len(),
                vocab_size: max,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<StoryTemplate> = (0..cfg.n_templates)
        .map(|id| sample_template(&mut rng, id))
        .collect();
    let flips: Vec<bool> = (0..cfg.n_templates).map(|_| rng.gen_bool(0.5)).collect();

    let mut items = Vec::with_capacity(cfg.n_templates * 6);
    for task in Task::ALL {
        for (t, &flip) in templates.iter().zip(&flips) {
            let content = if t.id % 2 == 0 { &t.initial } else { &t.swapped };
            for witness in [true, false] {
                items.push(make_item(&t.with_witness(witness), task, content, flip));
            }
        }
    }

    let eval = EvalTemplate::default();
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut train = Vec::with_capacity(cfg.n_train_docs);
    for i in 0..cfg.n_train_docs {
        let t = sample_template(&mut train_rng, cfg.n_templates + i)
            .with_witness(train_rng.gen_bool(0.5));
        let text = training_doc(&mut train_rng, &t, cfg, &eval);
        let mut ids = vec![BOS_ID];
        ids.extend(vocab.encode_strict(&text)?);
        train.push(ids);
    }
    Ok(Corpus {
        vocab,
        train,
        templates,
        items,
    })
}

/// Writes one item per line.
pub fn write_jsonl(items: &[BeliefItem], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.write_all(b"\n")?;
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<BeliefItem>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
