// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task evaluation with and without interventions, McNemar tests and
//! delta tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::cache::encode_prompt;
use crate::error::{Error, Result};
use crate::model::{rank_answers, HookSpec, ModelWeights};
use crate::scalar::Scalar;
use crate::steering::{caa_hooks, iti_hooks, ItiPlan, SteeringVector};
use crate::taskgen::{BeliefItem, Condition, EvalTemplate, Task};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ITI")]
    Iti,
    #[serde(rename = "CAA")]
    Caa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Iti => "ITI",
            Method::Caa => "CAA",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Method::None => "No int.",
            other => other.as_str(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Intervention<'a> {
    None,
    Caa { vector: &'a SteeringVector, alpha: f64 },
    Iti(&'a ItiPlan),
}

impl Intervention<'_> {
    pub fn method(&self) -> Method {
        match self {
            Intervention::None => Method::None,
            Intervention::Caa { .. } => Method::Caa,
            Intervention::Iti(_) => Method::Iti,
        }
    }

    pub fn hyper(&self) -> Hyper {
        match self {
            Intervention::None => Hyper::default(),
            Intervention::Caa { vector, alpha } => Hyper {
                alpha: Some(*alpha),
                layer: Some(vector.layer),
                k: None,
            },
            Intervention::Iti(plan) => Hyper {
                alpha: Some(plan.alpha),
                layer: None,
                k: Some(plan.heads.len()),
            },
        }
    }

    fn hooks<T: Scalar>(&self, weights: &ModelWeights<T>, prompt_len: usize) -> Result<Vec<HookSpec<T>>> {
        match self {
            Intervention::None => Ok(Vec::new()),
            Intervention::Caa { vector, alpha } => caa_hooks(weights, vector, *alpha, prompt_len),
            Intervention::Iti(plan) => iti_hooks(weights, plan, prompt_len),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha: Option<f64>,
    pub layer: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub template_id: usize,
    pub condition: Condition,
    pub chosen: usize,
    pub gold: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.chosen == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub method: Method,
    pub task: Task,
    pub hyper: Hyper,
    pub predictions: Vec<Prediction>,
    /// Percentages; `None` when the condition has no items.
    pub tb: Option<f64>,
    pub fb: Option<f64>,
    pub both: Option<f64>,
    /// Templates lacking a TB or FB partner, left out of `both`.
    pub unpaired: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub tb: Option<f64>,
    pub fb: Option<f64>,
    pub both: Option<f64>,
    pub unpaired: usize,
}

fn percent(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hits as f64 / n as f64)
}

/// TB and FB accuracy per condition; Both over templates that have exactly
/// one TB and one FB instance.
pub fn accuracies(preds: &[Prediction]) -> Accuracies {
    let mut by_template: BTreeMap<usize, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    let (mut tb, mut n_tb, mut fb, mut n_fb) = (0, 0, 0, 0);
    for p in preds {
        let entry = by_template.entry(p.template_id).or_default();
        match p.condition {
            Condition::TrueBelief => {
                n_tb += 1;
                tb += p.correct() as usize;
                entry.0.push(p.correct());
            }
            Condition::FalseBelief => {
                n_fb += 1;
                fb += p.correct() as usize;
                entry.1.push(p.correct());
            }
        }
    }
    let (mut both, mut paired, mut unpaired) = (0, 0, 0);
    for (t, f) in by_template.values() {
        if t.len() == 1 && f.len() == 1 {
            paired += 1;
            both += (t[0] && f[0]) as usize;
        } else {
            unpaired += 1;
        }
    }
    Accuracies {
        tb: percent(tb, n_tb),
        fb: percent(fb, n_fb),
        both: percent(both, paired),
        unpaired,
    }
}

pub fn task_result(method: Method, task: Task, hyper: Hyper, predictions: Vec<Prediction>) -> TaskResult {
    let acc = accuracies(&predictions);
    TaskResult {
        method,
        task,
        hyper,
        predictions,
        tb: acc.tb,
        fb: acc.fb,
        both: acc.both,
        unpaired: acc.unpaired,
    }
}

/// Ranks each item's candidates under `intervention`.
pub fn evaluate_task<T: Scalar>(
    weights: &ModelWeights<T>,
    vocab: &Vocab,
    items: &[BeliefItem],
    intervention: Intervention<'_>,
    template: &EvalTemplate,
) -> Result<TaskResult> {
    let task = items
        .first()
        .ok_or_else(|| Error::invalid("no items to evaluate"))?
        .task;
    if items.iter().any(|i| i.task != task) {
        return Err(Error::invalid("items mix several tasks"));
    }
    let mut predictions = Vec::with_capacity(items.len());
    for item in items {
        let prompt = encode_prompt(vocab, &template.render(item));
        let answers: Vec<Vec<u32>> = item.answers.iter().map(|a| vocab.encode(a)).collect();
        let hooks = intervention.hooks(weights, prompt.len())?;
        predictions.push(Prediction {
            template_id: item.template_id,
            condition: item.condition,
            chosen: rank_answers(weights, &prompt, &answers, &hooks)?,
            gold: item.correct_index,
        });
    }
    Ok(task_result(intervention.method(), task, intervention.hyper(), predictions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquaredCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    pub p_value: f64,
    pub significant: bool,
    pub method: McNemarMethod,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Largest discordant count handled by the exact test.
pub const EXACT_LIMIT: usize = 25;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact two-sided McNemar p-value from discordant counts.
pub fn mcnemar_exact(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let tail: f64 = (0..=b.min(c)).map(|i| binomial(n, i)).sum::<f64>() * 0.5f64.powi(n as i32);
    (2.0 * tail).min(1.0)
}

/// McNemar p-value via the continuity-corrected chi-squared statistic.
pub fn mcnemar_chi2(b: usize, c: usize) -> f64 {
    let n = (b + c) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let stat = ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / n;
    let dist = ChiSquared::new(1.0).expect("one degree of freedom");
    (1.0 - dist.cdf(stat)).clamp(f64::MIN_POSITIVE, 1.0)
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> SignificanceResult {
    let (p_value, method) = if b + c <= EXACT_LIMIT {
        (mcnemar_exact(b, c), McNemarMethod::ExactBinomial)
    } else {
        (mcnemar_chi2(b, c), McNemarMethod::ChiSquaredCorrected)
    };
    SignificanceResult {
        b,
        c,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
        method,
    }
}

pub fn mcnemar_test(preds_a: &[usize], preds_b: &[usize], gold: &[usize]) -> Result<SignificanceResult> {
    if preds_a.len() != gold.len() {
        return Err(Error::dims("McNemar predictions A", gold.len(), preds_a.len()));
    }
    if preds_b.len() != gold.len() {
        return Err(Error::dims("McNemar predictions B", gold.len(), preds_b.len()));
    }
    if gold.is_empty() {
        return Err(Error::invalid("McNemar needs at least one item"));
    }
    let (mut b, mut c) = (0, 0);
    for ((a, bb), g) in preds_a.iter().zip(preds_b).zip(gold) {
        match (a == g, bb == g) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

/// One table cell: `value_{delta}` with `^*` appended when significant.
/// Values and deltas are rounded to integers before differencing.
pub fn render_cell(value: f64, baseline: f64, significant: bool) -> String {
    let v = value.round() as i64;
    let d = v - baseline.round() as i64;
    let star = if significant { "^*" } else { "" };
    format!("{v}_{{{d:+}}}{star}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: Method,
    pub hyper: Hyper,
    pub tb: Option<f64>,
    pub fb: Option<f64>,
    pub both: Option<f64>,
    pub tb_delta: Option<f64>,
    pub fb_delta: Option<f64>,
    pub both_delta: Option<f64>,
    /// Pooled over every item of the task; `None` for the baseline row.
    pub significance: Option<SignificanceResult>,
    /// Per-cell tests (TB items, FB items, paired templates) that decide
    /// each cell's asterisk.
    pub cell_significance: Option<[SignificanceResult; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub task: Task,
    pub n_items: usize,
    pub rows: Vec<DeltaRow>,
}

/// Discordant counts between two aligned correctness vectors.
fn discordant(a: &[bool], b: &[bool]) -> SignificanceResult {
    let bb = a.iter().zip(b).filter(|(x, y)| **x && !**y).count();
    let c = a.iter().zip(b).filter(|(x, y)| !**x && **y).count();
    mcnemar_from_counts(bb, c)
}

fn both_flags(preds: &[Prediction]) -> Vec<bool> {
    let mut by_template: BTreeMap<usize, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for p in preds {
        let e = by_template.entry(p.template_id).or_default();
        match p.condition {
            Condition::TrueBelief => e.0.push(p.correct()),
            Condition::FalseBelief => e.1.push(p.correct()),
        }
    }
    by_template
        .values()
        .filter(|(t, f)| t.len() == 1 && f.len() == 1)
        .map(|(t, f)| t[0] && f[0])
        .collect()
}

fn cell_tests(base: &[Prediction], treat: &[Prediction]) -> [SignificanceResult; 3] {
    let flags = |preds: &[Prediction], cond: Condition| -> Vec<bool> {
        preds
            .iter()
            .filter(|p| p.condition == cond)
            .map(Prediction::correct)
            .collect()
    };
    [
        discordant(&flags(base, Condition::TrueBelief), &flags(treat, Condition::TrueBelief)),
        discordant(&flags(base, Condition::FalseBelief), &flags(treat, Condition::FalseBelief)),
        discordant(&both_flags(base), &both_flags(treat)),
    ]
}

fn key(p: &Prediction) -> (usize, Condition, usize) {
    (p.template_id, p.condition, p.gold)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Compares each treatment against the baseline on the same items.
pub fn delta_report(baseline: &TaskResult, treatments: &[TaskResult]) -> Result<DeltaReport> {
    let gold: Vec<usize> = baseline.predictions.iter().map(|p| p.gold).collect();
    let base_chosen: Vec<usize> = baseline.predictions.iter().map(|p| p.chosen).collect();
    let mut rows = vec![DeltaRow {
        method: baseline.method,
        hyper: baseline.hyper,
        tb: baseline.tb,
        fb: baseline.fb,
        both: baseline.both,
        tb_delta: None,
        fb_delta: None,
        both_delta: None,
        significance: None,
        cell_significance: None,
    }];
    for t in treatments {
        let same_items = t.task == baseline.task
            && t.predictions.len() == baseline.predictions.len()
            && t.predictions.iter().zip(&baseline.predictions).all(|(a, b)| key(a) == key(b));
        if !same_items {
            return Err(Error::invalid(format!(
                "{} result for {} does not cover the baseline's items",
                t.method.as_str(),
                t.task
            )));
        }
        let chosen: Vec<usize> = t.predictions.iter().map(|p| p.chosen).collect();
        rows.push(DeltaRow {
            method: t.method,
            hyper: t.hyper,
            tb: t.tb,
            fb: t.fb,
            both: t.both,
            tb_delta: diff(t.tb, baseline.tb),
            fb_delta: diff(t.fb, baseline.fb),
            both_delta: diff(t.both, baseline.both),
            significance: Some(mcnemar_test(&base_chosen, &chosen, &gold)?),
            cell_significance: Some(cell_tests(&baseline.predictions, &t.predictions)),
        });
    }
    Ok(DeltaReport {
        task: baseline.task,
        n_items: gold.len(),
        rows,
    })
}

fn hyper_label(h: &Hyper) -> String {
    match (h.alpha, h.layer, h.k) {
        (Some(a), Some(l), _) => format!("a={a}, layer={l}"),
        (Some(a), None, Some(k)) => format!("a={a}, k={k}"),
        _ => String::new(),
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl DeltaReport {
    fn cells(&self, row: &DeltaRow) -> [String; 3] {
        let base = &self.rows[0];
        let sig = |i: usize| row.cell_significance.is_some_and(|s| s[i].significant);
        let cell = |v: Option<f64>, b: Option<f64>, i: usize| match (v, b, row.cell_significance.is_some()) {
            (Some(v), Some(b), true) => render_cell(v, b, sig(i)),
            (Some(v), _, _) => format!("{}", v.round() as i64),
            (None, _, _) => "-".to_string(),
        };
        [
            cell(row.tb, base.tb, 0),
            cell(row.fb, base.fb, 1),
            cell(row.both, base.both, 2),
        ]
    }

    /// Aligned plain-text table with integer accuracies.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<[String; 5]> = vec![[
            "Method".into(),
            "Setting".into(),
            "TB".into(),
            "FB".into(),
            "Both".into(),
        ]];
        for row in &self.rows {
            let [tb, fb, both] = self.cells(row);
            lines.push([row.method.label().into(), hyper_label(&row.hyper), tb, fb, both]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{} ({} items)\n", self.task, self.n_items);
        for l in &lines {
            let cols: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "task", "method", "alpha", "layer", "k", "tb", "fb", "both", "tb_cell", "fb_cell",
            "both_cell", "b", "c", "p_value", "significant", "test",
        ])?;
        for row in &self.rows {
            let [tb_cell, fb_cell, both_cell] = self.cells(row);
            let s = row.significance;
            w.write_record([
                self.task.to_string(),
                row.method.as_str().to_string(),
                opt_num(row.hyper.alpha),
                row.hyper.layer.map_or_else(String::new, |l| l.to_string()),
                row.hyper.k.map_or_else(String::new, |k| k.to_string()),
                opt_num(row.tb),
                opt_num(row.fb),
                opt_num(row.both),
                tb_cell,
                fb_cell,
                both_cell,
                s.map_or_else(String::new, |s| s.b.to_string()),
                s.map_or_else(String::new, |s| s.c.to_string()),
                s.map_or_else(String::new, |s| s.p_value.to_string()),
                s.map_or_else(String::new, |s| s.significant.to_string()),
                s.map_or_else(String::new, |s| {
                    serde_json::to_value(s.method)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default()
                }),
            ])?;
        }
        csv_string(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One point of a steering grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub method: Method,
    pub alpha: f64,
    /// Residual layer for CAA, head count for ITI.
    pub layer_or_k: usize,
    pub task: Task,
    pub tb: Option<f64>,
    pub fb: Option<f64>,
    pub both: Option<f64>,
}

impl GridRow {
    pub fn from_result(r: &TaskResult) -> Self {
        Self {
            method: r.method,
            alpha: r.hyper.alpha.unwrap_or(0.0),
            layer_or_k: r.hyper.layer.or(r.hyper.k).unwrap_or(0),
            task: r.task,
            tb: r.tb,
            fb: r.fb,
            both: r.both,
        }
    }
}

pub fn grid_csv(rows: &[GridRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "alpha", "layer_or_k", "task", "tb", "fb", "both"])?;
    for r in rows {
        w.write_record([
            r.method.as_str().to_string(),
            r.alpha.to_string(),
            r.layer_or_k.to_string(),
            r.task.to_string(),
            opt_num(r.tb),
            opt_num(r.fb),
            opt_num(r.both),
        ])?;
    }
    csv_string(w)
}
