// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resumable end-to-end pipeline: every stage reads and writes files under
//! one output directory and records what it did in `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cache::{cache_activations, encode_prompt, load_dataset, save_dataset, ProbingDataset};
use crate::error::{Error, Result};
use crate::eval::{delta_report, evaluate_task, grid_csv, DeltaReport, GridRow, Intervention, TaskResult};
use crate::io::{file_fingerprint, sha256_hex, write_atomic};
use crate::model::{build_model, load_weights, mean_loss, save_weights, ModelConfig, Optimizer, TrainConfig};
use crate::probing::{layer_sweep, memorisation_sweep, report_csv, ProbeOptions, ProbeReport, ReportRow, SweepRow};
use crate::steering::{
    compute_caa_all_layers, load_iti_plan, load_steering_vectors, prepare_iti, save_iti_plan,
    save_steering_vectors, ContrastPair, ItiPlan, SteeringVector, CAA_ALPHAS, DEFAULT_ITI_K,
    ITI_ALPHAS,
};
use crate::taskgen::{
    apply_variation, generate_corpus, read_jsonl, write_jsonl, BeliefItem, CorpusConfig,
    EvalTemplate, Perspective, Task, Variation, VariationKind,
};
use crate::tokenizer::Vocab;
use crate::Weights;

/// Model architecture; the vocabulary size comes from the generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub d_mlp: Option<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy(0);
        Self {
            n_layers: toy.n_layers,
            d_model: toy.d_model,
            n_heads: toy.n_heads,
            max_seq: toy.max_seq,
            d_mlp: toy.d_mlp,
            seed: toy.seed,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq: self.max_seq,
            d_mlp: self.d_mlp,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub split_seed: u64,
    pub c: f64,
    pub max_iter: usize,
    pub perspectives: Vec<Perspective>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let o = ProbeOptions::default();
        Self {
            split_seed: 0,
            c: o.c,
            max_iter: o.max_iter,
            perspectives: vec![Perspective::Protagonist, Perspective::Oracle],
        }
    }
}

impl ProbeSection {
    pub fn options(&self) -> ProbeOptions {
        ProbeOptions {
            c: self.c,
            max_iter: self.max_iter,
            ..ProbeOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaSection {
    pub k_list: Vec<usize>,
}

impl Default for PcaSection {
    fn default() -> Self {
        Self {
            k_list: crate::probing::DEFAULT_K_LIST.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaaSection {
    pub alphas: Vec<f64>,
    /// Residual layers to sweep; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for CaaSection {
    fn default() -> Self {
        Self {
            alphas: CAA_ALPHAS.to_vec(),
            layers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItiSection {
    pub alphas: Vec<f64>,
    pub k: usize,
    /// Labels for the per-head probes.
    pub perspective: Perspective,
}

impl Default for ItiSection {
    fn default() -> Self {
        Self {
            alphas: ITI_ALPHAS.to_vec(),
            k: DEFAULT_ITI_K,
            perspective: Perspective::Protagonist,
        }
    }
}

/// Template partition for steering: vectors and head probes come from the
/// `steer` share, hyperparameters are picked on the `tune` share and the
/// rest is held out for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub seed: u64,
    pub steer_fraction: f64,
    pub tune_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            seed: 0,
            steer_fraction: 0.4,
            tune_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelSection,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub variations: Vec<VariationKind>,
    pub probe: ProbeSection,
    pub pca: PcaSection,
    pub caa: CaaSection,
    pub iti: ItiSection,
    pub split: SplitSection,
    /// Evaluation prompt template file; the built-in layout when absent.
    pub eval_template: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig {
                steps: 1200,
                learning_rate: 1.5e-3,
                batch_size: 8,
                seed: 0,
                optimizer: Optimizer::adam(),
                warmup_steps: 50,
                grad_clip: Some(1.0),
            },
            variations: VariationKind::ALL.to_vec(),
            probe: ProbeSection::default(),
            pca: PcaSection::default(),
            caa: CaaSection::default(),
            iti: ItiSection::default(),
            split: SplitSection::default(),
            eval_template: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Overrides every seed in the config.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.probe.split_seed = seed;
        self.split.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.variations.is_empty() {
            return bad("`variations` must not be empty");
        }
        if !self.variations.contains(&VariationKind::Original) {
            return bad("`variations` must include `original`");
        }
        if self.probe.perspectives.is_empty() {
            return bad("`probe.perspectives` must not be empty");
        }
        if self.pca.k_list.is_empty() || self.pca.k_list.contains(&0) {
            return bad("`pca.k_list` must hold positive values");
        }
        if self.caa.alphas.is_empty() || self.iti.alphas.is_empty() {
            return bad("steering alpha grids must not be empty");
        }
        if self.caa.alphas.iter().chain(&self.iti.alphas).any(|a| !a.is_finite()) {
            return bad("steering alphas must be finite");
        }
        if self.caa.layers.as_ref().is_some_and(|l| l.is_empty()) {
            return bad("`caa.layers` must not be empty when given");
        }
        if self.caa.layers.as_ref().is_some_and(|l| l.iter().any(|&x| x > self.model.n_layers)) {
            return bad("`caa.layers` entries must be at most `model.n_layers`");
        }
        if self.iti.k == 0 || self.iti.k > self.model.n_layers * self.model.n_heads {
            return bad("`iti.k` must be between 1 and the number of heads");
        }
        let s = &self.split;
        if !(s.steer_fraction > 0.0 && s.tune_fraction > 0.0 && s.steer_fraction + s.tune_fraction < 1.0) {
            return bad("split fractions must be positive and sum to less than 1");
        }
        if self.corpus.n_templates < 10 {
            return bad("`corpus.n_templates` must be at least 10");
        }
        self.model
            .with_vocab(1)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn eval_template(&self) -> Result<EvalTemplate> {
        match &self.eval_template {
            None => Ok(EvalTemplate::default()),
            Some(p) => EvalTemplate::new(
                fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenCorpus,
    TrainModel,
    Cache,
    Probe,
    Pca,
    SteerCaa,
    SteerIti,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenCorpus,
        Stage::TrainModel,
        Stage::Cache,
        Stage::Probe,
        Stage::Pca,
        Stage::SteerCaa,
        Stage::SteerIti,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainModel => "train-model",
            Stage::Cache => "cache",
            Stage::Probe => "probe",
            Stage::Pca => "pca",
            Stage::SteerCaa => "steer-caa",
            Stage::SteerIti => "steer-iti",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Command-line narrowing of what a stage processes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Filters {
    pub perspective: Option<Perspective>,
    pub variation: Option<VariationKind>,
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub filters: Filters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

// Artifact paths, relative to the output directory.
pub const VOCAB: &str = "corpus/vocab.json";
pub const TRAIN_DOCS: &str = "corpus/train.json";
pub const ITEMS: &str = "corpus/items.jsonl";
pub const WEIGHTS: &str = "model/weights.bin";
pub const LOSS_CSV: &str = "model/loss.csv";
pub const TRAIN_SUMMARY: &str = "model/summary.json";
pub const CAA_VECTORS: &str = "steering/caa_vectors.bin";
pub const CAA_GRID: &str = "steering/caa_grid.csv";
pub const CAA_SELECTION: &str = "steering/caa_selection.json";
pub const ITI_PLAN: &str = "steering/iti_plan.bin";
pub const ITI_GRID: &str = "steering/iti_grid.csv";
pub const ITI_SELECTION: &str = "steering/iti_selection.json";
pub const RESULTS_JSON: &str = "report/results.json";
pub const RESULTS_CSV: &str = "report/results.csv";
pub const TABLE_TXT: &str = "report/table.txt";
pub const MANIFEST: &str = "manifest.json";

pub fn cache_path(v: VariationKind) -> String {
    format!("cache/{}.bin", v.as_str())
}

pub fn probe_path(p: Perspective, v: VariationKind) -> String {
    format!("probe/{}_{}.json", p.as_str(), v.as_str())
}

pub fn pca_path(p: Perspective) -> String {
    format!("pca/{}.json", p.as_str())
}

pub fn eval_path(t: Task) -> String {
    format!("eval/{}.json", t.as_str())
}

/// The stage that writes `path`.
fn producer(path: &str) -> Stage {
    match path.split('/').next().unwrap_or("") {
        "corpus" => Stage::GenCorpus,
        "model" => Stage::TrainModel,
        "cache" => Stage::Cache,
        "probe" => Stage::Probe,
        "pca" => Stage::Pca,
        "eval" => Stage::Eval,
        _ if path.starts_with("steering/iti") => Stage::SteerIti,
        _ if path.starts_with("steering/") => Stage::SteerCaa,
        _ => Stage::Report,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST);
        if !p.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(p)?)?)
    }

    fn save(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join(MANIFEST), &serde_json::to_vec_pretty(self)?)
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn write_json<T: Serialize>(out: &Path, rel: &str, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(&out.join(rel), &bytes)
}

fn read_json<T: DeserializeOwned>(out: &Path, rel: &str) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(out.join(rel))?)?)
}

fn write_text(out: &Path, rel: &str, text: &str) -> Result<()> {
    write_atomic(&out.join(rel), text.as_bytes())
}

/// Writes through a temp path so archive writers stay atomic.
fn save_via<F: FnOnce(&Path) -> Result<()>>(out: &Path, rel: &str, f: F) -> Result<()> {
    let dest = out.join(rel);
    if let Some(dir) = dest.parent() {
        fs::create_dir_all(dir)?;
    }
    f(&dest)
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    filters: &'a Filters,
}

impl Ctx<'_> {
    fn variations(&self) -> Vec<VariationKind> {
        match self.filters.variation {
            Some(v) => vec![v],
            None => self.cfg.variations.clone(),
        }
    }

    fn perspectives(&self) -> Vec<Perspective> {
        match self.filters.perspective {
            Some(p) => vec![p],
            None => self.cfg.probe.perspectives.clone(),
        }
    }

    fn tasks(&self) -> Vec<Task> {
        match self.filters.task {
            Some(t) => vec![t],
            None => Task::ALL.to_vec(),
        }
    }

    fn iti_perspective(&self) -> Perspective {
        self.filters.perspective.unwrap_or(self.cfg.iti.perspective)
    }

    fn vocab(&self) -> Result<Vocab> {
        read_json(self.out, VOCAB)
    }

    fn items(&self) -> Result<Vec<BeliefItem>> {
        read_jsonl(&self.out.join(ITEMS))
    }

    fn weights(&self) -> Result<Weights> {
        load_weights(self.out.join(WEIGHTS))
    }

    fn dataset(&self, v: VariationKind) -> Result<ProbingDataset> {
        let fp = self.weights().ok().map(|w| w.fingerprint());
        Ok(load_dataset(self.out.join(cache_path(v)), fp.as_deref())?.0)
    }

    fn inputs(&self, stage: Stage) -> Vec<String> {
        let mut v: Vec<String> = match stage {
            Stage::GenCorpus => vec![],
            Stage::TrainModel => vec![VOCAB.into(), TRAIN_DOCS.into()],
            Stage::Cache | Stage::SteerCaa => vec![VOCAB.into(), ITEMS.into(), WEIGHTS.into()],
            Stage::Probe => self.variations().into_iter().map(cache_path).collect(),
            Stage::Pca => vec![cache_path(VariationKind::Original)],
            Stage::SteerIti => vec![VOCAB.into(), ITEMS.into(), WEIGHTS.into(), cache_path(VariationKind::Original)],
            Stage::Eval => vec![
                VOCAB.into(),
                ITEMS.into(),
                WEIGHTS.into(),
                CAA_VECTORS.into(),
                CAA_SELECTION.into(),
                ITI_PLAN.into(),
                ITI_SELECTION.into(),
            ],
            Stage::Report => {
                let mut r = vec![TRAIN_SUMMARY.into(), CAA_SELECTION.into(), ITI_SELECTION.into()];
                r.extend(Task::ALL.iter().map(|&t| eval_path(t)));
                for p in &self.cfg.probe.perspectives {
                    r.extend(self.cfg.variations.iter().map(|&v| probe_path(*p, v)));
                    r.push(pca_path(*p));
                }
                r
            }
        };
        if matches!(stage, Stage::Probe) {
            v.push(ITEMS.into());
        }
        v
    }

    fn config_hash(&self, stage: Stage) -> Result<String> {
        let c = self.cfg;
        let section = match stage {
            Stage::GenCorpus => serde_json::json!({ "corpus": c.corpus }),
            Stage::TrainModel => serde_json::json!({ "model": c.model, "train": c.train }),
            Stage::Cache => serde_json::json!({ "variations": self.variations() }),
            Stage::Probe => serde_json::json!({
                "probe": c.probe, "variations": self.variations(), "perspectives": self.perspectives()
            }),
            Stage::Pca => serde_json::json!({
                "probe": c.probe, "pca": c.pca, "perspectives": self.perspectives()
            }),
            Stage::SteerCaa => serde_json::json!({
                "caa": c.caa, "split": c.split, "template": self.template_text()?
            }),
            Stage::SteerIti => serde_json::json!({
                "iti": c.iti, "probe": c.probe, "split": c.split,
                "perspective": self.iti_perspective(), "template": self.template_text()?
            }),
            Stage::Eval => serde_json::json!({
                "split": c.split, "tasks": self.tasks(), "template": self.template_text()?
            }),
            Stage::Report => serde_json::json!({
                "variations": c.variations, "perspectives": c.probe.perspectives
            }),
        };
        Ok(sha256_hex(&serde_json::to_vec(&section)?))
    }

    fn template_text(&self) -> Result<String> {
        Ok(self.cfg.eval_template()?.as_str().to_string())
    }
}

/// Runs one stage, skipping it when its config and inputs are unchanged.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out)?;
    let ctx = Ctx {
        cfg,
        out,
        filters: &opts.filters,
    };
    let mut inputs = BTreeMap::new();
    for rel in ctx.inputs(stage) {
        let path = out.join(&rel);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                stage: producer(&rel).to_string(),
                missing: path,
            });
        }
        inputs.insert(rel, file_fingerprint(&path)?);
    }
    let hash = ctx.config_hash(stage)?;
    let mut manifest = Manifest::load(out)?;
    if let Some(prev) = manifest.stages.get(stage.as_str()) {
        let outputs_intact = !prev.outputs.is_empty()
            && prev
                .outputs
                .iter()
                .all(|(rel, fp)| file_fingerprint(&out.join(rel)).is_ok_and(|f| &f == fp));
        if outputs_intact && !opts.force {
            if prev.config_hash != hash {
                return Err(Error::ConfigMismatch {
                    stage: stage.to_string(),
                });
            }
            if prev.inputs == inputs {
                log::info!("{stage}: up to date");
                return Ok(StageOutcome::UpToDate);
            }
        }
    }
    let started = now();
    log::info!("{stage}: running");
    let written = match stage {
        Stage::GenCorpus => gen_corpus(&ctx)?,
        Stage::TrainModel => train_model(&ctx)?,
        Stage::Cache => cache_stage(&ctx)?,
        Stage::Probe => probe_stage(&ctx)?,
        Stage::Pca => pca_stage(&ctx)?,
        Stage::SteerCaa => steer_caa(&ctx)?,
        Stage::SteerIti => steer_iti(&ctx)?,
        Stage::Eval => eval_stage(&ctx)?,
        Stage::Report => report_stage(&ctx)?,
    };
    let mut outputs = BTreeMap::new();
    for rel in written {
        let fp = file_fingerprint(&out.join(&rel))?;
        outputs.insert(rel, fp);
    }
    manifest.stages.insert(
        stage.as_str().to_string(),
        StageRecord {
            config_hash: hash,
            inputs,
            outputs,
            started_unix: started,
            finished_unix: now(),
        },
    );
    manifest.save(out)?;
    Ok(StageOutcome::Ran)
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<(Stage, StageOutcome)>> {
    Stage::ALL
        .into_iter()
        .map(|s| Ok((s, run_stage(s, cfg, opts)?)))
        .collect()
}

fn gen_corpus(ctx: &Ctx) -> Result<Vec<String>> {
    let corpus = generate_corpus(&ctx.cfg.corpus)?;
    write_json(ctx.out, VOCAB, &corpus.vocab)?;
    write_json(ctx.out, TRAIN_DOCS, &corpus.train)?;
    save_via(ctx.out, ITEMS, |p| write_jsonl(&corpus.items, p))?;
    Ok(vec![VOCAB.into(), TRAIN_DOCS.into(), ITEMS.into()])
}

/// Summary of the trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean loss over the last 50 optimisation steps (nats/token).
    pub tail_loss: f64,
    /// Mean next-token loss over the first 200 training documents.
    pub corpus_loss: f64,
    pub fingerprint: String,
}

fn train_model(ctx: &Ctx) -> Result<Vec<String>> {
    let vocab = ctx.vocab()?;
    let docs: Vec<Vec<u32>> = read_json(ctx.out, TRAIN_DOCS)?;
    let mcfg = ctx.cfg.model.with_vocab(vocab.len());
    let longest = docs.iter().map(Vec::len).max().unwrap_or(0);
    if longest > mcfg.max_seq {
        return Err(Error::Config(format!(
            "training documents reach {longest} tokens but model.max_seq is {}",
            mcfg.max_seq
        )));
    }
    let init: Weights = build_model(&mcfg)?;
    let (weights, curve) = crate::model::train_lm(init, &docs, &ctx.cfg.train)?;
    save_via(ctx.out, WEIGHTS, |p| save_weights(&weights, p))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"])?;
    for (i, l) in curve.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(&ctx.out.join(LOSS_CSV), &bytes)?;
    let sample = &docs[..docs.len().min(200)];
    let summary = TrainSummary {
        steps: ctx.cfg.train.steps,
        tail_loss: curve.tail_mean(50).unwrap_or(f64::NAN),
        corpus_loss: mean_loss(&weights, sample)?,
        fingerprint: weights.fingerprint(),
    };
    write_json(ctx.out, TRAIN_SUMMARY, &summary)?;
    Ok(vec![WEIGHTS.into(), LOSS_CSV.into(), TRAIN_SUMMARY.into()])
}

/// Forward Belief items with `kind` applied.
pub fn probing_items(items: &[BeliefItem], kind: VariationKind, seed: u64, vocab: &Vocab) -> Result<Vec<BeliefItem>> {
    let base: Vec<BeliefItem> = items
        .iter()
        .filter(|i| i.task == Task::ForwardBelief)
        .cloned()
        .collect();
    base.iter()
        .map(|it| apply_variation(it, Variation { kind, seed }, &base, vocab))
        .collect()
}

fn cache_stage(ctx: &Ctx) -> Result<Vec<String>> {
    let vocab = ctx.vocab()?;
    let items = ctx.items()?;
    let weights = ctx.weights()?;
    let mut written = Vec::new();
    for v in ctx.variations() {
        let varied = probing_items(&items, v, ctx.cfg.corpus.seed, &vocab)?;
        let ds = cache_activations(&weights, &vocab, &varied, Perspective::Oracle, true)?;
        if !ds.skipped.is_empty() {
            log::warn!("{}: {} prompts did not fit and were skipped", v.as_str(), ds.skipped.len());
        }
        let rel = cache_path(v);
        save_via(ctx.out, &rel, |p| save_dataset(&ds, p))?;
        written.push(rel);
    }
    Ok(written)
}

fn probe_stage(ctx: &Ctx) -> Result<Vec<String>> {
    let items = ctx.items()?;
    let vocab = ctx.vocab()?;
    let opts = ctx.cfg.probe.options();
    let mut written = Vec::new();
    for v in ctx.variations() {
        let varied = probing_items(&items, v, ctx.cfg.corpus.seed, &vocab)?;
        let ds = ctx.dataset(v)?;
        for p in ctx.perspectives() {
            let labelled = ds.relabel(&varied, p)?;
            let report = layer_sweep(&labelled, ctx.cfg.probe.split_seed, &opts)?;
            let rel = probe_path(p, v);
            write_json(ctx.out, &rel, &report)?;
            let csv_rel = rel.replace(".json", ".csv");
            write_text(ctx.out, &csv_rel, &report_csv(&report.rows())?)?;
            written.push(rel);
            written.push(csv_rel);
        }
    }
    Ok(written)
}

/// Memorisation sweep for one perspective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub perspective: Perspective,
    pub split_seed: u64,
    pub rows: Vec<SweepRow>,
}

fn pca_stage(ctx: &Ctx) -> Result<Vec<String>> {
    let items = ctx.items()?;
    let vocab = ctx.vocab()?;
    let varied = probing_items(&items, VariationKind::Original, ctx.cfg.corpus.seed, &vocab)?;
    let ds = ctx.dataset(VariationKind::Original)?;
    let mut written = Vec::new();
    for p in ctx.perspectives() {
        let labelled = ds.relabel(&varied, p)?;
        let rows = memorisation_sweep(&labelled, &ctx.cfg.pca.k_list, ctx.cfg.probe.split_seed, &ctx.cfg.probe.options())?;
        let rel = pca_path(p);
        let csv_rows: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
        write_text(ctx.out, &rel.replace(".json", ".csv"), &report_csv(&csv_rows)?)?;
        write_json(
            ctx.out,
            &rel,
            &PcaReport {
                perspective: p,
                split_seed: ctx.cfg.probe.split_seed,
                rows,
            },
        )?;
        written.push(rel.replace(".json", ".csv"));
        written.push(rel);
    }
    Ok(written)
}

/// Template ids of the steer, tune and test partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSplit {
    pub steer: BTreeSet<usize>,
    pub tune: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

pub fn split_templates(n_templates: usize, s: &SplitSection) -> TemplateSplit {
    let mut ids: Vec<usize> = (0..n_templates).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));
    let n_steer = ((n_templates as f64 * s.steer_fraction).round() as usize).max(1);
    let n_tune = ((n_templates as f64 * s.tune_fraction).round() as usize).max(1);
    TemplateSplit {
        steer: ids[..n_steer].iter().copied().collect(),
        tune: ids[n_steer..n_steer + n_tune].iter().copied().collect(),
        test: ids[n_steer + n_tune..].iter().copied().collect(),
    }
}

fn subset(items: &[BeliefItem], task: Task, ids: &BTreeSet<usize>) -> Vec<BeliefItem> {
    items
        .iter()
        .filter(|i| i.task == task && ids.contains(&i.template_id))
        .cloned()
        .collect()
}

/// Contrast pairs (prompt, correct answer, wrong answer) for `items`.
pub fn contrast_pairs(items: &[BeliefItem], vocab: &Vocab, template: &EvalTemplate) -> Vec<ContrastPair> {
    items
        .iter()
        .map(|it| ContrastPair {
            prompt: encode_prompt(vocab, &template.render(it)),
            positive: vocab.encode(&it.answers[it.correct_index]),
            negative: vocab.encode(&it.answers[1 - it.correct_index]),
        })
        .collect()
}

/// Chosen steering hyperparameters and their tuning-split scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub alpha: f64,
    /// CAA layer or ITI head count.
    pub layer_or_k: usize,
    pub tune_fb: Option<f64>,
    pub tune_both: Option<f64>,
    pub baseline_fb: Option<f64>,
    pub split: TemplateSplit,
}

/// Grid points are compared by tuning-split FB accuracy, then Both; the
/// earlier grid point wins ties.
fn better(a: &TaskResult, b: &TaskResult) -> bool {
    let key = |r: &TaskResult| (r.fb.unwrap_or(0.0), r.both.unwrap_or(0.0));
    let (ka, kb) = (key(a), key(b));
    ka.0 > kb.0 || (ka.0 == kb.0 && ka.1 > kb.1)
}

/// Scores every grid point on the tuning split's Forward Belief items; the
/// other tasks only see the selected point, at evaluation time.
fn evaluate_grid<'a>(
    ctx: &Ctx,
    weights: &Weights,
    vocab: &Vocab,
    items: &[BeliefItem],
    split: &TemplateSplit,
    interventions: impl Iterator<Item = Intervention<'a>>,
) -> Result<(Vec<GridRow>, TaskResult, TaskResult)> {
    let template = ctx.cfg.eval_template()?;
    let tune = subset(items, Task::ForwardBelief, &split.tune);
    let baseline = evaluate_task(weights, vocab, &tune, Intervention::None, &template)?;
    let mut rows = Vec::new();
    let mut best: Option<TaskResult> = None;
    for iv in interventions {
        let r = evaluate_task(weights, vocab, &tune, iv, &template)?;
        rows.push(GridRow::from_result(&r));
        if best.as_ref().is_none_or(|b| better(&r, b)) {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| Error::invalid("empty steering grid"))?;
    Ok((rows, best, baseline))
}

fn steer_caa(ctx: &Ctx) -> Result<Vec<String>> {
    let vocab = ctx.vocab()?;
    let items = ctx.items()?;
    let weights = ctx.weights()?;
    let split = split_templates(ctx.cfg.corpus.n_templates, &ctx.cfg.split);
    let template = ctx.cfg.eval_template()?;
    let pairs = contrast_pairs(&subset(&items, Task::ForwardBelief, &split.steer), &vocab, &template);
    let mut vectors = compute_caa_all_layers(&weights, &pairs)?;
    if let Some(layers) = &ctx.cfg.caa.layers {
        vectors.retain(|v| layers.contains(&v.layer));
    }
    save_via(ctx.out, CAA_VECTORS, |p| save_steering_vectors(&vectors, p))?;
    let grid = vectors.iter().flat_map(|v| {
        ctx.cfg
            .caa
            .alphas
            .iter()
            .map(move |&alpha| Intervention::Caa { vector: v, alpha })
    });
    let (rows, best, baseline) = evaluate_grid(ctx, &weights, &vocab, &items, &split, grid)?;
    write_text(ctx.out, CAA_GRID, &grid_csv(&rows)?)?;
    let selection = Selection {
        alpha: best.hyper.alpha.unwrap_or(0.0),
        layer_or_k: best.hyper.layer.unwrap_or(0),
        tune_fb: best.fb,
        tune_both: best.both,
        baseline_fb: baseline.fb,
        split,
    };
    write_json(ctx.out, CAA_SELECTION, &selection)?;
    Ok(vec![CAA_VECTORS.into(), CAA_GRID.into(), CAA_SELECTION.into()])
}

fn steer_iti(ctx: &Ctx) -> Result<Vec<String>> {
    let vocab = ctx.vocab()?;
    let items = ctx.items()?;
    let weights = ctx.weights()?;
    let split = split_templates(ctx.cfg.corpus.n_templates, &ctx.cfg.split);
    let varied = probing_items(&items, VariationKind::Original, ctx.cfg.corpus.seed, &vocab)?;
    let ds = ctx.dataset(VariationKind::Original)?.relabel(&varied, ctx.iti_perspective())?;
    let keep: Vec<usize> = (0..ds.n_items())
        .filter(|&i| split.steer.contains(&ds.template_ids[i]))
        .collect();
    let heads: Vec<Vec<_>> = ds
        .heads
        .iter()
        .map(|layer| layer.iter().map(|m| m.select(ndarray::Axis(0), &keep)).collect())
        .collect();
    let labels: Vec<bool> = keep.iter().map(|&i| ds.labels[i]).collect();
    let plan = prepare_iti(
        &heads,
        &labels,
        ctx.cfg.iti.k,
        ctx.cfg.iti.alphas[0],
        ctx.cfg.probe.split_seed,
        &ctx.cfg.probe.options(),
    )?;
    let plans: Vec<ItiPlan> = ctx.cfg.iti.alphas.iter().map(|&a| plan.with_alpha(a)).collect();
    let (rows, best, baseline) = evaluate_grid(ctx, &weights, &vocab, &items, &split, plans.iter().map(Intervention::Iti))?;
    write_text(ctx.out, ITI_GRID, &grid_csv(&rows)?)?;
    let alpha = best.hyper.alpha.unwrap_or(0.0);
    save_via(ctx.out, ITI_PLAN, |p| save_iti_plan(&plan.with_alpha(alpha), p))?;
    let selection = Selection {
        alpha,
        layer_or_k: plan.heads.len(),
        tune_fb: best.fb,
        tune_both: best.both,
        baseline_fb: baseline.fb,
        split,
    };
    write_json(ctx.out, ITI_SELECTION, &selection)?;
    Ok(vec![ITI_PLAN.into(), ITI_GRID.into(), ITI_SELECTION.into()])
}

/// Held-out results for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub task: Task,
    pub baseline: TaskResult,
    pub caa: TaskResult,
    pub iti: TaskResult,
}

fn eval_stage(ctx: &Ctx) -> Result<Vec<String>> {
    let vocab = ctx.vocab()?;
    let items = ctx.items()?;
    let weights = ctx.weights()?;
    let template = ctx.cfg.eval_template()?;
    let caa_sel: Selection = read_json(ctx.out, CAA_SELECTION)?;
    let vectors: Vec<SteeringVector> = load_steering_vectors(ctx.out.join(CAA_VECTORS))?;
    let vector = vectors
        .iter()
        .find(|v| v.layer == caa_sel.layer_or_k)
        .ok_or_else(|| Error::invalid(format!("no steering vector for layer {}", caa_sel.layer_or_k)))?;
    let plan = load_iti_plan(ctx.out.join(ITI_PLAN))?;
    let mut written = Vec::new();
    for task in ctx.tasks() {
        let test = subset(&items, task, &caa_sel.split.test);
        let bundle = EvalBundle {
            task,
            baseline: evaluate_task(&weights, &vocab, &test, Intervention::None, &template)?,
            caa: evaluate_task(
                &weights,
                &vocab,
                &test,
                Intervention::Caa {
                    vector,
                    alpha: caa_sel.alpha,
                },
                &template,
            )?,
            iti: evaluate_task(&weights, &vocab, &test, Intervention::Iti(&plan), &template)?,
        };
        let rel = eval_path(task);
        write_json(ctx.out, &rel, &bundle)?;
        written.push(rel);
    }
    Ok(written)
}

/// Best layer of one probe sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub perspective: String,
    pub variation: String,
    pub best_layer: usize,
    pub best_accuracy: f64,
    pub layer_accuracy: Vec<f64>,
}

/// Everything `report/results.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub training: TrainSummary,
    pub probing: Vec<ProbeSummary>,
    pub memorisation: Vec<PcaReport>,
    pub caa: Selection,
    pub iti: Selection,
    pub tasks: Vec<DeltaReport>,
}

fn report_stage(ctx: &Ctx) -> Result<Vec<String>> {
    let training: TrainSummary = read_json(ctx.out, TRAIN_SUMMARY)?;
    let mut probing = Vec::new();
    let mut memorisation = Vec::new();
    for &p in &ctx.cfg.probe.perspectives {
        for &v in &ctx.cfg.variations {
            let r: ProbeReport = read_json(ctx.out, &probe_path(p, v))?;
            probing.push(ProbeSummary {
                perspective: r.perspective.clone(),
                variation: r.variation.clone(),
                best_layer: r.best_layer,
                best_accuracy: r.best_accuracy,
                layer_accuracy: r.layers.iter().map(|l| l.accuracy).collect(),
            });
        }
        memorisation.push(read_json(ctx.out, &pca_path(p))?);
    }
    let mut tasks = Vec::new();
    for task in Task::ALL {
        let b: EvalBundle = read_json(ctx.out, &eval_path(task))?;
        tasks.push(delta_report(&b.baseline, &[b.iti.clone(), b.caa.clone()])?);
    }
    let report = PipelineReport {
        training,
        probing,
        memorisation,
        caa: read_json(ctx.out, CAA_SELECTION)?,
        iti: read_json(ctx.out, ITI_SELECTION)?,
        tasks,
    };
    write_json(ctx.out, RESULTS_JSON, &report)?;

    let mut csv_text = String::new();
    for (i, t) in report.tasks.iter().enumerate() {
        let part = t.to_csv()?;
        // Keep one header line for the concatenated table.
        let body = if i == 0 { part.as_str() } else { part.split_once('\n').map_or("", |x| x.1) };
        csv_text.push_str(body);
    }
    write_text(ctx.out, RESULTS_CSV, &csv_text)?;

    let mut table = String::new();
    for t in &report.tasks {
        table.push_str(&t.to_text());
        table.push('\n');
    }
    table.push_str("Probe accuracy by layer\n");
    for s in &report.probing {
        let accs: Vec<String> = s.layer_accuracy.iter().map(|a| format!("{:.0}", a * 100.0)).collect();
        table.push_str(&format!(
            "{:<12} {:<15} best L{} {:.1}%  [{}]\n",
            s.perspective,
            s.variation,
            s.best_layer,
            s.best_accuracy * 100.0,
            accs.join(" ")
        ));
    }
    write_text(ctx.out, TABLE_TXT, &table)?;
    Ok(vec![RESULTS_JSON.into(), RESULTS_CSV.into(), TABLE_TXT.into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_json(r#"{"modle": {}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = PipelineConfig::from_json(r#"{"probe": {"split": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_grid_rejected() {
        let err = PipelineConfig::from_json(r#"{"caa": {"alphas": []}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn template_split_partitions() {
        let s = split_templates(50, &SplitSection::default());
        assert_eq!((s.steer.len(), s.tune.len(), s.test.len()), (20, 15, 15));
        let all: BTreeSet<usize> = s.steer.iter().chain(&s.tune).chain(&s.test).copied().collect();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()).unwrap(), s);
        }
        assert_eq!(producer(&cache_path(VariationKind::Random)), Stage::Cache);
        assert_eq!(producer(ITI_PLAN), Stage::SteerIti);
        assert_eq!(producer(CAA_GRID), Stage::SteerCaa);
    }
}
