//! The six subcommands. Each reads what it needs from the run's config table
//! and records the files it writes.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::Deserialize;
use toml::{Table, Value};

use msp::ablation::{parse_grid, reference_grid, run_ablation_grid, AblationConfig};
use msp::corpus::{
    build_stage_corpus, generate, load_corpus, longest_stage_text, save_corpus, GeneratorConfig, Granularity, ImageTextExample,
    Lexicon,
};
use msp::curriculum::{default_stage_tasks, run_schedule, Corpora, SchedulePlan};
use msp::finetune::{
    build_classification_task, classification_accuracy, evaluate_retrieval, finetune_classification, finetune_retrieval,
    FinetuneConfig, FinetuneLog, MetricsTable, RetrievalMetrics, RetrievalSplit, DEFAULT_KS,
};
use msp::model::{Head, Model, ModelConfig};
use msp::training::derive_seed;
use msp::transforms::build_hard_sample_index;
use msp::verify::{run_verify, VerifyConfig};

use crate::config::{self, require, required_section, section};
use crate::manifest::file_digest;

/// Training precision of every command.
type F = f32;

pub const PRETRAINED: &str = "pretrained.json";

/// Checkpoint format or configuration incompatible with the run.
#[derive(Debug)]
pub struct VersionError(pub String);

impl fmt::Display for VersionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "version error: {}", self.0)
    }
}

impl std::error::Error for VersionError {}

/// State shared by the commands and the manifest writer.
pub struct Run {
    pub table: Table,
    pub seed: u64,
    /// Relative config paths resolve against this directory; the manifest
    /// lands here too.
    pub base: PathBuf,
    pub stage: String,
    pub outputs: Vec<(PathBuf, String)>,
}

impl Run {
    pub fn enter(&mut self, stage: &str) {
        info!("stage: {stage}");
        self.stage = stage.to_string();
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        config::path(&self.table, name, &self.base)
    }

    fn out_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.path(name)?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name)?;
        if !p.exists() {
            bail!("paths.{name} = {} does not exist", p.display());
        }
        Ok(p)
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> Result<()> {
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(path)
    }

    fn record(&mut self, path: PathBuf) -> Result<()> {
        let digest = file_digest(&path)?;
        self.outputs.push((path, digest));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared loading
// ---------------------------------------------------------------------------

/// Image counts of the pre-training, fine-tuning and test splits, taken in
/// that order from the corpus. Unset counts default to a half / quarter /
/// quarter division.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSplit {
    n_pretrain: Option<usize>,
    n_finetune: Option<usize>,
    n_test: Option<usize>,
}

struct Data {
    examples: Vec<ImageTextExample>,
    lexicon: Lexicon,
    pretrain: Range<usize>,
    finetune: Range<usize>,
    test: Range<usize>,
}

impl Data {
    fn load(run: &mut Run) -> Result<Self> {
        run.enter("load corpus");
        let path = run.input("corpus")?;
        let examples = load_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))?;
        let n = examples.len();
        let split: DataSplit = section(&run.table, "data")?;
        let n_test = split.n_test.unwrap_or(n / 4);
        let n_finetune = split.n_finetune.unwrap_or(n / 4);
        let n_pretrain = split.n_pretrain.unwrap_or(n.saturating_sub(n_test + n_finetune));
        if n_pretrain + n_finetune + n_test > n {
            bail!("data split needs {} images, corpus has {n}", n_pretrain + n_finetune + n_test);
        }
        let lexicon = Lexicon::build(&examples)?;
        Ok(Self {
            pretrain: 0..n_pretrain,
            finetune: n_pretrain..n_pretrain + n_finetune,
            test: n - n_test..n,
            examples,
            lexicon,
        })
    }

    fn slice(&self, r: &Range<usize>) -> &[ImageTextExample] {
        &self.examples[r.clone()]
    }

    fn d_roi(&self) -> usize {
        self.examples[0].features.first().map_or(0, Vec::len)
    }

    fn max_regions(&self) -> usize {
        self.examples.iter().map(ImageTextExample::region_count).max().unwrap_or(0)
    }
}

/// Keys of the model block that are fixed by the corpus.
const DERIVED_MODEL_KEYS: [&str; 3] = ["vocab_size", "n_attr", "d_roi"];

/// The `[model]` block laid over the toy defaults, with sizes the corpus
/// dictates filled in.
fn model_config(run: &Run, data: &Data) -> Result<ModelConfig> {
    let user = require(&run.table, "model")?
        .as_table()
        .context("config key `model` must be a table")?;
    let toy = ModelConfig::toy(data.lexicon.vocab.len(), data.lexicon.attributes.len(), data.d_roi());
    let Value::Table(mut merged) = Value::try_from(&toy)? else {
        unreachable!("a struct serializes to a table")
    };
    for (k, v) in user {
        if DERIVED_MODEL_KEYS.contains(&k.as_str()) {
            warn!("model.{k} is derived from the corpus; the configured value is ignored");
        } else {
            merged.insert(k.clone(), v.clone());
        }
    }
    let mut cfg: ModelConfig = Value::Table(merged).try_into().context("config section `model`")?;
    cfg.max_regions = cfg.max_regions.max(data.max_regions());
    cfg.max_text_len = cfg.max_text_len.max(longest_stage_text(&data.examples, &data.lexicon)?);
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint and insists it was written for `expected`.
fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<Model<F>> {
    let (model, _) = Model::<F>::load(path).map_err(|e| match e {
        msp::Error::Version { .. } => anyhow::Error::new(VersionError(format!("{}: {e}", path.display()))),
        other => anyhow::Error::new(other).context(format!("loading checkpoint {}", path.display())),
    })?;
    if model.config != *expected {
        let have = serde_json::to_value(&model.config)?;
        let want = serde_json::to_value(expected)?;
        let fields: Vec<String> = want
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| have.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k} (checkpoint {}, config {v})", have[k.as_str()]))
            .collect();
        return Err(VersionError(format!(
            "checkpoint {} was written for a different model configuration: {}",
            path.display(),
            fields.join(", ")
        ))
        .into());
    }
    Ok(model)
}

fn retrieval_split(data: &Data) -> Result<RetrievalSplit<F>> {
    let corpus = build_stage_corpus(Granularity::Sentence, data.slice(&data.test), &data.lexicon)?;
    Ok(RetrievalSplit::from_corpus(&corpus))
}

fn losses_jsonl(log: &FinetuneLog) -> String {
    log.losses
        .iter()
        .enumerate()
        .map(|(step, loss)| format!("{{\"step\":{step},\"loss\":{loss:.6}}}\n"))
        .collect()
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn generate_cmd(run: &mut Run) -> Result<()> {
    let path = run.path("corpus")?;
    let mut cfg: GeneratorConfig = section(&run.table, "generator")?;
    cfg.seed = run.seed;
    run.enter("generate");
    let examples = generate(&cfg)?;
    run.enter("write corpus");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_corpus(&path, &examples)?;
    info!("wrote {} images to {}", examples.len(), path.display());
    run.record(path)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

/// The `[plan]` block. Stages without a task list get their granularity's
/// defaults and the plan seed always derives from the run seed.
fn schedule_plan(run: &Run) -> Result<SchedulePlan> {
    let mut plan = require(&run.table, "plan")?.clone();
    let t = plan.as_table_mut().context("config key `plan` must be a table")?;
    if let Some(Value::Array(stages)) = t.get_mut("stages") {
        for stage in stages.iter_mut().filter_map(Value::as_table_mut) {
            if stage.contains_key("tasks") {
                continue;
            }
            let g: Granularity = stage
                .get("granularity")
                .cloned()
                .context("missing config key `plan.stages.granularity`")?
                .try_into()
                .context("config key `plan.stages.granularity`")?;
            let names = default_stage_tasks(g).into_iter().map(|t| Value::String(t.name().into()));
            stage.insert("tasks".into(), Value::Array(names.collect()));
        }
    }
    t.insert("seed".into(), Value::Integer(0));
    let mut plan: SchedulePlan = plan.try_into().context("config section `plan`")?;
    plan.seed = derive_seed(&[run.seed, 1]);
    plan.validate()?;
    Ok(plan)
}

pub fn pretrain_cmd(run: &mut Run) -> Result<()> {
    require(&run.table, "plan")?;
    let data = Data::load(run)?;
    let model_cfg = model_config(run, &data)?;
    let plan = schedule_plan(run)?;
    let ck_dir = run.out_dir("checkpoints")?;
    let log_dir = run.out_dir("logs")?;

    run.enter("build stage corpora");
    let mut corpora = Corpora::new();
    for s in &plan.stages {
        if !corpora.contains_key(&s.granularity) {
            let c = build_stage_corpus(s.granularity, data.slice(&data.pretrain), &data.lexicon)?;
            corpora.insert(s.granularity, c);
        }
    }

    run.enter("pretrain");
    let mut model = Model::<F>::new(model_cfg, derive_seed(&[run.seed, 0]))?;
    let log = run_schedule(&mut model, &plan, &corpora, &data.lexicon.vocab)?;

    run.enter("write checkpoint");
    let meta = serde_json::json!({
        "plan": plan.label(),
        "steps": log.steps(),
        "stages": log.stages.iter().map(|s| serde_json::json!({
            "label": s.label,
            "steps": s.records.len(),
            "initial_digest": s.initial_digest,
            "final_digest": s.final_digest,
        })).collect::<Vec<_>>(),
    });
    let ck = ck_dir.join(PRETRAINED);
    model.save(&ck, meta)?;
    info!("checkpoint {} digest {}", ck.display(), model.digest());
    run.record(ck)?;
    run.write(log_dir.join("pretrain.jsonl"), &log.to_jsonl())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum DownstreamTask {
    Classification,
    Retrieval,
}

impl DownstreamTask {
    fn name(self) -> &'static str {
        match self {
            DownstreamTask::Classification => "classification",
            DownstreamTask::Retrieval => "retrieval",
        }
    }

    fn checkpoint(self) -> String {
        format!("finetuned-{}.json", self.name())
    }
}

#[derive(Debug, Deserialize)]
struct FinetuneSection {
    task: DownstreamTask,
    #[serde(flatten)]
    train: FinetuneConfig,
}

pub fn finetune_cmd(run: &mut Run) -> Result<()> {
    require(&run.table, "finetune.task")?;
    let section: FinetuneSection = required_section(&run.table, "finetune")?;
    let data = Data::load(run)?;
    let model_cfg = model_config(run, &data)?;
    let ck_dir = run.path("checkpoints")?;
    let log_dir = run.out_dir("logs")?;

    run.enter("load checkpoint");
    let mut model = load_checkpoint(&ck_dir.join(PRETRAINED), &model_cfg)?;
    let cfg = FinetuneConfig {
        seed: derive_seed(&[run.seed, 2]),
        ..section.train
    };
    let train = data.slice(&data.finetune);
    run.enter("finetune");
    let log = match section.task {
        DownstreamTask::Classification => {
            let task = build_classification_task::<F>(train, &data.lexicon)?;
            finetune_classification(&mut model, &task, &cfg)?
        }
        DownstreamTask::Retrieval => {
            let corpus = build_stage_corpus(Granularity::Sentence, train, &data.lexicon)?;
            let top_m = match config::get(&run.table, "plan.hard_top_m") {
                Some(v) => v.clone().try_into().context("config key `plan.hard_top_m`")?,
                None => 100,
            };
            let index = build_hard_sample_index(&corpus, top_m)?;
            finetune_retrieval(&mut model, &corpus, &index, &cfg)?
        }
    };

    run.enter("write checkpoint");
    let ck = ck_dir.join(section.task.checkpoint());
    model.save(&ck, serde_json::json!({ "task": section.task.name(), "steps": log.losses.len() }))?;
    run.record(ck)?;
    run.write(log_dir.join(format!("finetune-{}.jsonl", section.task.name())), &losses_jsonl(&log))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateSection {
    ks: Vec<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec() }
    }
}

fn retrieval_columns(ks: &[usize]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for dir in ["ir", "tr"] {
        cols.extend(ks.iter().map(|k| format!("{dir}_r@{k}")));
        cols.push(format!("{dir}_avg"));
    }
    cols.push("accuracy".into());
    cols
}

fn retrieval_values(m: &RetrievalMetrics) -> Vec<(String, Option<f64>)> {
    let mut out = Vec::new();
    for (dir, vals, avg) in [("ir", &m.ir, m.ir_avg()), ("tr", &m.tr, m.tr_avg())] {
        out.extend(m.ks.iter().zip(vals).map(|(k, v)| (format!("{dir}_r@{k}"), Some(*v))));
        out.push((format!("{dir}_avg"), Some(avg)));
    }
    out
}

pub fn evaluate_cmd(run: &mut Run) -> Result<()> {
    let eval: EvaluateSection = section(&run.table, "evaluate")?;
    let data = Data::load(run)?;
    let model_cfg = model_config(run, &data)?;
    let ck_dir = run.path("checkpoints")?;
    let reports = run.out_dir("reports")?;
    let split = retrieval_split(&data)?;

    let mut table = MetricsTable::new(retrieval_columns(&eval.ks));
    let candidates = [
        (PRETRAINED.to_string(), "pretrained (zero-shot)"),
        (DownstreamTask::Retrieval.checkpoint(), "finetuned retrieval"),
        (DownstreamTask::Classification.checkpoint(), "finetuned classification"),
    ];
    for (file, label) in candidates {
        let path = ck_dir.join(&file);
        if !path.exists() {
            continue;
        }
        run.enter(&format!("evaluate {file}"));
        let model = load_checkpoint(&path, &model_cfg)?;
        let mut values = std::collections::BTreeMap::new();
        if model.has_head(Head::Match) {
            values.extend(retrieval_values(&evaluate_retrieval(&model, &split, &eval.ks)?));
        }
        if model.has_head(Head::Classifier) {
            let task = build_classification_task::<F>(data.slice(&data.test), &data.lexicon)?;
            values.insert("accuracy".into(), Some(classification_accuracy(&model, &task)?));
        }
        table.push(label, values);
    }
    if table.rows.is_empty() {
        bail!("no checkpoint to evaluate in {}", ck_dir.display());
    }

    run.enter("write report");
    let csv = table.to_csv();
    print!("{csv}");
    run.write(reports.join("metrics.csv"), &csv)?;
    run.write(reports.join("metrics.json"), &table.to_json()?)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn ablate_cmd(run: &mut Run) -> Result<()> {
    let reports = run.out_dir("reports")?;
    let mut section = match config::get(&run.table, "ablation") {
        Some(Value::Table(t)) => t.clone(),
        Some(_) => bail!("config key `ablation` must be a table"),
        None => Table::new(),
    };
    let rows = match section.remove("grid") {
        Some(Value::String(p)) => {
            let path = run.base.join(p);
            run.enter("read grid");
            let text = fs::read_to_string(&path).with_context(|| format!("reading grid {}", path.display()))?;
            parse_grid(&text).with_context(|| format!("parsing grid {}", path.display()))?
        }
        Some(_) => bail!("config key `ablation.grid` must be a path string"),
        None => reference_grid(),
    };
    let cfg: AblationConfig = Value::Table(section).try_into().context("config section `ablation`")?;

    run.enter("ablate");
    let (table, results) = run_ablation_grid::<F>(&rows, &cfg, run.seed)?;

    run.enter("write report");
    let csv = table.to_csv();
    print!("{csv}");
    run.write(reports.join("ablation.csv"), &csv)?;
    run.write(reports.join("ablation.json"), &(serde_json::to_string_pretty(&results)? + "\n"))
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

pub fn verify_cmd(run: &mut Run) -> Result<()> {
    let mut cfg: VerifyConfig = section(&run.table, "verify")?;
    cfg.seed = run.seed;
    run.enter("verify");
    let report = run_verify(&cfg)?;
    let text: String = report.lines().into_iter().map(|l| l + "\n").collect();
    print!("{text}");

    run.enter("write report");
    let dir = match config::get(&run.table, "paths.reports") {
        Some(_) => run.out_dir("reports")?,
        None => run.base.clone(),
    };
    run.write(dir.join("verify.txt"), &text)?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        run.enter("verify");
        bail!("{failed} of {} verification checks failed", report.checks.len());
    }
    Ok(())
}
