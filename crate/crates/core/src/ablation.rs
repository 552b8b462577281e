//! Stage-ordering and task-removal grid: pre-train each configuration, then
//! score it on toy downstream tasks drawn from held-out images.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_stage_corpus, generate, longest_stage_text, GeneratorConfig, Granularity, ImageTextExample, Lexicon, StageCorpus,
};
use crate::curriculum::{default_stage_tasks, run_schedule, Corpora, SchedulePlan, ScheduleMode, StageSpec};
use crate::error::{Error, Result};
use crate::finetune::{
    build_classification_task, classification_accuracy, evaluate_retrieval, finetune_classification, finetune_retrieval,
    zero_shot_retrieval, ClassificationTask, FinetuneConfig, MetricsTable, RetrievalSplit, DEFAULT_KS,
};
use crate::losses::Task;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::training::derive_seed;
use crate::transforms::{build_hard_sample_index, HardSampleIndex};

/// Task selection of a grid row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSelection {
    /// Each stage's default tasks minus the listed removals.
    Remove(BTreeSet<Task>),
    /// Each stage's default tasks intersected with the list. `plain_itm`
    /// means matching was requested without hard negatives.
    Only { tasks: BTreeSet<Task>, plain_itm: bool },
}

/// One configuration of the grid, e.g. `T->P->S - TITP`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRow {
    /// Empty for the no-pre-training baseline.
    pub stages: Vec<Granularity>,
    pub mode: ScheduleMode,
    pub selection: TaskSelection,
}

impl GridRow {
    pub fn vanilla() -> Self {
        Self {
            stages: Vec::new(),
            mode: ScheduleMode::Sequential,
            selection: TaskSelection::Remove(BTreeSet::new()),
        }
    }

    pub fn is_vanilla(&self) -> bool {
        self.stages.is_empty()
    }

    /// Tasks the row trains at granularity `g`.
    pub fn stage_tasks(&self, g: Granularity) -> BTreeSet<Task> {
        let defaults = default_stage_tasks(g);
        match &self.selection {
            TaskSelection::Remove(r) => defaults.difference(r).copied().collect(),
            TaskSelection::Only { tasks, .. } => defaults.intersection(tasks).copied().collect(),
        }
    }

    pub fn trains(&self, task: Task) -> bool {
        self.stages.iter().any(|&g| self.stage_tasks(g).contains(&task))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("malformed grid row {s:?}: {why}"));
        let s = s.trim();
        if s.eq_ignore_ascii_case("vanilla") {
            return Ok(Self::vanilla());
        }
        let mut normalized = s.replace('→', "->").replace(',', " ");
        for (spaced, tight) in [(" +", "+"), ("+ ", "+"), (" ->", "->"), ("-> ", "->")] {
            while normalized.contains(spaced) {
                normalized = normalized.replace(spaced, tight);
            }
        }
        let (plan, rest) = match normalized.find([' ', ':']) {
            Some(i) => normalized.split_at(i),
            None => (normalized.as_str(), ""),
        };
        let plan: String = plan.chars().filter(|c| !c.is_whitespace()).collect();
        let (mode, parts): (ScheduleMode, Vec<&str>) = if plan.contains('+') {
            (ScheduleMode::Joint, plan.split('+').collect())
        } else {
            (ScheduleMode::Sequential, plan.split("->").collect())
        };
        let mut stages = Vec::new();
        for p in parts {
            let mut chars = p.chars();
            let g = match (chars.next(), chars.next()) {
                (Some(c), None) => Granularity::from_letter(c.to_ascii_uppercase()),
                _ => None,
            }
            .ok_or_else(|| bad(&format!("unknown stage {p:?}")))?;
            if stages.contains(&g) {
                return Err(bad("stage listed twice"));
            }
            stages.push(g);
        }

        let rest = rest.trim();
        let selection = if let Some(list) = rest.strip_prefix(':') {
            let mut tasks = BTreeSet::new();
            let mut plain_itm = false;
            for name in list.split_whitespace() {
                if name == "ITM" {
                    plain_itm = true;
                    tasks.insert(Task::ItmHs);
                } else {
                    tasks.insert(name.parse().map_err(|_| bad(&format!("unknown task {name:?}")))?);
                }
            }
            if tasks.is_empty() {
                return Err(bad("empty task list"));
            }
            TaskSelection::Only { tasks, plain_itm }
        } else {
            let mut removed = BTreeSet::new();
            let mut tokens = rest.split_whitespace().peekable();
            while let Some(tok) = tokens.next() {
                let name = match tok.strip_prefix('-') {
                    Some("") => tokens.next().ok_or_else(|| bad("dangling '-'"))?,
                    Some(n) => n,
                    None => return Err(bad(&format!("expected '- TASK', found {tok:?}"))),
                };
                removed.insert(name.parse::<Task>().map_err(|_| bad(&format!("unknown task {name:?}")))?);
            }
            TaskSelection::Remove(removed)
        };
        let row = Self { stages, mode, selection };
        if let TaskSelection::Remove(r) = &row.selection {
            if let Some(t) = r.iter().find(|&&t| !row.stages.iter().any(|&g| default_stage_tasks(g).contains(&t))) {
                return Err(bad(&format!("{t} is not trained by any listed stage")));
            }
        }
        if let Some(&g) = row.stages.iter().find(|&&g| row.stage_tasks(g).is_empty()) {
            return Err(bad(&format!("{g} stage is left without tasks")));
        }
        Ok(row)
    }

    /// Builds the pre-training plan with every stage sharing `template`'s
    /// epochs, batch size and learning rate.
    pub fn plan(&self, template: &StageTemplate, seed: u64) -> Result<SchedulePlan> {
        if self.is_vanilla() {
            return Err(Error::Config("the vanilla row has no pre-training plan".into()));
        }
        let mut plan = SchedulePlan {
            mode: self.mode,
            stages: self
                .stages
                .iter()
                .map(|&g| StageSpec {
                    granularity: g,
                    tasks: self.stage_tasks(g),
                    epochs: template.epochs,
                    batch_size: template.batch_size,
                    learning_rate: template.learning_rate,
                })
                .collect(),
            seed,
            ..template.base.clone()
        };
        if let TaskSelection::Only { plain_itm: true, .. } = self.selection {
            plan.transform.hard_negatives = false;
        }
        plan.validate()?;
        Ok(plan)
    }
}

impl fmt::Display for GridRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_vanilla() {
            return f.write_str("vanilla");
        }
        let sep = match self.mode {
            ScheduleMode::Sequential => "->",
            ScheduleMode::Joint => "+",
        };
        let letters: Vec<String> = self.stages.iter().map(|g| g.letter().to_string()).collect();
        f.write_str(&letters.join(sep))?;
        match &self.selection {
            TaskSelection::Remove(r) => r.iter().try_for_each(|t| write!(f, " - {t}")),
            TaskSelection::Only { tasks, plain_itm } => {
                f.write_str(" :")?;
                for t in tasks {
                    match t {
                        Task::ItmHs if *plain_itm => f.write_str(" ITM")?,
                        t => write!(f, " {t}")?,
                    }
                }
                Ok(())
            }
        }
    }
}

impl FromStr for GridRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// One row per non-empty line; `#` starts a comment.
pub fn parse_grid(text: &str) -> Result<Vec<GridRow>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(GridRow::parse)
        .collect()
}

/// The full stage-ordering and task-removal grid, baseline first.
pub fn reference_grid() -> Vec<GridRow> {
    [
        "vanilla",
        "S",
        "S - ITM_HS",
        "S - ITM_HS - TITS",
        "T+P+S : MLM MRFR MOC ITM",
        "T->S",
        "T->S - IFRS",
        "P->S",
        "P->S - TITP",
        "T->P->S",
        "T->P->S - TITP",
        "S->P->T",
        "P->T->S",
    ]
    .iter()
    .map(|r| GridRow::parse(r).expect("reference grid rows parse"))
    .collect()
}

/// Per-stage budget shared by every grid row, plus the plan fields that are
/// not stage-specific.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTemplate {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base: SchedulePlan,
}

impl Default for StageTemplate {
    fn default() -> Self {
        let mut base = crate::curriculum::default_plan();
        base.stages.clear();
        Self {
            epochs: 16,
            batch_size: 32,
            learning_rate: 3e-4,
            base,
        }
    }
}

/// Sizes and budgets of a toy-scale grid run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub generator: GeneratorConfig,
    /// Images used for pre-training; the rest are split between fine-tuning
    /// and testing.
    pub n_pretrain: usize,
    pub n_finetune: usize,
    pub n_test: usize,
    pub hidden_size: usize,
    pub num_xlayers: usize,
    pub stage: StageTemplate,
    pub classification: FinetuneConfig,
    pub retrieval: FinetuneConfig,
    pub ks: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let finetune = FinetuneConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 32,
            freeze_encoder: false,
            seed: 0,
        };
        Self {
            generator: GeneratorConfig {
                n_images: 256,
                m_regions: 6,
                n_categories: 10,
                ..GeneratorConfig::default()
            },
            n_pretrain: 96,
            n_finetune: 128,
            n_test: 32,
            hidden_size: 64,
            num_xlayers: 2,
            stage: StageTemplate::default(),
            retrieval: FinetuneConfig {
                epochs: 5,
                learning_rate: 3e-4,
                ..finetune.clone()
            },
            classification: finetune,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

pub const COLUMNS: [&str; 5] = ["vqa", "ir_avg", "zs_ir_avg", "tr_avg", "zs_tr_avg"];

/// Pre-training corpora and downstream data shared by every grid row.
pub struct DownstreamSuite<T> {
    pub lexicon: Lexicon,
    pub model_config: ModelConfig,
    pub corpora: Corpora<T>,
    pub classification_train: ClassificationTask<T>,
    pub classification_test: ClassificationTask<T>,
    pub retrieval_train: StageCorpus<T>,
    pub retrieval_index: HardSampleIndex,
    pub retrieval_test: RetrievalSplit<T>,
}

impl<T: Scalar> DownstreamSuite<T> {
    /// Splits one generated corpus into pre-training, fine-tuning and test
    /// images. The vocabulary spans all of them.
    pub fn build(cfg: &AblationConfig, examples: &[ImageTextExample]) -> Result<Self> {
        let need = cfg.n_pretrain + cfg.n_finetune + cfg.n_test;
        if examples.len() < need {
            return Err(Error::Config(format!("ablation needs {need} images, corpus has {}", examples.len())));
        }
        let lexicon = Lexicon::build(examples)?;
        let (pre, rest) = examples.split_at(cfg.n_pretrain);
        let (ft, rest) = rest.split_at(cfg.n_finetune);
        let test = &rest[..cfg.n_test];

        let mut corpora = Corpora::new();
        for g in [Granularity::Token, Granularity::Phrase, Granularity::Sentence] {
            corpora.insert(g, build_stage_corpus(g, pre, &lexicon)?);
        }
        let retrieval_train = build_stage_corpus(Granularity::Sentence, ft, &lexicon)?;
        let retrieval_index = build_hard_sample_index(&retrieval_train, cfg.stage.base.hard_top_m)?;
        let test_corpus = build_stage_corpus(Granularity::Sentence, test, &lexicon)?;
        let mut model_config = ModelConfig::toy(lexicon.vocab.len(), lexicon.attributes.len(), cfg.generator.d_roi);
        model_config.hidden_size = cfg.hidden_size;
        model_config.num_xlayers = cfg.num_xlayers;
        model_config.max_regions = model_config.max_regions.max(cfg.generator.m_regions);
        model_config.max_text_len = model_config.max_text_len.max(longest_stage_text(examples, &lexicon)?);
        model_config.validate()?;
        Ok(Self {
            classification_train: build_classification_task(ft, &lexicon)?,
            classification_test: build_classification_task(test, &lexicon)?,
            retrieval_train,
            retrieval_index,
            retrieval_test: RetrievalSplit::from_corpus(&test_corpus),
            corpora,
            model_config,
            lexicon,
        })
    }
}

/// Metrics of one grid row; `None` where a cell does not apply (zero-shot
/// retrieval of a model that never trained a match head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: String,
    pub pretrain_steps: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
}

fn avg(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Pre-trains, fine-tunes and evaluates a single row.
pub fn run_row<T: Scalar>(row: &GridRow, suite: &DownstreamSuite<T>, cfg: &AblationConfig, seed: u64) -> Result<RowResult> {
    let mut model = Model::<T>::new(suite.model_config.clone(), derive_seed(&[seed, 0]))?;
    let mut steps = 0;
    if !row.is_vanilla() {
        let plan = row.plan(&cfg.stage, derive_seed(&[seed, 1]))?;
        steps = run_schedule(&mut model, &plan, &suite.corpora, &suite.lexicon.vocab)?.steps();
    }

    let mut metrics = BTreeMap::new();
    let zs = if row.trains(Task::ItmHs) {
        Some(zero_shot_retrieval(&model, &suite.retrieval_test, &cfg.ks)?)
    } else {
        None
    };
    metrics.insert("zs_ir_avg".to_string(), zs.as_ref().map(|m| avg(&m.ir)));
    metrics.insert("zs_tr_avg".to_string(), zs.as_ref().map(|m| avg(&m.tr)));

    let mut cls = model.clone();
    let ccfg = FinetuneConfig {
        seed: derive_seed(&[seed, 2]),
        ..cfg.classification.clone()
    };
    finetune_classification(&mut cls, &suite.classification_train, &ccfg)?;
    metrics.insert("vqa".to_string(), Some(classification_accuracy(&cls, &suite.classification_test)?));

    let rcfg = FinetuneConfig {
        seed: derive_seed(&[seed, 3]),
        ..cfg.retrieval.clone()
    };
    finetune_retrieval(&mut model, &suite.retrieval_train, &suite.retrieval_index, &rcfg)?;
    let ft = evaluate_retrieval(&model, &suite.retrieval_test, &cfg.ks)?;
    metrics.insert("ir_avg".to_string(), Some(ft.ir_avg()));
    metrics.insert("tr_avg".to_string(), Some(ft.tr_avg()));

    info!("grid row {row}: {steps} pre-training steps, {metrics:?}");
    Ok(RowResult {
        row: row.to_string(),
        pretrain_steps: steps,
        metrics,
    })
}

/// Runs every row against one shared suite and collects a table with the
/// [`COLUMNS`] schema.
pub fn run_ablation_grid<T: Scalar>(rows: &[GridRow], cfg: &AblationConfig, seed: u64) -> Result<(MetricsTable, Vec<RowResult>)> {
    if rows.is_empty() {
        return Err(Error::Config("ablation grid has no rows".into()));
    }
    let generator = GeneratorConfig {
        seed: derive_seed(&[seed, 10]),
        ..cfg.generator.clone()
    };
    let examples = generate(&generator)?;
    let suite = DownstreamSuite::<T>::build(cfg, &examples)?;
    let mut table = MetricsTable::new(COLUMNS);
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let r = run_row(row, &suite, cfg, seed)?;
        table.push(r.row.clone(), r.metrics.clone());
        results.push(r);
    }
    Ok((table, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_rows_drop_tasks_from_the_sentence_stage() {
        let row = GridRow::parse("S, - ITM_HS - TITS").unwrap();
        assert_eq!(row.stages, vec![Granularity::Sentence]);
        let want: BTreeSet<Task> = [Task::Mlm, Task::Mrfr, Task::Moc].into();
        assert_eq!(row.stage_tasks(Granularity::Sentence), want);
    }

    #[test]
    fn joint_row_uses_plain_matching() {
        let row = GridRow::parse("T + P + S : MLM MRFR MOC ITM").unwrap();
        assert_eq!(row.mode, ScheduleMode::Joint);
        assert!(row.stage_tasks(Granularity::Token).len() == 3);
        assert!(row.stage_tasks(Granularity::Sentence).contains(&Task::ItmHs));
        let plan = row.plan(&StageTemplate::default(), 0).unwrap();
        assert!(!plan.transform.hard_negatives);
        assert_eq!(plan.label(), "T+P+S");
    }

    #[test]
    fn arrows_and_display_round_trip() {
        for r in reference_grid() {
            assert_eq!(GridRow::parse(&r.to_string()).unwrap(), r);
        }
        assert_eq!(GridRow::parse("T→P→S - TITP").unwrap().to_string(), "T->P->S - TITP");
    }

    #[test]
    fn malformed_rows_are_rejected() {
        for bad in ["", "X->S", "S->S", "S - TITP", "S - FOO", "S : ", "S TITS", "T : TITS"] {
            assert!(GridRow::parse(bad).is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn grid_file_skips_comments() {
        let rows = parse_grid("# grid\nS\n\nT->S - IFRS # two stages\n").unwrap();
        assert_eq!(rows.len(), 2);
    }
}
