//! Stage specifications and the multi-stage training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Granularity, StageCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{LossReport, Task, TaskWeights};
use crate::model::Model;
use crate::optim::{all_trainable, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::training::{derive_seed, pretrain_gradients, seeded_rng};
use crate::transforms::{build_hard_sample_index, prepare_batch, BatchContext, HardSampleIndex, TransformConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScheduleMode {
    /// Stages run one after another, weights carried forward.
    Sequential,
    /// One loop interleaving batches of all stages round-robin.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub granularity: Granularity,
    pub tasks: BTreeSet<Task>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(format!("{} stage has no tasks", self.granularity)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("{} stage needs epochs and batch_size >= 1", self.granularity)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("{} stage learning rate must be positive", self.granularity)));
        }
        Ok(())
    }

    /// Optimizer steps for a corpus of `n` examples (last partial batch kept).
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub mode: ScheduleMode,
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub weights: TaskWeights,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Neighbours kept per image in the hard-sample index.
    #[serde(default = "default_top_m")]
    pub hard_top_m: usize,
}

fn default_top_m() -> usize {
    100
}

/// Tasks each granularity trains by default.
pub fn default_stage_tasks(g: Granularity) -> BTreeSet<Task> {
    let shared = [Task::Mlm, Task::Mrfr, Task::Moc];
    let extra: &[Task] = match g {
        Granularity::Token => &[Task::Ifrs],
        Granularity::Phrase => &[Task::Titp],
        Granularity::Sentence => &[Task::Tits, Task::ItmHs],
    };
    shared.iter().chain(extra).copied().collect()
}

/// Token (10 epochs, batch 64), phrase (20, 128) and sentence (20, 128)
/// stages in that order, learning rate 1e-5 throughout.
pub fn default_plan() -> SchedulePlan {
    let stage = |granularity, epochs, batch_size| StageSpec {
        granularity,
        tasks: default_stage_tasks(granularity),
        epochs,
        batch_size,
        learning_rate: 1e-5,
    };
    SchedulePlan {
        mode: ScheduleMode::Sequential,
        stages: vec![
            stage(Granularity::Token, 10, 64),
            stage(Granularity::Phrase, 20, 128),
            stage(Granularity::Sentence, 20, 128),
        ],
        seed: 0,
        transform: TransformConfig::default(),
        weights: TaskWeights::default(),
        adam: AdamConfig::default(),
        hard_top_m: default_top_m(),
    }
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("plan has no stages".into()));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    /// Compact label such as `T->P->S` or `T+P+S`.
    pub fn label(&self) -> String {
        let sep = match self.mode {
            ScheduleMode::Sequential => "->",
            ScheduleMode::Joint => "+",
        };
        self.stages
            .iter()
            .map(|s| s.granularity.letter().to_string())
            .collect::<Vec<_>>()
            .join(sep)
    }
}

/// One optimizer step in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step index across the schedule.
    pub step: usize,
    pub stage: Granularity,
    pub report: LossReport,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        self.report.log_line(self.step, &self.stage.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub label: String,
    pub records: Vec<StepRecord>,
    /// Parameter digests before the first and after the last step.
    pub initial_digest: String,
    pub final_digest: String,
}

impl StageLog {
    pub fn initial_aggregate(&self) -> Option<f64> {
        self.records.first().map(|r| r.report.aggregate)
    }

    /// Mean aggregate over the last `n` steps.
    pub fn final_aggregate(&self, n: usize) -> Option<f64> {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.report.aggregate).sum::<f64>() / tail.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLog {
    pub stages: Vec<StageLog>,
}

impl ScheduleLog {
    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.stages.iter().flat_map(|s| s.records.iter())
    }

    pub fn steps(&self) -> usize {
        self.stages.iter().map(|s| s.records.len()).sum()
    }

    /// Granularity of each step's corpus, in execution order.
    pub fn visits(&self) -> Vec<Granularity> {
        self.records().map(|r| r.stage).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records().map(|r| r.log_line() + "\n").collect()
    }
}

/// Everything a stage needs besides the model and the spec.
#[derive(Clone, Copy)]
pub struct StageEnv<'a> {
    pub vocab: &'a Vocabulary,
    pub transform: &'a TransformConfig,
    pub weights: &'a TaskWeights,
    pub adam: AdamConfig,
}

/// A scheduled batch: which stage and which corpus examples.
struct Planned {
    stage: usize,
    indices: Vec<usize>,
}

fn epoch_batches(n: usize, batch: usize, seed: u64, stage: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(&[seed, stage as u64, epoch as u64]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_stage_inputs<T: Scalar>(
    spec: &StageSpec,
    corpus: &StageCorpus<T>,
    hard_index: Option<&HardSampleIndex>,
    transform: &TransformConfig,
) -> Result<()> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyStageCorpus);
    }
    if corpus.granularity != spec.granularity {
        return Err(Error::Config(format!(
            "{} stage given a {} corpus",
            spec.granularity, corpus.granularity
        )));
    }
    if spec.tasks.contains(&Task::ItmHs) && transform.hard_negatives && hard_index.is_none() {
        return Err(Error::Config("ITM_HS with hard negatives requires a hard-sample index".into()));
    }
    Ok(())
}

struct Runner<'a, 'c, T> {
    model: &'a mut Model<T>,
    optimizer: Adam<T>,
    env: StageEnv<'c>,
    seed: u64,
    step: usize,
}

impl<T: Scalar> Runner<'_, '_, T> {
    fn run_step(
        &mut self,
        spec: &StageSpec,
        stage_index: usize,
        corpus: &StageCorpus<T>,
        hard_index: Option<&HardSampleIndex>,
        indices: &[usize],
    ) -> Result<StepRecord> {
        let step_seed = derive_seed(&[self.seed, stage_index as u64, self.step as u64]);
        let ctx = BatchContext {
            corpus,
            vocab: self.env.vocab,
            hard_index,
            tasks: &spec.tasks,
            config: self.env.transform,
        };
        let batch = prepare_batch(&ctx, indices, step_seed)?;
        let dropout = (self.model.config.dropout > 0.0).then_some(step_seed);
        let (report, grads) = pretrain_gradients(self.model, &batch, &spec.tasks, self.env.weights, dropout)?;
        self.optimizer
            .step(&mut self.model.params, &grads, spec.learning_rate, &all_trainable);
        let record = StepRecord {
            step: self.step,
            stage: spec.granularity,
            report,
        };
        debug!("{}", record.log_line());
        self.step += 1;
        Ok(record)
    }
}

/// Trains `model` on one stage: `epochs × ⌈n/batch⌉` Adam steps with a fresh
/// optimizer. `first_step` offsets the logged step numbers.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<T: Scalar>(
    model: &mut Model<T>,
    spec: &StageSpec,
    corpus: &StageCorpus<T>,
    hard_index: Option<&HardSampleIndex>,
    env: StageEnv<'_>,
    seed: u64,
    stage_index: usize,
    first_step: usize,
) -> Result<StageLog> {
    check_stage_inputs(spec, corpus, hard_index, env.transform)?;
    model.ensure_heads_for(spec.tasks.iter().copied());
    let initial_digest = model.digest();
    let mut runner = Runner {
        model,
        optimizer: Adam::new(env.adam),
        env,
        seed,
        step: first_step,
    };
    let mut records = Vec::with_capacity(spec.steps_for(corpus.len()));
    for epoch in 0..spec.epochs {
        for indices in epoch_batches(corpus.len(), spec.batch_size, seed, stage_index, epoch) {
            records.push(runner.run_step(spec, stage_index, corpus, hard_index, &indices)?);
        }
    }
    let final_digest = runner.model.digest();
    if let (Some(a), Some(b)) = (records.first(), records.last()) {
        info!(
            "{} stage: {} steps, aggregate {:.6} -> {:.6}",
            spec.granularity,
            records.len(),
            a.report.aggregate,
            b.report.aggregate
        );
    }
    Ok(StageLog {
        label: spec.granularity.letter().to_string(),
        records,
        initial_digest,
        final_digest,
    })
}

/// Stage corpora keyed by granularity.
pub type Corpora<T> = BTreeMap<Granularity, StageCorpus<T>>;

/// Runs every stage of `plan` on `model`.
pub fn run_schedule<T: Scalar>(
    model: &mut Model<T>,
    plan: &SchedulePlan,
    corpora: &Corpora<T>,
    vocab: &Vocabulary,
) -> Result<ScheduleLog> {
    plan.validate()?;
    for s in &plan.stages {
        if !corpora.contains_key(&s.granularity) {
            return Err(Error::MissingCorpus(s.granularity.to_string()));
        }
    }
    let mut indices: BTreeMap<Granularity, HardSampleIndex> = BTreeMap::new();
    for s in &plan.stages {
        if s.tasks.contains(&Task::ItmHs) && plan.transform.hard_negatives && !indices.contains_key(&s.granularity) {
            indices.insert(s.granularity, build_hard_sample_index(&corpora[&s.granularity], plan.hard_top_m)?);
        }
    }
    let env = StageEnv {
        vocab,
        transform: &plan.transform,
        weights: &plan.weights,
        adam: plan.adam,
    };
    match plan.mode {
        ScheduleMode::Sequential => {
            let mut log = ScheduleLog::default();
            for (i, spec) in plan.stages.iter().enumerate() {
                let first = log.steps();
                let stage = run_stage(
                    model,
                    spec,
                    &corpora[&spec.granularity],
                    indices.get(&spec.granularity),
                    env,
                    plan.seed,
                    i,
                    first,
                )?;
                log.stages.push(stage);
            }
            Ok(log)
        }
        ScheduleMode::Joint => run_joint(model, plan, corpora, &indices, env),
    }
}

fn run_joint<T: Scalar>(
    model: &mut Model<T>,
    plan: &SchedulePlan,
    corpora: &Corpora<T>,
    indices: &BTreeMap<Granularity, HardSampleIndex>,
    env: StageEnv<'_>,
) -> Result<ScheduleLog> {
    for spec in &plan.stages {
        let corpus = &corpora[&spec.granularity];
        check_stage_inputs(spec, corpus, indices.get(&spec.granularity), env.transform)?;
        model.ensure_heads_for(spec.tasks.iter().copied());
    }
    let initial_digest = model.digest();
    let epochs = plan.stages.iter().map(|s| s.epochs).max().unwrap_or(0);
    let mut runner = Runner {
        model,
        optimizer: Adam::new(env.adam),
        env,
        seed: plan.seed,
        step: 0,
    };
    let mut records = Vec::new();
    for epoch in 0..epochs {
        let mut queues: Vec<std::vec::IntoIter<Planned>> = plan
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| epoch < s.epochs)
            .map(|(i, s)| {
                let n = corpora[&s.granularity].len();
                epoch_batches(n, s.batch_size, plan.seed, i, epoch)
                    .into_iter()
                    .map(|indices| Planned { stage: i, indices })
                    .collect::<Vec<_>>()
                    .into_iter()
            })
            .collect();
        loop {
            let mut any = false;
            for q in &mut queues {
                if let Some(p) = q.next() {
                    any = true;
                    let spec = &plan.stages[p.stage];
                    let corpus = &corpora[&spec.granularity];
                    let ix = indices.get(&spec.granularity);
                    records.push(runner.run_step(spec, p.stage, corpus, ix, &p.indices)?);
                }
            }
            if !any {
                break;
            }
        }
    }
    let final_digest = runner.model.digest();
    Ok(ScheduleLog {
        stages: vec![StageLog {
            label: plan.label(),
            records,
            initial_digest,
            final_digest,
        }],
    })
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Sequential => "SEQUENTIAL",
            ScheduleMode::Joint => "JOINT",
        })
    }
}
