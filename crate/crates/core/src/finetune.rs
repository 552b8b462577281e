//! Downstream tasks: answer classification, image-text retrieval and recall
//! metrics.

use std::collections::BTreeMap;

use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageTextExample, Lexicon, RegionSet, StageCorpus};
use crate::error::{Error, Result};
use crate::losses::{loss_classification, loss_itm_hs};
use crate::model::{ExampleInput, Head, Model};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::training::{derive_seed, parallel_grad, seeded_rng};
use crate::transforms::{stream_rng, HardSampleIndex, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Train only the new head.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 5e-5,
            batch_size: 32,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tuning needs epochs and batch_size >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("fine-tuning learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

fn full_input<'a, T: Scalar>(text: &'a [usize], regions: &'a RegionSet<T>, text_mask: &'a [bool], region_mask: &'a [bool]) -> ExampleInput<'a, T> {
    ExampleInput {
        text_ids: text,
        text_mask,
        features: &regions.features,
        boxes: &regions.boxes,
        region_mask,
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationExample<T> {
    pub image_id: String,
    pub text_ids: Vec<usize>,
    pub regions: RegionSet<T>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationTask<T> {
    pub examples: Vec<ClassificationExample<T>>,
    pub n_classes: usize,
}

/// Question `the <category> is` about the first region whose category occurs
/// once in the image; the answer is that region's attribute class. Images
/// without such a region are skipped.
pub fn build_classification_task<T: Scalar>(examples: &[ImageTextExample], lex: &Lexicon) -> Result<ClassificationTask<T>> {
    let mut out = Vec::new();
    for ex in examples {
        let regions: RegionSet<T> = lex.resolve_regions(ex)?;
        let unique = (0..regions.len()).find(|&i| {
            regions.category_ids.iter().filter(|&&c| c == regions.category_ids[i]).count() == 1
        });
        let Some(r) = unique else { continue };
        let body = lex.vocab.encode(&["the", ex.categories[r].as_str(), "is"])?;
        let mut text_ids = vec![lex.vocab.cls()];
        text_ids.extend(body);
        text_ids.push(lex.vocab.sep());
        out.push(ClassificationExample {
            image_id: ex.image_id.clone(),
            text_ids,
            answer: regions.attribute_ids[r],
            regions,
        });
    }
    Ok(ClassificationTask {
        examples: out,
        n_classes: lex.attributes.len(),
    })
}

/// Attaches a fresh `pooled → n_classes` head and trains it jointly with the
/// encoder (or alone when frozen) under cross-entropy.
pub fn finetune_classification<T: Scalar>(
    model: &mut Model<T>,
    task: &ClassificationTask<T>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneLog> {
    cfg.validate()?;
    if task.n_classes < 2 {
        return Err(Error::Config(format!("classification needs at least 2 classes, got {}", task.n_classes)));
    }
    if task.examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.ensure_head(Head::Classifier, task.n_classes);
    let mut opt = Adam::new(AdamConfig::default());
    let frozen = cfg.freeze_encoder;
    let trainable = move |name: &str| !frozen || name.starts_with(Head::Classifier.prefix());
    let mut log = FinetuneLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.examples.len()).collect();
        order.shuffle(&mut seeded_rng(&[cfg.seed, 1, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let step_seed = derive_seed(&[cfg.seed, 2, step]);
            let answers: Vec<usize> = batch.iter().map(|&i| task.examples[i].answer).collect();
            let m: &Model<T> = model;
            let (loss, grads) = parallel_grad(
                m,
                batch.len(),
                |k, g| {
                    let ex = &task.examples[batch[k]];
                    let tm = vec![true; ex.text_ids.len()];
                    let rm = vec![true; ex.regions.len()];
                    let mut rng = (m.config.dropout > 0.0).then(|| stream_rng(step_seed, k as u64, Stream::Dropout));
                    let enc = m.encode_nodes(g, &full_input(&ex.text_ids, &ex.regions, &tm, &rm), rng.as_mut())?;
                    Ok(vec![Some(m.head_node(g, Head::Classifier, enc.pooled)?)])
                },
                |values| {
                    let rows: Vec<&Matrix<T>> = values.iter().map(|v| v[0].as_ref().expect("classifier output")).collect();
                    let l = loss_classification(&Matrix::vstack(&rows), &answers)?;
                    let seeds = (0..rows.len()).map(|k| vec![Some(l.grad.row_matrix(k))]).collect();
                    Ok((l.value.as_f64(), seeds))
                },
            )?;
            opt.step(&mut model.params, &grads, cfg.learning_rate, &trainable);
            log.losses.push(loss);
            step += 1;
        }
    }
    info!("classification fine-tuning: {} steps, final loss {:.6}", step, log.losses.last().copied().unwrap_or(0.0));
    Ok(log)
}

/// Fraction of examples whose arg-max class equals the answer.
pub fn classification_accuracy<T: Scalar>(model: &Model<T>, task: &ClassificationTask<T>) -> Result<f64> {
    if task.examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = task
        .examples
        .par_iter()
        .map(|ex| {
            let tm = vec![true; ex.text_ids.len()];
            let rm = vec![true; ex.regions.len()];
            let out = model.encode(&full_input(&ex.text_ids, &ex.regions, &tm, &rm))?;
            let logits = model.apply_head(Head::Classifier, &out.pooled)?;
            let best = (0..logits.cols())
                .max_by(|&a, &b| logits[(0, a)].partial_cmp(&logits[(0, b)]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .unwrap_or(0);
            Ok(usize::from(best == ex.answer))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / task.examples.len() as f64)
}

// ---------------------------------------------------------------------------
// Retrieval fine-tuning
// ---------------------------------------------------------------------------

/// A text paired with (possibly another example's) image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalItem {
    pub text: usize,
    pub image: usize,
    pub label: u8,
}

/// Items per positive pair: the positive, two uniform negatives, one hard
/// negative from the index.
pub const ITEMS_PER_POSITIVE: usize = 4;

/// One group of four items per corpus example. The hard negative falls back to
/// a uniform draw when the index has no usable neighbour.
pub fn retrieval_items<T: Scalar, R: Rng + ?Sized>(
    corpus: &StageCorpus<T>,
    index: &HardSampleIndex,
    rng: &mut R,
) -> Result<Vec<RetrievalItem>> {
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "retrieval fine-tuning needs at least 3 images to draw 2 distinct random negatives, got {n}"
        )));
    }
    let mut items = Vec::with_capacity(ITEMS_PER_POSITIVE * n);
    for (i, ex) in corpus.examples.iter().enumerate() {
        items.push(RetrievalItem { text: i, image: i, label: 1 });
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let picks: Vec<usize> = others.choose_multiple(rng, 2).copied().collect();
        for &j in &picks {
            items.push(RetrievalItem { text: i, image: j, label: 0 });
        }
        let hard: Vec<usize> = index
            .neighbors(&ex.image_id)
            .iter()
            .filter_map(|nb| corpus.position(&nb.image_id))
            .filter(|&j| j != i)
            .collect();
        let image = if hard.is_empty() {
            others[rng.random_range(0..others.len())]
        } else {
            hard[rng.random_range(0..hard.len())]
        };
        items.push(RetrievalItem { text: i, image, label: 0 });
    }
    Ok(items)
}

/// Trains the match head (and encoder) with binary cross-entropy on
/// [`retrieval_items`] redrawn every epoch.
pub fn finetune_retrieval<T: Scalar>(
    model: &mut Model<T>,
    corpus: &StageCorpus<T>,
    index: &HardSampleIndex,
    cfg: &FinetuneConfig,
) -> Result<FinetuneLog> {
    cfg.validate()?;
    model.ensure_head(Head::Match, 0);
    let mut opt = Adam::new(AdamConfig::default());
    let frozen = cfg.freeze_encoder;
    let trainable = move |name: &str| !frozen || name.starts_with(Head::Match.prefix());
    let mut log = FinetuneLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut rng = seeded_rng(&[cfg.seed, 3, epoch as u64]);
        let mut items = retrieval_items(corpus, index, &mut rng)?;
        items.shuffle(&mut rng);
        for batch in items.chunks(cfg.batch_size) {
            let step_seed = derive_seed(&[cfg.seed, 4, step]);
            let labels: Vec<u8> = batch.iter().map(|it| it.label).collect();
            let m: &Model<T> = model;
            let (loss, grads) = parallel_grad(
                m,
                batch.len(),
                |k, g| {
                    let it = batch[k];
                    let text = &corpus.examples[it.text].text_ids;
                    let regions = &corpus.examples[it.image].regions;
                    let tm = vec![true; text.len()];
                    let rm = vec![true; regions.len()];
                    let mut rng = (m.config.dropout > 0.0).then(|| stream_rng(step_seed, k as u64, Stream::Dropout));
                    let enc = m.encode_nodes(g, &full_input(text, regions, &tm, &rm), rng.as_mut())?;
                    Ok(vec![Some(m.head_node(g, Head::Match, enc.pooled)?)])
                },
                |values| {
                    let rows: Vec<&Matrix<T>> = values.iter().map(|v| v[0].as_ref().expect("match output")).collect();
                    let l = loss_itm_hs(&Matrix::vstack(&rows), &labels)?;
                    let seeds = (0..rows.len()).map(|k| vec![Some(l.grad.row_matrix(k))]).collect();
                    Ok((l.value.as_f64(), seeds))
                },
            )?;
            opt.step(&mut model.params, &grads, cfg.learning_rate, &trainable);
            log.losses.push(loss);
            step += 1;
        }
    }
    info!("retrieval fine-tuning: {} steps, final loss {:.6}", step, log.losses.last().copied().unwrap_or(0.0));
    Ok(log)
}

// ---------------------------------------------------------------------------
// Recall@K
// ---------------------------------------------------------------------------

/// Captions and images of a retrieval test split. `gold[q]` is the gallery
/// index of caption `q`'s image.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalSplit<T> {
    pub caption_ids: Vec<String>,
    pub captions: Vec<Vec<usize>>,
    pub image_ids: Vec<String>,
    pub images: Vec<RegionSet<T>>,
    pub gold: Vec<usize>,
}

impl<T: Scalar> RetrievalSplit<T> {
    /// One caption per image, each paired with its own image.
    pub fn from_corpus(corpus: &StageCorpus<T>) -> Self {
        let ids: Vec<String> = corpus.examples.iter().map(|e| e.image_id.clone()).collect();
        Self {
            caption_ids: ids.clone(),
            captions: corpus.examples.iter().map(|e| e.text_ids.clone()).collect(),
            image_ids: ids,
            images: corpus.examples.iter().map(|e| e.regions.clone()).collect(),
            gold: (0..corpus.len()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.captions.len() != self.gold.len() || self.caption_ids.len() != self.captions.len() {
            return Err(Error::Invalid("caption, id and gold lists differ in length".into()));
        }
        if self.image_ids.len() != self.images.len() || self.images.is_empty() {
            return Err(Error::Invalid("retrieval gallery is empty or mislabelled".into()));
        }
        if let Some(&g) = self.gold.iter().find(|&&g| g >= self.images.len()) {
            return Err(Error::Invalid(format!("gold image {g} is not in the gallery")));
        }
        Ok(())
    }

    /// For each image, the caption whose gold it is. Requires a bijection.
    fn inverse_gold(&self) -> Result<Vec<usize>> {
        let mut inv = vec![usize::MAX; self.images.len()];
        for (q, &g) in self.gold.iter().enumerate() {
            if inv[g] != usize::MAX {
                return Err(Error::Invalid(format!("image {} is gold for two captions", self.image_ids[g])));
            }
            inv[g] = q;
        }
        if inv.contains(&usize::MAX) {
            return Err(Error::Invalid("some image has no gold caption".into()));
        }
        Ok(inv)
    }
}

/// Rank of the gold item for each query: items scoring higher, or tying with a
/// smaller gallery id, come first.
pub fn gold_ranks(scores: &Matrix<f64>, gold: &[usize], gallery_ids: &[String]) -> Vec<usize> {
    (0..scores.rows())
        .map(|q| {
            let row = scores.row(q);
            let g = gold[q];
            (0..row.len())
                .filter(|&j| j != g)
                .filter(|&j| row[j] > row[g] || (row[j] == row[g] && gallery_ids[j] < gallery_ids[g]))
                .count()
        })
        .collect()
}

/// R@k for each cutoff: the fraction of queries whose gold ranks in the top k.
pub fn recall_at_k(scores: &Matrix<f64>, gold: &[usize], gallery_ids: &[String], ks: &[usize]) -> Result<Vec<f64>> {
    if scores.rows() != gold.len() || scores.cols() != gallery_ids.len() {
        return Err(Error::Shape(format!(
            "scores {:?} for {} queries and {} gallery items",
            scores.shape(),
            gold.len(),
            gallery_ids.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    let gallery = gallery_ids.len();
    for &k in ks {
        if k == 0 {
            return Err(Error::Invalid("cutoff k must be at least 1".into()));
        }
        if k > gallery {
            return Err(Error::CutoffTooLarge { k, gallery });
        }
    }
    let ranks = gold_ranks(scores, gold, gallery_ids);
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Recall with an arbitrary `(query, gallery item) → score` function.
pub fn evaluate_recall_at_k(
    n_queries: usize,
    gallery_ids: &[String],
    gold: &[usize],
    scorer: impl Fn(usize, usize) -> f64 + Sync,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let g = gallery_ids.len();
    let data: Vec<f64> = (0..n_queries * g).into_par_iter().map(|i| scorer(i / g, i % g)).collect();
    recall_at_k(&Matrix::from_vec(n_queries, g, data), gold, gallery_ids, ks)
}

/// Match logits for every (caption, image) pair, captions as rows.
pub fn score_matrix<T: Scalar>(model: &Model<T>, split: &RetrievalSplit<T>) -> Result<Matrix<f64>> {
    split.validate()?;
    if !model.has_head(Head::Match) {
        return Err(Error::MissingHead("match".into()));
    }
    let g = split.images.len();
    let data = (0..split.captions.len() * g)
        .into_par_iter()
        .map(|i| {
            let (text, regions) = (&split.captions[i / g], &split.images[i % g]);
            let tm = vec![true; text.len()];
            let rm = vec![true; regions.len()];
            let out = model.encode(&full_input(text, regions, &tm, &rm))?;
            Ok(model.head_match(&out.pooled)?[(0, 0)].as_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_vec(split.captions.len(), g, data))
}

/// Recall in both directions: image retrieval (caption queries) and text
/// retrieval (image queries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ks: Vec<usize>,
    pub ir: Vec<f64>,
    pub tr: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl RetrievalMetrics {
    pub fn ir_avg(&self) -> f64 {
        mean(&self.ir)
    }

    pub fn tr_avg(&self) -> f64 {
        mean(&self.tr)
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

pub fn evaluate_retrieval<T: Scalar>(model: &Model<T>, split: &RetrievalSplit<T>, ks: &[usize]) -> Result<RetrievalMetrics> {
    let scores = score_matrix(model, split)?;
    let ir = recall_at_k(&scores, &split.gold, &split.image_ids, ks)?;
    let tr = recall_at_k(&scores.transpose(), &split.inverse_gold()?, &split.caption_ids, ks)?;
    Ok(RetrievalMetrics { ks: ks.to_vec(), ir, tr })
}

/// Retrieval with the pre-trained match head, no updates.
pub fn zero_shot_retrieval<T: Scalar>(model: &Model<T>, split: &RetrievalSplit<T>, ks: &[usize]) -> Result<RetrievalMetrics> {
    evaluate_retrieval(model, split, ks)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Named rows of optional metric values; missing cells print as `NA`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricsTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: BTreeMap<String, Option<f64>>) {
        self.rows.push(MetricsRow {
            label: label.into(),
            values,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.label));
            for c in &self.columns {
                match r.values.get(c).copied().flatten() {
                    Some(v) => out.push_str(&format!(",{v:.4}")),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
