//! Batched forward/backward for pre-training.
//!
//! Each example gets its own tape, built in parallel. Head outputs are then
//! stacked across the batch so that every loss is normalized over the whole
//! batch, and the stacked gradients are split back into per-example seeds.
//! Per-example parameter gradients are summed in example order.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::losses::{
    aggregate, loss_ifrs, loss_itm_hs, loss_mlm, loss_moc, loss_mrfr, loss_topic, LossReport, Task, TaskLoss,
    TaskWeights,
};
use crate::model::{ExampleInput, Head, Model};
use crate::params::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::transforms::{stream_rng, BatchInputs, PreparedExample, ShuffleMap, Stream};

/// Stable seed derivation from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Per-example output values, `None` where a head was not evaluated.
pub type Outputs<T> = Vec<Option<Matrix<T>>>;

/// Builds one tape per example with `build`, hands all output values to
/// `loss`, then backpropagates the per-output gradients `loss` returns.
pub fn parallel_grad<T, R, B, L>(model: &Model<T>, n: usize, build: B, loss: L) -> Result<(R, Gradients<T>)>
where
    T: Scalar,
    B: Fn(usize, &mut Graph<'_, T>) -> Result<Vec<Option<NodeId>>> + Sync,
    L: FnOnce(&[Outputs<T>]) -> Result<(R, Vec<Outputs<T>>)>,
{
    let params = &model.params;
    let tapes: Vec<(Graph<'_, T>, Vec<Option<NodeId>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new(params);
            let nodes = build(i, &mut g)?;
            Ok((g, nodes))
        })
        .collect::<Result<_>>()?;
    let values: Vec<Outputs<T>> = tapes
        .iter()
        .map(|(g, nodes)| nodes.iter().map(|n| n.map(|id| g.value(id).clone())).collect())
        .collect();
    let (result, seeds) = loss(&values)?;
    let partial: Vec<Gradients<T>> = tapes
        .par_iter()
        .zip(seeds.into_par_iter())
        .map(|((g, nodes), seeds)| {
            let pairs: Vec<(NodeId, Matrix<T>)> = nodes
                .iter()
                .zip(seeds)
                .filter_map(|(n, s)| Some((n.as_ref().copied()?, s?)))
                .collect();
            let mut grads = Gradients::new(params.len());
            g.backward(&pairs, &mut grads);
            grads
        })
        .collect();
    let mut total = Gradients::new(params.len());
    for g in &partial {
        total.merge(g);
    }
    Ok((result, total))
}

const MLM: usize = 0;
const MRFR: usize = 1;
const MOC_CAT: usize = 2;
const MOC_ATTR: usize = 3;
const IFRS: usize = 4;
const TOPIC: usize = 5;
const MATCH: usize = 6;
const SLOTS: usize = 7;

fn input_of<T: Scalar>(ex: &PreparedExample<T>) -> ExampleInput<'_, T> {
    ExampleInput {
        text_ids: &ex.text_ids,
        text_mask: &ex.text_pad_mask,
        features: &ex.region_features,
        boxes: &ex.boxes,
        region_mask: &ex.region_pad_mask,
    }
}

fn build_pretrain<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    ex: &PreparedExample<T>,
    tasks: &BTreeSet<Task>,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Option<NodeId>>> {
    let enc = model.encode_nodes(g, &input_of(ex), dropout)?;
    let mut out = vec![None; SLOTS];
    let grounded = ex.match_label == 1;
    if (grounded || Task::Mlm.kept_on_mismatch()) && tasks.contains(&Task::Mlm) && !ex.mlm_positions.is_empty() {
        let rows = g.select_rows(enc.text, &ex.mlm_positions);
        out[MLM] = Some(model.head_node(g, Head::Mlm, rows)?);
    }
    let masked = grounded && !ex.region_mask_positions.is_empty();
    if masked && (tasks.contains(&Task::Mrfr) || tasks.contains(&Task::Moc)) {
        let rows = g.select_rows(enc.vision, &ex.region_mask_positions);
        if tasks.contains(&Task::Mrfr) {
            out[MRFR] = Some(model.head_node(g, Head::Region, rows)?);
        }
        if tasks.contains(&Task::Moc) {
            out[MOC_CAT] = Some(model.head_node(g, Head::MocCategory, rows)?);
            out[MOC_ATTR] = Some(model.head_node(g, Head::MocAttribute, rows)?);
        }
    }
    if grounded && tasks.contains(&Task::Ifrs) && !ex.shuffle_map.is_empty() {
        let positions: Vec<usize> = ex.shuffle_map.positions().collect();
        let rows = g.select_rows(enc.vision, &positions);
        out[IFRS] = Some(model.head_node(g, Head::Region, rows)?);
    }
    if grounded && (tasks.contains(&Task::Titp) || tasks.contains(&Task::Tits)) {
        out[TOPIC] = Some(model.head_node(g, Head::Topic, enc.pooled)?);
    }
    if tasks.contains(&Task::ItmHs) {
        out[MATCH] = Some(model.head_node(g, Head::Match, enc.pooled)?);
    }
    Ok(out)
}

/// Stacks slot `slot` over the examples that produced it.
fn stack<T: Scalar>(values: &[Outputs<T>], slot: usize) -> (Matrix<T>, Vec<(usize, usize)>) {
    let mut parts = Vec::new();
    let mut spans = Vec::new();
    for (i, v) in values.iter().enumerate() {
        if let Some(m) = &v[slot] {
            spans.push((i, m.rows()));
            parts.push(m);
        }
    }
    let stacked = if parts.is_empty() {
        Matrix::zeros(0, 0)
    } else {
        Matrix::vstack(&parts)
    };
    (stacked, spans)
}

fn scatter<T: Scalar>(seeds: &mut [Outputs<T>], slot: usize, grad: &Matrix<T>, spans: &[(usize, usize)], weight: f64) {
    let mut offset = 0;
    let w = T::c(weight);
    for &(i, rows) in spans {
        let idx: Vec<usize> = (offset..offset + rows).collect();
        seeds[i][slot] = Some(grad.select_rows(&idx).scale(w));
        offset += rows;
    }
}

fn identity_map(rows: usize) -> ShuffleMap {
    ShuffleMap {
        pairs: (0..rows).map(|i| (i, i)).collect(),
    }
}

/// Batch losses and their per-example seeds, given stacked head outputs.
pub fn pretrain_losses<T: Scalar>(
    batch: &BatchInputs<T>,
    values: &[Outputs<T>],
    tasks: &BTreeSet<Task>,
    weights: &TaskWeights,
) -> Result<(LossReport, Vec<Outputs<T>>)> {
    let ex = &batch.examples;
    let mut seeds: Vec<Outputs<T>> = vec![vec![None; SLOTS]; values.len()];
    let mut parts = Vec::new();
    let part = |task, value: T, count| TaskLoss {
        task,
        value: value.as_f64(),
        count,
    };

    if tasks.contains(&Task::Mlm) {
        let (logits, spans) = stack(values, MLM);
        let targets: Vec<usize> = spans.iter().flat_map(|&(i, _)| ex[i].mlm_targets.iter().copied()).collect();
        if targets.is_empty() {
            parts.push(part(Task::Mlm, T::zero(), 0));
        } else {
            let positions: Vec<usize> = (0..targets.len()).collect();
            let l = loss_mlm(&logits, &positions, &targets)?;
            scatter(&mut seeds, MLM, &l.grad, &spans, weights.get(Task::Mlm));
            parts.push(part(Task::Mlm, l.value, targets.len()));
        }
    }
    if tasks.contains(&Task::Mrfr) {
        let (pred, spans) = stack(values, MRFR);
        if spans.is_empty() {
            parts.push(part(Task::Mrfr, T::zero(), 0));
        } else {
            let targets: Vec<&Matrix<T>> = spans.iter().map(|&(i, _)| &ex[i].region_targets).collect();
            let targets = Matrix::vstack(&targets);
            let positions: Vec<usize> = (0..pred.rows()).collect();
            let l = loss_mrfr(&pred, &positions, &targets)?;
            scatter(&mut seeds, MRFR, &l.grad, &spans, weights.get(Task::Mrfr));
            parts.push(part(Task::Mrfr, l.value, positions.len()));
        }
    }
    if tasks.contains(&Task::Moc) {
        let (cat, spans) = stack(values, MOC_CAT);
        let (attr, _) = stack(values, MOC_ATTR);
        if spans.is_empty() {
            parts.push(part(Task::Moc, T::zero(), 0));
        } else {
            let ct: Vec<usize> = spans.iter().flat_map(|&(i, _)| ex[i].moc_category_targets.iter().copied()).collect();
            let at: Vec<usize> = spans.iter().flat_map(|&(i, _)| ex[i].moc_attribute_targets.iter().copied()).collect();
            let positions: Vec<usize> = (0..ct.len()).collect();
            let l = loss_moc(&cat, &attr, &positions, &ct, &at)?;
            let w = weights.get(Task::Moc);
            scatter(&mut seeds, MOC_CAT, &l.category_grad, &spans, w);
            scatter(&mut seeds, MOC_ATTR, &l.attribute_grad, &spans, w);
            parts.push(part(Task::Moc, l.value, positions.len()));
        }
    }
    if tasks.contains(&Task::Ifrs) {
        let (pred, spans) = stack(values, IFRS);
        if spans.is_empty() {
            parts.push(part(Task::Ifrs, T::zero(), 0));
        } else {
            let originals: Vec<Matrix<T>> = spans
                .iter()
                .map(|&(i, _)| {
                    let positions: Vec<usize> = ex[i].shuffle_map.positions().collect();
                    ex[i].original_features.select_rows(&positions)
                })
                .collect();
            let originals = Matrix::vstack(&originals.iter().collect::<Vec<_>>());
            let l = loss_ifrs(&pred, &identity_map(pred.rows()), &originals)?;
            scatter(&mut seeds, IFRS, &l.grad, &spans, weights.get(Task::Ifrs));
            parts.push(part(Task::Ifrs, l.value, pred.rows()));
        }
    }
    for topic in [Task::Titp, Task::Tits] {
        if !tasks.contains(&topic) {
            continue;
        }
        let (logits, spans) = stack(values, TOPIC);
        if spans.is_empty() {
            parts.push(part(topic, T::zero(), 0));
            continue;
        }
        let targets: Vec<Vec<u8>> = spans.iter().map(|&(i, _)| ex[i].topic_targets.clone()).collect();
        let l = loss_topic(&logits, &targets)?;
        let w = weights.get(topic);
        match seeds_existing(&seeds, TOPIC, &spans) {
            true => add_scatter(&mut seeds, TOPIC, &l.grad, &spans, w),
            false => scatter(&mut seeds, TOPIC, &l.grad, &spans, w),
        }
        parts.push(part(topic, l.value, spans.len()));
    }
    if tasks.contains(&Task::ItmHs) {
        let (logits, spans) = stack(values, MATCH);
        let labels: Vec<u8> = spans.iter().map(|&(i, _)| ex[i].match_label).collect();
        let l = loss_itm_hs(&logits, &labels)?;
        scatter(&mut seeds, MATCH, &l.grad, &spans, weights.get(Task::ItmHs));
        parts.push(part(Task::ItmHs, l.value, labels.len()));
    }
    let report = aggregate(&parts, tasks, weights)?;
    Ok((report, seeds))
}

fn seeds_existing<T>(seeds: &[Outputs<T>], slot: usize, spans: &[(usize, usize)]) -> bool {
    spans.first().is_some_and(|&(i, _)| seeds[i][slot].is_some())
}

fn add_scatter<T: Scalar>(seeds: &mut [Outputs<T>], slot: usize, grad: &Matrix<T>, spans: &[(usize, usize)], weight: f64) {
    let mut fresh: Vec<Outputs<T>> = vec![vec![None; SLOTS]; seeds.len()];
    scatter(&mut fresh, slot, grad, spans, weight);
    for (s, f) in seeds.iter_mut().zip(fresh) {
        if let (Some(acc), Some(add)) = (s[slot].as_mut(), f[slot].as_ref()) {
            acc.add_assign(add);
        }
    }
}

/// Forward and backward over one prepared batch. With `dropout_seed`, each
/// example draws dropout masks from its own stream.
pub fn pretrain_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &BatchInputs<T>,
    tasks: &BTreeSet<Task>,
    weights: &TaskWeights,
    dropout_seed: Option<u64>,
) -> Result<(LossReport, Gradients<T>)> {
    parallel_grad(
        model,
        batch.len(),
        |i, g| {
            let mut rng = dropout_seed.map(|s| stream_rng(s, i as u64, Stream::Dropout));
            build_pretrain(model, g, &batch.examples[i], tasks, rng.as_mut())
        },
        |values| pretrain_losses(batch, values, tasks, weights),
    )
}

/// Loss report of a batch without dropout and without gradients.
pub fn pretrain_report<T: Scalar>(
    model: &Model<T>,
    batch: &BatchInputs<T>,
    tasks: &BTreeSet<Task>,
    weights: &TaskWeights,
) -> Result<LossReport> {
    Ok(pretrain_gradients(model, batch, tasks, weights, None)?.0)
}

/// A fresh deterministic RNG from seed parts.
pub fn seeded_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
