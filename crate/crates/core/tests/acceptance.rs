//! Acceptance suite. One test per criterion; each prints a single
//! `criterion N ... PASS|FAIL` line before asserting, so
//! `cargo test --test acceptance -- --nocapture` doubles as a report.
//!
//! Reference values are recomputed here from first principles rather than
//! taken from library helpers.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msp::ablation::{reference_grid, run_ablation_grid, AblationConfig, GridRow};
use msp::corpus::{build_stage_corpus, generate, GeneratorConfig, Granularity, ImageTextExample, Lexicon, StageCorpus};
use msp::curriculum::{default_plan, default_stage_tasks, run_schedule, run_stage, Corpora, ScheduleMode, SchedulePlan, StageEnv, StageSpec};
use msp::finetune::{evaluate_recall_at_k, recall_at_k, zero_shot_retrieval, RetrievalSplit};
use msp::losses::{loss_itm_hs, loss_mlm, loss_moc, loss_mrfr, loss_ifrs, loss_topic, Task, TaskWeights};
use msp::model::{count_parameters, Architecture, Head, Model, ModelConfig};
use msp::optim::{all_trainable, Adam, AdamConfig};
use msp::params::Gradients;
use msp::training::{derive_seed, pretrain_gradients, pretrain_report};
use msp::transforms::{
    build_hard_sample_index, mask_regions, mask_tokens, plan_triplet_shuffle, prepare_batch, sample_negative_pair,
    shuffle_region_triplets, BatchContext, ShuffleMap, TransformConfig,
};
use msp::Matrix;

// Tolerances and targets, pinned.
const PARAMS_S: f64 = 84.3e6;
const PARAMS_FULL: f64 = 183.5e6;
const PARAM_REL_TOL: f64 = 0.03;
const RATIO_BAND: (f64, f64) = (0.439, 0.479);
const LOSS_TOL: f64 = 1e-6;
const LOSS_INSTANCES: usize = 1000;
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-6;
/// Blocks whose gradient norm is below this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-4;
const MASK_BAND: (f64, f64) = (0.135, 0.165);
const SHUFFLE_BAND: (f64, f64) = (0.03, 0.07);
const REPLACE_BAND: (f64, f64) = (0.48, 0.52);
const MIN_CANDIDATES: usize = 10_000;
const SHUFFLE_TRIALS: usize = 1000;
const OVERFIT_REDUCTION: f64 = 0.90;
const OVERFIT_STEPS: usize = 200;
/// Steps averaged for the final loss of a stage.
const OVERFIT_TAIL: usize = 10;
const DIRECTION_SEEDS: u64 = 5;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. Parameter counts
// ---------------------------------------------------------------------------

/// Weights plus biases of every dense map, gains plus shifts of every norm.
fn oracle_encoder_params(h: usize, ffn: usize, d_roi: usize, cross_layers: usize, single_layers: usize) -> usize {
    let dense = |i: usize, o: usize| i * o + o;
    let norm = 2 * h;
    let attention = 4 * dense(h, h) + norm;
    let feed_forward = dense(h, ffn) + dense(ffn, h) + norm;
    let visual = dense(d_roi, h) + norm + dense(4, h) + norm;
    // cross-attention shared by both streams, a self-attention and a
    // feed-forward block per stream
    let cross = attention + 2 * attention + 2 * feed_forward;
    visual + cross_layers * cross + single_layers * (attention + feed_forward)
}

#[test]
fn criterion_1_parameter_ratio() {
    let reference = ModelConfig::default();
    let s = count_parameters(Architecture::LxmertS, &reference);
    let full = count_parameters(Architecture::LxmertFull, &reference);
    let (h, f, d) = (reference.hidden_size, reference.ffn_size, reference.d_roi);
    assert_eq!(s, oracle_encoder_params(h, f, d, 5, 0));
    assert_eq!(full, oracle_encoder_params(h, f, d, 5, 9 + 5));

    // The counted blocks are exactly the encoder tensors a model allocates.
    let toy = ModelConfig::toy(50, 6, 16);
    let model = Model::<f32>::new(toy.clone(), 0).unwrap();
    let allocated: usize = model
        .params
        .iter()
        .filter(|(_, name, _)| name.starts_with("visual.") || name.starts_with("xlayer."))
        .map(|(_, _, t)| t.len())
        .sum();
    assert_eq!(count_parameters(Architecture::LxmertS, &toy), allocated);

    let gap_s = (s as f64 - PARAMS_S).abs() / PARAMS_S;
    let gap_full = (full as f64 - PARAMS_FULL).abs() / PARAMS_FULL;
    let ratio = s as f64 / full as f64;
    let pass = gap_s <= PARAM_REL_TOL && gap_full <= PARAM_REL_TOL && ratio >= RATIO_BAND.0 && ratio <= RATIO_BAND.1;
    report(
        1,
        "parameter ratio",
        pass,
        &format!("S {s}, FULL {full}, ratio {ratio:.4}, gaps {gap_s:.4} / {gap_full:.4}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Loss oracles
// ---------------------------------------------------------------------------

fn ce_row(row: &[f64], target: usize) -> f64 {
    let peak = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|x| (x - peak).exp()).sum();
    peak + z.ln() - row[target]
}

/// log(1 + e^x) without overflow.
fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bce_logit(x: f64, y: u8) -> f64 {
    if y == 1 {
        log1pexp(-x)
    } else {
        log1pexp(x)
    }
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect())
}

fn random_positions(r: &mut ChaCha8Rng, rows: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..rows).filter(|_| r.random_bool(0.4)).collect();
    if p.is_empty() {
        p.push(r.random_range(0..rows));
    }
    p
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn criterion_2_loss_oracles() {
    let mut r = rng(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, lib: f64, oracle: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max((lib - oracle).abs());
    };
    for _ in 0..LOSS_INSTANCES {
        let rows = r.random_range(3..12);
        let classes = r.random_range(2..9);
        let width = r.random_range(1..6);

        let logits = random_matrix(&mut r, rows, classes, 8.0);
        let pos = random_positions(&mut r, rows);
        let tgt: Vec<usize> = pos.iter().map(|_| r.random_range(0..classes)).collect();
        let oracle = pos.iter().zip(&tgt).map(|(&p, &t)| ce_row(logits.row(p), t)).sum::<f64>() / pos.len() as f64;
        note("MLM", loss_mlm(&logits, &pos, &tgt).unwrap().value, oracle);

        let pred = random_matrix(&mut r, rows, width, 3.0);
        let pos = random_positions(&mut r, rows);
        let targets = random_matrix(&mut r, pos.len(), width, 3.0);
        let oracle = pos
            .iter()
            .enumerate()
            .map(|(i, &p)| sq_dist(pred.row(p), targets.row(i)))
            .sum::<f64>()
            / pos.len() as f64;
        note("MRFR", loss_mrfr(&pred, &pos, &targets).unwrap().value, oracle);

        let attrs = r.random_range(2..7);
        let cat = random_matrix(&mut r, rows, classes, 8.0);
        let attr = random_matrix(&mut r, rows, attrs, 8.0);
        let pos = random_positions(&mut r, rows);
        let ct: Vec<usize> = pos.iter().map(|_| r.random_range(0..classes)).collect();
        let at: Vec<usize> = pos.iter().map(|_| r.random_range(0..attrs)).collect();
        let n = pos.len() as f64;
        let oracle = pos.iter().zip(&ct).map(|(&p, &t)| ce_row(cat.row(p), t)).sum::<f64>() / n
            + pos.iter().zip(&at).map(|(&p, &t)| ce_row(attr.row(p), t)).sum::<f64>() / n;
        note("MOC", loss_moc(&cat, &attr, &pos, &ct, &at).unwrap().value, oracle);

        // Shuffle maps, including ones with no shuffled triplet.
        let m = 3 * r.random_range(1..5) + r.random_range(0..3);
        let map = plan_triplet_shuffle(m, 0.5, &mut r).unwrap();
        let pred = random_matrix(&mut r, m, width, 3.0);
        let original = random_matrix(&mut r, m, width, 3.0);
        let slots: BTreeSet<usize> = map.pairs.iter().map(|&(p, _)| p).collect();
        let k = slots.len() / 3;
        let oracle = slots.iter().map(|&p| sq_dist(pred.row(p), original.row(p))).sum::<f64>() / (3 * k).max(1) as f64;
        note("IFRS", loss_ifrs(&pred, &map, &original).unwrap().value, oracle);

        // Phrase- and sentence-level topics share a loss; sparse and dense
        // targets stand in for the two.
        for (name, density) in [("TITP", 0.1), ("TITS", 0.5)] {
            let v = r.random_range(2..20);
            let logits = random_matrix(&mut r, rows, v, 12.0);
            let targets: Vec<Vec<u8>> = (0..rows).map(|_| (0..v).map(|_| r.random_bool(density) as u8).collect()).collect();
            let mut total = 0.0;
            for (i, ys) in targets.iter().enumerate() {
                for (j, &y) in ys.iter().enumerate() {
                    total += bce_logit(logits[(i, j)], y);
                }
            }
            note(name, loss_topic(&logits, &targets).unwrap().value, total / (rows * v) as f64);
        }

        let logits = random_matrix(&mut r, rows, 1, 30.0);
        let labels: Vec<u8> = (0..rows).map(|_| r.random_bool(0.5) as u8).collect();
        let oracle = (0..rows).map(|i| bce_logit(logits[(i, 0)], labels[i])).sum::<f64>() / rows as f64;
        note("ITM_HS", loss_itm_hs(&logits, &labels).unwrap().value, oracle);
    }
    assert_eq!(worst.len(), 7);
    let max = worst.values().cloned().fold(0.0, f64::max);
    let pass = max <= LOSS_TOL;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    report(2, "loss oracles", pass, &format!("{LOSS_INSTANCES} instances each; max gap {}", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Gradients
// ---------------------------------------------------------------------------

fn tiny_corpus(seed: u64) -> (Vec<ImageTextExample>, Lexicon) {
    let gen = GeneratorConfig {
        n_images: 6,
        m_regions: 6,
        n_categories: 4,
        n_attributes: 3,
        d_roi: 4,
        seed,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen).unwrap();
    let lex = Lexicon::build(&examples).unwrap();
    (examples, lex)
}

fn fd_config(lex: &Lexicon) -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        num_heads: 2,
        num_xlayers: 1,
        ffn_size: 16,
        init_std: 0.3,
        ..ModelConfig::toy(lex.vocab.len(), lex.attributes.len(), 4)
    }
}

/// Worst block relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)` and its name.
fn finite_difference(model: &Model<f64>, analytic: &Gradients<f64>, loss: impl Fn(&Model<f64>) -> f64) -> (f64, String) {
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for (id, name, t) in model.params.iter() {
        let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..t.len() {
            let w = t.as_slice()[k];
            probe.params.get_mut(id).as_mut_slice()[k] = w + GRAD_EPS;
            let up = loss(&probe);
            probe.params.get_mut(id).as_mut_slice()[k] = w - GRAD_EPS;
            let down = loss(&probe);
            probe.params.get_mut(id).as_mut_slice()[k] = w;
            let numeric = (up - down) / (2.0 * GRAD_EPS);
            let a = analytic.get(id).map_or(0.0, |g| g.as_slice()[k]);
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / an.sqrt().max(nn.sqrt()).max(GRAD_FLOOR);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name.to_string());
        }
    }
    worst
}

#[test]
fn criterion_3_gradients() {
    let (examples, lex) = tiny_corpus(11);
    let transform = TransformConfig {
        p_shuffle: 0.5,
        p_mask_regions: 0.3,
        ..TransformConfig::default()
    };
    let home = |t: Task| match t {
        Task::Ifrs => Granularity::Token,
        Task::Titp => Granularity::Phrase,
        _ => Granularity::Sentence,
    };
    let mut results = Vec::new();
    for task in Task::ALL {
        let g = home(task);
        let corpus = build_stage_corpus::<f64>(g, &examples, &lex).unwrap();
        let index = build_hard_sample_index(&corpus, 3).unwrap();
        let tasks: BTreeSet<Task> = [task].into();
        let ctx = BatchContext {
            corpus: &corpus,
            vocab: &lex.vocab,
            hard_index: Some(&index),
            tasks: &tasks,
            config: &transform,
        };
        let batch = prepare_batch(&ctx, &[0, 1, 2, 3], 17).unwrap();
        let mut model = Model::<f64>::new(fd_config(&lex), 5).unwrap();
        model.ensure_heads_for([task]);
        let w = TaskWeights::default();
        let (rep, grads) = pretrain_gradients(&model, &batch, &tasks, &w, None).unwrap();
        assert!(rep.counts[&task] > 0, "{task} contributed no elements");
        let (err, block) = finite_difference(&model, &grads, |m| pretrain_report(m, &batch, &tasks, &w).unwrap().aggregate);
        results.push((task, err, block));
    }
    let pass = results.iter().all(|(_, e, _)| *e <= GRAD_TOL);
    let detail: Vec<String> = results.iter().map(|(t, e, b)| format!("{t} {e:.1e} at {b}")).collect();
    report(3, "gradients", pass, &detail.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Transform statistics
// ---------------------------------------------------------------------------

fn in_band(x: f64, band: (f64, f64)) -> bool {
    x >= band.0 && x <= band.1
}

#[test]
fn criterion_4_transform_statistics() {
    let defaults = TransformConfig::default();
    let gen = GeneratorConfig {
        n_images: 200,
        m_regions: 36,
        seed: 4,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen).unwrap();
    let lex = Lexicon::build(&examples).unwrap();
    let corpus = build_stage_corpus::<f64>(Granularity::Sentence, &examples, &lex).unwrap();
    let mut r = rng(44);

    // Selection rate on 50-token sequences, where the force-one rule
    // almost never fires. On the short generated captions it fires often
    // and lifts the rate; that figure is printed, not judged.
    let (mut selected, mut candidates) = (0usize, 0usize);
    let content = lex.vocab.content_ids();
    while candidates < MIN_CANDIDATES {
        let mut ids = vec![lex.vocab.cls()];
        ids.extend((0..50).map(|_| r.random_range(content.clone())));
        ids.push(lex.vocab.sep());
        let m = mask_tokens(&ids, &lex.vocab, defaults.p_mask_tokens, &mut r).unwrap();
        candidates += ids.iter().filter(|&&t| !lex.vocab.is_special(t)).count();
        selected += m.positions.len();
    }
    let token_rate = selected as f64 / candidates as f64;
    let (mut caption_selected, mut caption_candidates) = (0usize, 0usize);
    for ex in &corpus.examples {
        let m = mask_tokens(&ex.text_ids, &lex.vocab, defaults.p_mask_tokens, &mut r).unwrap();
        caption_candidates += ex.text_ids.iter().filter(|&&t| !lex.vocab.is_special(t)).count();
        caption_selected += m.positions.len();
    }
    let caption_rate = caption_selected as f64 / caption_candidates as f64;

    let (mut masked, mut rows) = (0usize, 0usize);
    while rows < MIN_CANDIDATES {
        for ex in &corpus.examples {
            let m = mask_regions(&ex.regions.features, defaults.p_mask_regions, &mut r).unwrap();
            rows += ex.regions.features.rows();
            masked += m.positions.len();
        }
    }
    let region_rate = masked as f64 / rows as f64;

    let (mut shuffled, mut triplets) = (0usize, 0usize);
    while triplets < MIN_CANDIDATES {
        let map = plan_triplet_shuffle(36, defaults.p_shuffle, &mut r).unwrap();
        triplets += 12;
        shuffled += map.triplets();
    }
    let shuffle_rate = shuffled as f64 / triplets as f64;

    let index = build_hard_sample_index(&corpus, 20).unwrap();
    let mut replaced = 0usize;
    for i in 0..MIN_CANDIDATES {
        let d = sample_negative_pair(i % corpus.len(), Some(&index), &corpus, defaults.p_replace, &mut r).unwrap();
        replaced += (d.match_label == 0) as usize;
        assert_eq!(d.match_label == 0, d.source != i % corpus.len());
    }
    let replace_rate = replaced as f64 / MIN_CANDIDATES as f64;

    // Multiset check: sorted rows compared bit for bit, at a shuffle rate
    // high enough that most trials move something.
    let sorted_rows = |m: &Matrix<f64>| {
        let mut v: Vec<Vec<u64>> = (0..m.rows()).map(|i| m.row(i).iter().map(|x| x.to_bits()).collect()).collect();
        v.sort();
        v
    };
    let mut preserved = 0;
    let mut moved = 0;
    for t in 0..SHUFFLE_TRIALS {
        let f = &corpus.examples[t % corpus.len()].regions.features;
        let (out, map): (Matrix<f64>, ShuffleMap) = shuffle_region_triplets(f, 0.5, &mut r).unwrap();
        preserved += (sorted_rows(&out) == sorted_rows(f)) as usize;
        moved += (!map.is_empty()) as usize;
    }
    assert!(moved > SHUFFLE_TRIALS / 2);

    let pass = in_band(token_rate, MASK_BAND)
        && in_band(region_rate, MASK_BAND)
        && in_band(shuffle_rate, SHUFFLE_BAND)
        && in_band(replace_rate, REPLACE_BAND)
        && preserved == SHUFFLE_TRIALS;
    report(
        4,
        "transform statistics",
        pass,
        &format!(
            "token mask {token_rate:.4} over {candidates} (captions {caption_rate:.4}), region mask {region_rate:.4} over {rows}, \
             shuffle {shuffle_rate:.4} over {triplets}, replace {replace_rate:.4}, multisets {preserved}/{SHUFFLE_TRIALS}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Overfit smoke test
// ---------------------------------------------------------------------------

fn toy_corpora<T: msp::Scalar>(examples: &[ImageTextExample], lex: &Lexicon) -> Corpora<T> {
    Granularity::ALL
        .into_iter()
        .map(|g| (g, build_stage_corpus::<T>(g, examples, lex).unwrap()))
        .collect()
}

#[test]
fn criterion_5_overfit() {
    let started = Instant::now();
    let gen = GeneratorConfig {
        n_images: 32,
        m_regions: 9,
        n_categories: 10,
        seed: 3,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen).unwrap();
    let lex = Lexicon::build(&examples).unwrap();
    let corpora = toy_corpora::<f32>(&examples, &lex);
    // The default plan with the budget and step size scaled to the toy
    // model: one full-corpus batch per epoch, so epochs equal steps.
    let mut plan = default_plan();
    for s in &mut plan.stages {
        s.epochs = OVERFIT_STEPS;
        s.batch_size = examples.len();
        s.learning_rate = 1e-3;
    }
    let mut cfg = ModelConfig::toy(lex.vocab.len(), lex.attributes.len(), gen.d_roi);
    cfg.max_regions = cfg.max_regions.max(gen.m_regions);
    assert_eq!((cfg.hidden_size, cfg.num_xlayers), (64, 2));
    let mut model = Model::<f32>::new(cfg, 1).unwrap();
    let log = run_schedule(&mut model, &plan, &corpora, &lex.vocab).unwrap();

    let mut pass = true;
    let mut detail = Vec::new();
    for s in &log.stages {
        assert!(s.records.len() <= OVERFIT_STEPS);
        let first = s.initial_aggregate().unwrap();
        let last = s.final_aggregate(OVERFIT_TAIL).unwrap();
        let reduction = 1.0 - last / first;
        pass &= reduction >= OVERFIT_REDUCTION;
        let tail = &s.records[s.records.len() - 1].report.losses;
        let parts: Vec<String> = tail.iter().map(|(t, v)| format!("{t} {v:.3}")).collect();
        detail.push(format!("{} {first:.3} -> {last:.3} ({:.1}%; last step {})", s.label, reduction * 100.0, parts.join(" ")));
    }
    detail.push(format!("{:.0?}", started.elapsed()));
    report(5, "overfit", pass, &detail.join("; "));
    assert!(pass, "aggregate losses did not fall by {:.0}% in every stage", OVERFIT_REDUCTION * 100.0);
}

// ---------------------------------------------------------------------------
// 6. Retrieval metrics
// ---------------------------------------------------------------------------

/// Sorts the whole gallery per query (score descending, then gallery id) and
/// reads off where the gold item landed.
fn brute_force_recall(scores: &[Vec<f64>], gold: &[usize], ids: &[String], ks: &[usize]) -> Vec<f64> {
    let positions: Vec<usize> = scores
        .iter()
        .zip(gold)
        .map(|(row, &g)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then_with(|| ids[a].cmp(&ids[b])));
            order.iter().position(|&j| j == g).unwrap()
        })
        .collect();
    ks.iter()
        .map(|&k| positions.iter().filter(|&&p| p < k).count() as f64 / gold.len() as f64)
        .collect()
}

#[test]
fn criterion_6_retrieval_metrics() {
    let n = 20;
    let ids: Vec<String> = (0..n).map(|i| format!("img{i:02}")).collect();
    // Gold assignment is a permutation so queries and gallery differ in order.
    let gold: Vec<usize> = (0..n).map(|q| (q * 7 + 3) % n).collect();
    let ks = [1, 5, 10];

    let planted = evaluate_recall_at_k(n, &ids, &gold, |q, j| if j == gold[q] { 1.0 } else { 0.0 }, &ks).unwrap();
    let anti_ks = [1, 5, 10, n - 1, n];
    let anti = evaluate_recall_at_k(n, &ids, &gold, |q, j| if j == gold[q] { -1.0 } else { 0.0 }, &anti_ks).unwrap();

    let mut r = rng(6);
    let mut all_match = true;
    for trial in 0..50 {
        // Coarse integer scores on half the trials force ties.
        let coarse = trial % 2 == 0;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if coarse { r.random_range(0..4) as f64 } else { r.random::<f64>() })
                    .collect()
            })
            .collect();
        let flat = Matrix::from_vec(n, n, scores.concat());
        let lib = recall_at_k(&flat, &gold, &ids, &[1, 2, 5, 10, 20]).unwrap();
        all_match &= lib == brute_force_recall(&scores, &gold, &ids, &[1, 2, 5, 10, 20]);
    }

    let pass = planted == vec![1.0; 3] && anti[..4] == [0.0; 4] && anti[4] == 1.0 && all_match;
    report(
        6,
        "retrieval metrics",
        pass,
        &format!("planted {planted:?}, anti {anti:?}, random vs brute force on {n}x{n}: {}", if all_match { "identical" } else { "differs" }),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Curriculum mechanics
// ---------------------------------------------------------------------------

fn mechanics_setup() -> (Lexicon, Corpora<f64>, SchedulePlan, ModelConfig) {
    let gen = GeneratorConfig {
        n_images: 16,
        m_regions: 6,
        n_categories: 5,
        d_roi: 8,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen).unwrap();
    let lex = Lexicon::build(&examples).unwrap();
    let mut corpora: Corpora<f64> = Corpora::new();
    corpora.insert(Granularity::Token, build_stage_corpus(Granularity::Token, &examples, &lex).unwrap());
    // A one-image second stage: its single step sees a known batch.
    let mut sentence: StageCorpus<f64> = build_stage_corpus(Granularity::Sentence, &examples, &lex).unwrap();
    sentence.truncate(1);
    corpora.insert(Granularity::Sentence, sentence);
    let plan = SchedulePlan {
        mode: ScheduleMode::Sequential,
        stages: vec![
            StageSpec {
                granularity: Granularity::Token,
                tasks: default_stage_tasks(Granularity::Token),
                epochs: 3,
                batch_size: 8,
                learning_rate: 1e-3,
            },
            StageSpec {
                granularity: Granularity::Sentence,
                tasks: [Task::Mlm, Task::Mrfr, Task::Moc].into(),
                epochs: 1,
                batch_size: 1,
                learning_rate: 5e-4,
            },
        ],
        seed: 99,
        ..default_plan()
    };
    let mut cfg = ModelConfig::toy(lex.vocab.len(), lex.attributes.len(), gen.d_roi);
    cfg.hidden_size = 16;
    cfg.num_xlayers = 1;
    cfg.ffn_size = 32;
    (lex, corpora, plan, cfg)
}

#[test]
fn criterion_7_curriculum_mechanics() {
    let (lex, corpora, plan, cfg) = mechanics_setup();
    let mut scheduled = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let log = run_schedule(&mut scheduled, &plan, &corpora, &lex.vocab).unwrap();
    assert_eq!(log.stages[1].records.len(), 1);

    // Carry-over: the second stage starts from the first stage's weights.
    let carry = log.stages[1].initial_digest == log.stages[0].final_digest;

    // Reset: replay stage one on its own, then apply a fresh Adam step,
    // written out by hand, to the frozen gradient of stage two's batch.
    let mut replay = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let env = StageEnv {
        vocab: &lex.vocab,
        transform: &plan.transform,
        weights: &plan.weights,
        adam: plan.adam,
    };
    let first = &plan.stages[0];
    let s0 = run_stage(&mut replay, first, &corpora[&first.granularity], None, env, plan.seed, 0, 0).unwrap();
    assert_eq!(s0.final_digest, log.stages[0].final_digest);
    let second = &plan.stages[1];
    replay.ensure_heads_for(second.tasks.iter().copied());
    let ctx = BatchContext {
        corpus: &corpora[&second.granularity],
        vocab: &lex.vocab,
        hard_index: None,
        tasks: &second.tasks,
        config: &plan.transform,
    };
    let batch = prepare_batch(&ctx, &[0], derive_seed(&[plan.seed, 1, s0.records.len() as u64])).unwrap();
    let (_, grads) = pretrain_gradients(&replay, &batch, &second.tasks, &plan.weights, None).unwrap();
    let eps = plan.adam.eps;
    let mut max_gap = 0.0f64;
    for (id, name, w) in replay.params.iter() {
        let after = scheduled.params.by_name(name).unwrap();
        for k in 0..w.len() {
            let g = grads.get(id).map_or(0.0, |g| g.as_slice()[k]);
            // First Adam step: both moment estimates are bias-corrected to
            // g and g², so the update is lr · g / (|g| + eps).
            let expected = if grads.get(id).is_some() {
                w.as_slice()[k] - second.learning_rate * g / (g.abs() + eps)
            } else {
                w.as_slice()[k]
            };
            max_gap = max_gap.max((after.as_slice()[k] - expected).abs());
        }
    }
    let reset = max_gap <= 1e-12;

    // The optimizer itself: reset after history equals a fresh optimizer.
    let mut history = Adam::new(AdamConfig::default());
    let mut fresh = Adam::new(AdamConfig::default());
    let mut a = replay.params.clone();
    let mut b = replay.params.clone();
    let mut noise = Gradients::new(a.len());
    for (id, _, t) in replay.params.iter() {
        noise.accumulate(id, &t.map(|x| x.sin()));
    }
    for _ in 0..3 {
        history.step(&mut a.clone(), &noise, 1e-3, &all_trainable);
    }
    history.reset();
    history.step(&mut a, &grads, 1e-3, &all_trainable);
    fresh.step(&mut b, &grads, 1e-3, &all_trainable);
    let optimizer_reset = a.digest() == b.digest();

    // Determinism: identical reruns, different seed differs.
    let mut rerun = Model::<f64>::new(cfg.clone(), 3).unwrap();
    run_schedule(&mut rerun, &plan, &corpora, &lex.vocab).unwrap();
    let ck = |m: &Model<f64>| serde_json::to_string(&m.to_checkpoint(serde_json::Value::Null)).unwrap();
    let same = rerun.to_checkpoint(serde_json::Value::Null).digest == scheduled.to_checkpoint(serde_json::Value::Null).digest
        && ck(&rerun) == ck(&scheduled);
    let mut other = Model::<f64>::new(cfg, 3).unwrap();
    let reseeded = SchedulePlan { seed: 100, ..plan.clone() };
    run_schedule(&mut other, &reseeded, &corpora, &lex.vocab).unwrap();
    let differs = other.digest() != scheduled.digest();

    let pass = carry && reset && optimizer_reset && same && differs;
    report(
        7,
        "curriculum mechanics",
        pass,
        &format!(
            "carry-over {carry}, fresh-step gap {max_gap:.1e}, optimizer reset {optimizer_reset}, \
             rerun identical {same}, reseed differs {differs}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Ablation grid
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_ablation_grid() {
    let started = Instant::now();
    let rows = reference_grid();
    let cfg = AblationConfig::default();
    let (table, results) = run_ablation_grid::<f32>(&rows, &cfg, 8).unwrap();
    let csv = table.to_csv();
    println!("{csv}");

    let labels: Vec<String> = rows.iter().map(GridRow::to_string).collect();
    let complete = table.rows.len() == rows.len()
        && table.rows.iter().zip(&labels).all(|(r, l)| &r.label == l)
        && results.iter().zip(&rows).all(|(res, row)| {
            table.columns.iter().all(|c| {
                let cell = res.metrics.get(c).copied().flatten();
                let zero_shot = c.starts_with("zs_");
                // Zero-shot cells exist exactly when the row trains a match head.
                let expected = !zero_shot || row.trains(Task::ItmHs);
                cell.is_some() == expected && cell.is_none_or(|v| (0.0..=1.0).contains(&v))
            })
        });
    // Reported, not asserted.
    let score = |label: &str| {
        let m = &results.iter().find(|r| r.row == label).unwrap().metrics;
        m["vqa"].unwrap() + m["ir_avg"].unwrap() + m["tr_avg"].unwrap()
    };
    let best = results
        .iter()
        .max_by(|a, b| score(&a.row).total_cmp(&score(&b.row)))
        .map(|r| r.row.clone())
        .unwrap();
    report(
        8,
        "ablation grid",
        complete,
        &format!(
            "{} rows x {} columns in {:.0?}; best by vqa+ir+tr: {best}; T->P->S best: {}",
            table.rows.len(),
            table.columns.len(),
            started.elapsed(),
            best == "T->P->S"
        ),
    );
    assert!(complete);
}

// ---------------------------------------------------------------------------
// 9. Zero-shot purity and direction
// ---------------------------------------------------------------------------

fn mean_r1(model: &Model<f32>, split: &RetrievalSplit<f32>) -> f64 {
    let m = zero_shot_retrieval(model, split, &[1]).unwrap();
    (m.ir[0] + m.tr[0]) / 2.0
}

#[test]
fn criterion_9_zero_shot() {
    let started = Instant::now();
    let (n_pretrain, n_test) = (96, 32);
    let mut pure = true;
    let (mut pretrained_r1, mut untrained_r1) = (Vec::new(), Vec::new());
    for seed in 0..DIRECTION_SEEDS {
        let gen = GeneratorConfig {
            n_images: n_pretrain + n_test,
            m_regions: 6,
            n_categories: 10,
            seed: derive_seed(&[9, seed]),
            ..GeneratorConfig::default()
        };
        let examples = generate(&gen).unwrap();
        let lex = Lexicon::build(&examples).unwrap();
        let (pre, test) = examples.split_at(n_pretrain);
        let mut corpora: Corpora<f32> = Corpora::new();
        corpora.insert(Granularity::Sentence, build_stage_corpus(Granularity::Sentence, pre, &lex).unwrap());
        let split = RetrievalSplit::from_corpus(&build_stage_corpus(Granularity::Sentence, test, &lex).unwrap());

        let mut cfg = ModelConfig::toy(lex.vocab.len(), lex.attributes.len(), gen.d_roi);
        cfg.max_text_len = cfg.max_text_len.max(msp::corpus::longest_stage_text(&examples, &lex).unwrap());
        let mut untrained = Model::<f32>::new(cfg, seed).unwrap();
        untrained.ensure_head(Head::Match, 0);
        let mut model = untrained.clone();
        let plan = SchedulePlan {
            stages: vec![StageSpec {
                granularity: Granularity::Sentence,
                tasks: default_stage_tasks(Granularity::Sentence),
                epochs: 16,
                batch_size: 32,
                learning_rate: 3e-4,
            }],
            seed,
            hard_top_m: 20,
            ..default_plan()
        };
        run_schedule(&mut model, &plan, &corpora, &lex.vocab).unwrap();

        let before = model.digest();
        let pre_r1 = mean_r1(&model, &split);
        pure &= model.digest() == before && mean_r1(&model, &split) == pre_r1;
        pretrained_r1.push(pre_r1);
        untrained_r1.push(mean_r1(&untrained, &split));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, u) = (avg(&pretrained_r1), avg(&untrained_r1));
    let direction = p > u;
    report(
        9,
        "zero-shot purity and direction",
        pure && direction,
        &format!(
            "weights unchanged {pure}; mean R@1 over {DIRECTION_SEEDS} seeds: pre-trained {p:.4} {pretrained_r1:.3?} \
             vs untrained {u:.4} {untrained_r1:.3?}; chance {:.4}; {:.0?}",
            1.0 / n_test as f64,
            started.elapsed()
        ),
    );
    assert!(pure, "zero-shot evaluation changed the weights");
    assert!(direction, "sentence-stage pre-training did not beat the untrained model on mean R@1");
}
