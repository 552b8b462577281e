//! Self-checks shared by the `verify` command and the test suites.

mod gradcheck;
pub mod oracles;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_gradients, BlockCheck};

use crate::corpus::{build_stage_corpus, generate, GeneratorConfig, Granularity, Lexicon, Vocabulary};
use crate::curriculum::default_stage_tasks;
use crate::error::Result;
use crate::finetune::{evaluate_recall_at_k, DEFAULT_KS};
use crate::losses::{loss_ifrs, loss_itm_hs, loss_mlm, loss_moc, loss_mrfr, loss_topic, TaskWeights};
use crate::model::{count_parameters, Architecture, Model, ModelConfig};
use crate::tensor::Matrix;
use crate::training::{pretrain_gradients, pretrain_report};
use crate::transforms::{
    build_hard_sample_index, mask_regions, mask_tokens, plan_triplet_shuffle, prepare_batch, sample_negative_pair,
    shuffle_region_triplets, BatchContext, ShuffleMap, TransformConfig,
};

/// Published sizes of the two encoders at the reference configuration.
pub const REFERENCE_PARAMS_S: f64 = 84.3e6;
pub const REFERENCE_PARAMS_FULL: f64 = 183.5e6;
pub const PARAM_TOLERANCE: f64 = 0.03;
pub const RATIO_RANGE: (f64, f64) = (0.439, 0.479);

pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the gradient check. Attention key biases have an
/// exactly zero gradient (softmax is shift invariant), so their numeric
/// estimate is pure rounding noise around 1e-9.
pub const GRADIENT_FLOOR: f64 = 1e-4;
pub const GRADIENT_EPS: f64 = 1e-6;

pub const MASK_RATE_RANGE: (f64, f64) = (0.135, 0.165);
pub const SHUFFLE_RATE_RANGE: (f64, f64) = (0.03, 0.07);
pub const REPLACE_RATE_RANGE: (f64, f64) = (0.48, 0.52);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Random instances per loss.
    pub loss_instances: usize,
    /// Candidates per rate statistic (at least this many).
    pub rate_candidates: usize,
    pub shuffle_trials: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            loss_instances: 1000,
            rate_candidates: 10_000,
            shuffle_trials: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            detail: detail.into(),
        }
    }

    fn within(name: &str, value: f64, (lo, hi): (f64, f64)) -> Self {
        Self::new(name, (lo..=hi).contains(&value), value, format!("expected in [{lo}, {hi}]"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let status = if c.passed { "PASS" } else { "FAIL" };
                format!("{status} {} = {:.6e} ({})", c.name, c.value, c.detail)
            })
            .collect()
    }
}

pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = parameter_checks();
    checks.extend(loss_checks(cfg)?);
    checks.extend(gradient_checks(cfg.seed)?);
    checks.extend(transform_checks(cfg)?);
    checks.push(retrieval_check()?);
    Ok(VerifyReport { checks })
}

pub fn parameter_checks() -> Vec<Check> {
    let c = ModelConfig::default();
    let s = count_parameters(Architecture::LxmertS, &c) as f64;
    let full = count_parameters(Architecture::LxmertFull, &c) as f64;
    let near = |name: &str, got: f64, want: f64| {
        let rel = (got - want).abs() / want;
        Check::new(name, rel <= PARAM_TOLERANCE, got, format!("reference {want:.4e}, relative gap {rel:.4}"))
    };
    vec![
        near("params.lxmert_s", s, REFERENCE_PARAMS_S),
        near("params.lxmert_full", full, REFERENCE_PARAMS_FULL),
        Check::within("params.ratio", s / full, RATIO_RANGE),
    ]
}

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn distinct_positions(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.5).collect();
    if p.is_empty() {
        p.push(rng.random_range(0..n));
    }
    p
}

/// Largest gap between each loss and its scalar oracle over random instances.
pub fn loss_checks(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x105);
    let mut worst = [0.0f64; 6];
    for _ in 0..cfg.loss_instances {
        let (n, v, d) = (rng.random_range(1..7), rng.random_range(2..9), rng.random_range(1..6));
        let logits = Matrix::<f64>::randn(n, v, 3.0, &mut rng);
        let pos = distinct_positions(&mut rng, n);
        let targets: Vec<usize> = pos.iter().map(|_| rng.random_range(0..v)).collect();
        let got = loss_mlm(&logits, &pos, &targets)?.value;
        worst[0] = worst[0].max((got - oracles::mlm(&rows(&logits), &pos, &targets)).abs());

        let pred = Matrix::<f64>::randn(n, d, 1.0, &mut rng);
        let tgt = Matrix::<f64>::randn(pos.len(), d, 1.0, &mut rng);
        let got = loss_mrfr(&pred, &pos, &tgt)?.value;
        worst[1] = worst[1].max((got - oracles::mrfr(&rows(&pred), &pos, &rows(&tgt))).abs());

        let a = rng.random_range(2..5);
        let attr = Matrix::<f64>::randn(n, a, 2.0, &mut rng);
        let at: Vec<usize> = pos.iter().map(|_| rng.random_range(0..a)).collect();
        let got = loss_moc(&logits, &attr, &pos, &targets, &at)?.value;
        worst[2] = worst[2].max((got - oracles::moc(&rows(&logits), &rows(&attr), &pos, &targets, &at)).abs());

        let m = 3 * rng.random_range(1..4) + rng.random_range(0..3);
        let map: ShuffleMap = plan_triplet_shuffle(m, 0.6, &mut rng)?;
        let pred = Matrix::<f64>::randn(m, d, 1.0, &mut rng);
        let orig = Matrix::<f64>::randn(m, d, 1.0, &mut rng);
        let got = loss_ifrs(&pred, &map, &orig)?.value;
        let slots: Vec<usize> = map.positions().collect();
        worst[3] = worst[3].max((got - oracles::ifrs(&rows(&pred), &slots, &rows(&orig), map.triplets())).abs());

        let ys: Vec<Vec<u8>> = (0..n).map(|_| (0..v).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let got = loss_topic(&logits, &ys)?.value;
        worst[4] = worst[4].max((got - oracles::topic(&rows(&logits), &ys)).abs());

        let x = Matrix::<f64>::randn(n, 1, 3.0, &mut rng);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let got = loss_itm_hs(&x, &labels)?.value;
        worst[5] = worst[5].max((got - oracles::itm(x.as_slice(), &labels)).abs());
    }
    let names = ["loss.mlm", "loss.mrfr", "loss.moc", "loss.ifrs", "loss.titp_tits", "loss.itm_hs"];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, w)| Check::new(*name, w <= LOSS_TOLERANCE, w, format!("max |loss - oracle| over {} instances", cfg.loss_instances)))
        .collect())
}

/// Model with hidden width 8 and one cross layer, for finite differences.
pub fn gradcheck_config(vocab_size: usize, n_attr: usize, d_roi: usize) -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        num_heads: 2,
        num_xlayers: 1,
        ffn_size: 16,
        init_std: 0.3,
        ..ModelConfig::toy(vocab_size, n_attr, d_roi)
    }
}

/// Central differences against the analytic gradient of each stage's full
/// aggregate on a small batch.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let gen = GeneratorConfig {
        n_images: 6,
        m_regions: 6,
        n_categories: 4,
        n_attributes: 3,
        d_roi: 4,
        seed,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen)?;
    let lex = Lexicon::build(&examples)?;
    let mut out = Vec::new();
    for g in [Granularity::Token, Granularity::Phrase, Granularity::Sentence] {
        let corpus = build_stage_corpus::<f64>(g, &examples, &lex)?;
        let tasks = default_stage_tasks(g);
        let index = build_hard_sample_index(&corpus, 3)?;
        let tc = TransformConfig {
            p_shuffle: 0.5,
            p_mask_regions: 0.3,
            ..TransformConfig::default()
        };
        let ctx = BatchContext {
            corpus: &corpus,
            vocab: &lex.vocab,
            hard_index: Some(&index),
            tasks: &tasks,
            config: &tc,
        };
        let batch = prepare_batch(&ctx, &[0, 1, 2, 3], seed ^ 0x9e)?;
        let mut model = Model::<f64>::new(gradcheck_config(lex.vocab.len(), lex.attributes.len(), gen.d_roi), seed)?;
        model.ensure_heads_for(tasks.iter().copied());
        let w = TaskWeights::default();
        let (_, grads) = pretrain_gradients(&model, &batch, &tasks, &w, None)?;
        let blocks = check_gradients(
            &model,
            &grads,
            &|m| Ok(pretrain_report(m, &batch, &tasks, &w)?.aggregate),
            GRADIENT_EPS,
            GRADIENT_FLOOR,
        )?;
        let worst = blocks
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
            .expect("model has parameters");
        out.push(Check::new(
            format!("gradient.{}", g.to_string().to_lowercase()),
            worst.relative_error <= GRADIENT_TOLERANCE,
            worst.relative_error,
            format!("worst block {} of {}", worst.name, blocks.len()),
        ));
    }
    Ok(out)
}

/// Empirical corruption rates at the default probabilities.
pub fn transform_checks(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let tc = TransformConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a);

    // 50 content tokens per sequence makes the force-one rule negligible.
    let vocab = Vocabulary::from_tokens((0..20).map(|i| format!("w{i}")));
    let content = vocab.content_ids();
    let mut masked = 0usize;
    let mut seen = 0usize;
    while seen < cfg.rate_candidates {
        let mut ids = vec![vocab.cls()];
        ids.extend((0..50).map(|_| rng.random_range(content.clone())));
        ids.push(vocab.sep());
        masked += mask_tokens(&ids, &vocab, tc.p_mask_tokens, &mut rng)?.positions.len();
        seen += 50;
    }
    let token_rate = masked as f64 / seen as f64;

    let feats = Matrix::<f64>::randn(60, 4, 1.0, &mut rng);
    let (mut masked, mut seen) = (0usize, 0usize);
    while seen < cfg.rate_candidates {
        masked += mask_regions(&feats, tc.p_mask_regions, &mut rng)?.positions.len();
        seen += feats.rows();
    }
    let region_rate = masked as f64 / seen as f64;

    let (mut shuffled, mut seen) = (0usize, 0usize);
    while seen < cfg.rate_candidates {
        shuffled += plan_triplet_shuffle(feats.rows(), tc.p_shuffle, &mut rng)?.triplets();
        seen += feats.rows() / 3;
    }
    let shuffle_rate = shuffled as f64 / seen as f64;

    let gen = GeneratorConfig {
        n_images: 8,
        m_regions: 3,
        n_categories: 4,
        d_roi: 4,
        seed: cfg.seed,
        ..GeneratorConfig::default()
    };
    let examples = generate(&gen)?;
    let lex = Lexicon::build(&examples)?;
    let corpus = build_stage_corpus::<f64>(Granularity::Sentence, &examples, &lex)?;
    let mut replaced = 0usize;
    let n = cfg.rate_candidates.max(1);
    for i in 0..n {
        let draw = sample_negative_pair(i % corpus.len(), None, &corpus, tc.p_replace, &mut rng)?;
        replaced += usize::from(draw.match_label == 0);
    }
    let replace_rate = replaced as f64 / n as f64;

    let mut preserved = 0usize;
    for _ in 0..cfg.shuffle_trials {
        let m = rng.random_range(3..40);
        let f = Matrix::<f64>::randn(m, 3, 1.0, &mut rng);
        let (s, _) = shuffle_region_triplets(&f, 0.5, &mut rng)?;
        let key = |x: &Matrix<f64>| -> BTreeSet<Vec<u64>> {
            (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.to_bits()).collect()).collect()
        };
        preserved += usize::from(s.rows() == m && key(&s) == key(&f));
    }
    let trials = cfg.shuffle_trials.max(1);

    Ok(vec![
        Check::within("transform.token_mask_rate", token_rate, MASK_RATE_RANGE),
        Check::within("transform.region_mask_rate", region_rate, MASK_RATE_RANGE),
        Check::within("transform.shuffle_rate", shuffle_rate, SHUFFLE_RATE_RANGE),
        Check::within("transform.replace_rate", replace_rate, REPLACE_RATE_RANGE),
        Check::new(
            "transform.shuffle_preserves_features",
            preserved == cfg.shuffle_trials,
            preserved as f64 / trials as f64,
            format!("{preserved} of {} trials", cfg.shuffle_trials),
        ),
    ])
}

/// A scorer that knows the answer ranks every gold item first.
pub fn retrieval_check() -> Result<Check> {
    let ids: Vec<String> = (0..12).map(|i| format!("img{i:02}")).collect();
    let gold: Vec<usize> = (0..12).collect();
    let r = evaluate_recall_at_k(12, &ids, &gold, |q, j| f64::from(u8::from(q == j)), &DEFAULT_KS)?;
    Ok(Check::new(
        "retrieval.planted_oracle",
        r.iter().all(|&x| x == 1.0),
        r.iter().sum::<f64>() / r.len() as f64,
        "mean of R@1, R@5, R@10",
    ))
}
