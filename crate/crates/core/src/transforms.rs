//! Stochastic corruptions that set up each pre-training task: token masking,
//! region masking, region-triplet shuffling, hard-negative image replacement and
//! topic-target construction.
//!
//! Every transform takes its RNG explicitly. When a batch is prepared, each
//! example draws from four independent streams derived from the step seed
//! (negative sampling, shuffling, region masking, token masking), so the result
//! does not depend on the order in which examples or transforms are processed.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RegionSet, StageCorpus, StageExample, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::Task;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Probability that a selected token becomes `[MASK]`; the next
/// `RANDOM_TOKEN_RATE` become a random token and the rest stay unchanged.
pub const MASK_TOKEN_RATE: f64 = 0.8;
pub const RANDOM_TOKEN_RATE: f64 = 0.1;

/// The five non-identity orderings of a triplet, as `order[new] = old`.
pub const TRIPLET_PERMUTATIONS: [[usize; 3]; 5] =
    [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn check_prob(p: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero {
        (0.0..=1.0).contains(&p)
    } else {
        p > 0.0 && p <= 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("probability {p} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    pub corrupted: Vec<usize>,
    /// Ascending positions selected for prediction.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Selects each maskable token independently with probability `p_mask`, then
/// applies the 80/10/10 replacement. Special tokens are never candidates. If
/// nothing is selected one candidate is forced.
///
/// RNG order: one uniform per candidate (left to right), one index draw if the
/// force rule fires, then per selected position one uniform for the branch and
/// one index draw when the random-token branch is taken.
pub fn mask_tokens<R: Rng + ?Sized>(
    text_ids: &[usize],
    vocab: &Vocabulary,
    p_mask: f64,
    rng: &mut R,
) -> Result<TokenMask> {
    check_prob(p_mask, false)?;
    let candidates: Vec<usize> = (0..text_ids.len())
        .filter(|&i| !vocab.is_special(text_ids[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToMask);
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < p_mask)
        .collect();
    if positions.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let content = vocab.content_ids();
    let mut corrupted = text_ids.to_vec();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < MASK_TOKEN_RATE {
            corrupted[p] = vocab.mask();
        } else if u < MASK_TOKEN_RATE + RANDOM_TOKEN_RATE {
            corrupted[p] = rng.random_range(content.clone());
        }
    }
    let targets = positions.iter().map(|&p| text_ids[p]).collect();
    Ok(TokenMask {
        corrupted,
        positions,
        targets,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask<T> {
    pub corrupted: Matrix<T>,
    pub positions: Vec<usize>,
    /// Original feature rows at `positions`.
    pub targets: Matrix<T>,
}

/// Zeroes each region row independently with probability `p_mask`, forcing one
/// if none is selected.
pub fn mask_regions<T: Scalar, R: Rng + ?Sized>(
    features: &Matrix<T>,
    p_mask: f64,
    rng: &mut R,
) -> Result<RegionMask<T>> {
    mask_regions_excluding(features, p_mask, &BTreeSet::new(), rng)
}

/// As [`mask_regions`], but positions in `excluded` are never masked. One
/// uniform is drawn for every row, excluded or not, so the draw sequence does
/// not depend on the exclusion set until the force rule.
pub fn mask_regions_excluding<T: Scalar, R: Rng + ?Sized>(
    features: &Matrix<T>,
    p_mask: f64,
    excluded: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<RegionMask<T>> {
    check_prob(p_mask, false)?;
    let m = features.rows();
    let mut positions: Vec<usize> = (0..m)
        .filter(|i| {
            let hit = rng.random::<f64>() < p_mask;
            hit && !excluded.contains(i)
        })
        .collect();
    if positions.is_empty() {
        let allowed: Vec<usize> = (0..m).filter(|i| !excluded.contains(i)).collect();
        if !allowed.is_empty() {
            positions.push(allowed[rng.random_range(0..allowed.len())]);
        }
    }
    Ok(apply_region_mask(features, positions))
}

/// Zeroes the given rows and records the originals.
pub fn apply_region_mask<T: Scalar>(features: &Matrix<T>, positions: Vec<usize>) -> RegionMask<T> {
    let targets = features.select_rows(&positions);
    let mut corrupted = features.clone();
    for &p in &positions {
        corrupted.row_mut(p).fill(T::zero());
    }
    RegionMask {
        corrupted,
        positions,
        targets,
    }
}

/// Shuffled slots as `(position, original_position)` pairs, three per shuffled
/// triplet (a slot a transposition leaves in place maps to itself).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShuffleMap {
    pub pairs: Vec<(usize, usize)>,
}

impl ShuffleMap {
    /// Number of shuffled triplets (K).
    pub fn triplets(&self) -> usize {
        self.pairs.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(p, _)| p)
    }

    /// Row order `order[new] = old` over `m` regions.
    pub fn order(&self, m: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..m).collect();
        for &(p, o) in &self.pairs {
            order[p] = o;
        }
        order
    }
}

/// Selects each of the `⌊m/3⌋` disjoint consecutive triplets with probability
/// `p_shuffle` and reorders a selected triplet by one of the five non-identity
/// permutations, uniformly. RNG order per triplet: one uniform, then one index
/// draw if selected.
pub fn shuffle_region_triplets<T: Scalar, R: Rng + ?Sized>(
    features: &Matrix<T>,
    p_shuffle: f64,
    rng: &mut R,
) -> Result<(Matrix<T>, ShuffleMap)> {
    let map = plan_triplet_shuffle(features.rows(), p_shuffle, rng)?;
    Ok((features.select_rows(&map.order(features.rows())), map))
}

pub fn plan_triplet_shuffle<R: Rng + ?Sized>(m: usize, p_shuffle: f64, rng: &mut R) -> Result<ShuffleMap> {
    check_prob(p_shuffle, true)?;
    if m < 3 {
        return Err(Error::TooFewRegions(m));
    }
    let mut pairs = Vec::new();
    for t in 0..m / 3 {
        if rng.random::<f64>() < p_shuffle {
            let perm = TRIPLET_PERMUTATIONS[rng.random_range(0..TRIPLET_PERMUTATIONS.len())];
            let base = 3 * t;
            pairs.extend((0..3).map(|k| (base + k, base + perm[k])));
        }
    }
    Ok(ShuffleMap { pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub similarity: f64,
}

/// Per image, up to M most similar other images by descending similarity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HardSampleIndex {
    entries: Vec<(String, Vec<Neighbor>)>,
    lookup: HashMap<String, usize>,
}

impl HardSampleIndex {
    pub fn from_entries(entries: Vec<(String, Vec<Neighbor>)>) -> Self {
        let lookup = entries
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        Self { entries, lookup }
    }

    pub fn neighbors(&self, image_id: &str) -> &[Neighbor] {
        self.lookup
            .get(image_id)
            .map_or(&[], |&i| self.entries[i].1.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<Neighbor>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tab-separated lines: `image_id`, then `neighbor_id similarity` pairs.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, ns) in &self.entries {
            write!(w, "{id}")?;
            for n in ns {
                write!(w, "\t{}\t{:.6}", n.image_id, n.similarity)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let rest: Vec<&str> = fields.collect();
            if rest.len() % 2 != 0 {
                return Err(Error::Invalid(format!("hard index line {}: odd field count", i + 1)));
            }
            let ns = rest
                .chunks(2)
                .map(|c| {
                    let similarity = c[1].parse::<f64>().map_err(|e| {
                        Error::Invalid(format!("hard index line {}: {e}", i + 1))
                    })?;
                    Ok(Neighbor {
                        image_id: c[0].to_string(),
                        similarity,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push((id, ns));
        }
        Ok(Self::from_entries(entries))
    }
}

fn mean_feature<T: Scalar>(regions: &RegionSet<T>) -> Vec<f64> {
    let f = &regions.features;
    let mut mean = vec![0.0; f.cols()];
    for r in 0..f.rows() {
        for (m, &x) in mean.iter_mut().zip(f.row(r)) {
            *m += x.as_f64();
        }
    }
    let n = f.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-`top_m` neighbours per image by cosine similarity of mean region
/// features, self excluded, ties broken by image id.
pub fn build_hard_sample_index<T: Scalar>(corpus: &StageCorpus<T>, top_m: usize) -> Result<HardSampleIndex> {
    if corpus.len() < 2 {
        return Err(Error::Invalid("hard-sample index needs at least two images".into()));
    }
    let means: Vec<Vec<f64>> = corpus.examples.iter().map(|e| mean_feature(&e.regions)).collect();
    let entries = corpus
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut ns: Vec<Neighbor> = corpus
                .examples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, other)| Neighbor {
                    image_id: other.image_id.clone(),
                    similarity: cosine(&means[i], &means[j]),
                })
                .collect();
            ns.sort_by(|a, b| {
                b.similarity
                    .total_cmp(&a.similarity)
                    .then_with(|| a.image_id.cmp(&b.image_id))
            });
            ns.truncate(top_m);
            (ex.image_id.clone(), ns)
        })
        .collect();
    Ok(HardSampleIndex::from_entries(entries))
}

/// Outcome of [`sample_negative_pair`]: which corpus image supplies the regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    pub source: usize,
    pub match_label: u8,
}

/// With probability `p_replace` swaps the example's image for a uniformly drawn
/// hard sample (or, when its hard list is empty or `index` is `None`, a uniform
/// other image). RNG order: one uniform, then one index draw if replaced.
pub fn sample_negative_pair<T: Scalar, R: Rng + ?Sized>(
    example: usize,
    index: Option<&HardSampleIndex>,
    corpus: &StageCorpus<T>,
    p_replace: f64,
    rng: &mut R,
) -> Result<PairDraw> {
    check_prob(p_replace, true)?;
    if rng.random::<f64>() >= p_replace {
        return Ok(PairDraw {
            source: example,
            match_label: 1,
        });
    }
    let own = &corpus.examples[example].image_id;
    let hard: Vec<usize> = index
        .map(|ix| {
            ix.neighbors(own)
                .iter()
                .filter_map(|n| corpus.position(&n.image_id))
                .filter(|&j| j != example)
                .collect()
        })
        .unwrap_or_default();
    let source = if !hard.is_empty() {
        hard[rng.random_range(0..hard.len())]
    } else {
        if corpus.len() < 2 {
            return Err(Error::NoNegativeAvailable);
        }
        let j = rng.random_range(0..corpus.len() - 1);
        if j >= example {
            j + 1
        } else {
            j
        }
    };
    Ok(PairDraw {
        source,
        match_label: 0,
    })
}

/// `Y[i] = 1` iff token `i` occurs both in the text and among the region
/// category labels; specials and the comma are always 0.
pub fn build_topic_targets(text_ids: &[usize], category_ids: &[usize], vocab: &Vocabulary) -> Vec<u8> {
    let cats: BTreeSet<usize> = category_ids.iter().copied().collect();
    let comma = vocab.comma();
    let mut y = vec![0u8; vocab.len()];
    for &t in text_ids {
        if !vocab.is_special(t) && Some(t) != comma && cats.contains(&t) {
            y[t] = 1;
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Batch preparation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub p_mask_tokens: f64,
    pub p_mask_regions: f64,
    pub p_shuffle: f64,
    pub p_replace: f64,
    /// Draw ITM negatives from the hard-sample index; otherwise uniformly.
    pub hard_negatives: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            p_mask_tokens: 0.15,
            p_mask_regions: 0.15,
            p_shuffle: 0.05,
            p_replace: 0.5,
            hard_negatives: true,
        }
    }
}

/// Independent per-example RNG streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Negative = 0,
    Shuffle = 1,
    RegionMask = 2,
    TokenMask = 3,
    Dropout = 4,
}

pub fn stream_rng(seed: u64, example: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(example * 8 + stream as u64);
    rng
}

/// One example after all corruptions, ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedExample<T> {
    pub image_id: String,
    /// Source image of the regions (differs from `image_id` when replaced).
    pub region_source: String,
    /// Corrupted token ids, padded with `[PAD]` to the batch width.
    pub text_ids: Vec<usize>,
    /// `true` at real (non-pad) positions.
    pub text_pad_mask: Vec<bool>,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    /// Corrupted (shuffled, masked) features.
    pub region_features: Matrix<T>,
    pub boxes: Matrix<T>,
    pub region_pad_mask: Vec<bool>,
    pub region_mask_positions: Vec<usize>,
    pub region_targets: Matrix<T>,
    pub moc_category_targets: Vec<usize>,
    pub moc_attribute_targets: Vec<usize>,
    pub shuffle_map: ShuffleMap,
    /// Pre-shuffle features of the input image, the IFRS regression targets.
    pub original_features: Matrix<T>,
    pub match_label: u8,
    pub topic_targets: Vec<u8>,
}

/// The corrupted batch consumed by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs<T> {
    pub examples: Vec<PreparedExample<T>>,
}

impl<T: Scalar> BatchInputs<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Everything [`prepare_batch`] needs besides the example list.
pub struct BatchContext<'a, T> {
    pub corpus: &'a StageCorpus<T>,
    pub vocab: &'a Vocabulary,
    pub hard_index: Option<&'a HardSampleIndex>,
    pub tasks: &'a BTreeSet<Task>,
    pub config: &'a TransformConfig,
}

/// Applies the corruptions implied by `tasks` to corpus examples `indices`.
/// Example `k` of the batch uses streams `(seed, k)`.
pub fn prepare_batch<T: Scalar>(ctx: &BatchContext<'_, T>, indices: &[usize], seed: u64) -> Result<BatchInputs<T>> {
    let mut examples = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| prepare_example(ctx, i, seed, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let width = examples.iter().map(|e| e.text_ids.len()).max().unwrap_or(0);
    let regions = examples.iter().map(|e| e.region_features.rows()).max().unwrap_or(0);
    for e in &mut examples {
        pad_example(e, width, regions, ctx.vocab.pad());
    }
    Ok(BatchInputs { examples })
}

fn pad_example<T: Scalar>(e: &mut PreparedExample<T>, width: usize, regions: usize, pad: usize) {
    e.text_ids.resize(width, pad);
    e.text_pad_mask.resize(width, false);
    let m = e.region_features.rows();
    if m < regions {
        let grow = |mat: &Matrix<T>| {
            let mut data = mat.as_slice().to_vec();
            data.resize(regions * mat.cols(), T::zero());
            Matrix::from_vec(regions, mat.cols(), data)
        };
        e.region_features = grow(&e.region_features);
        e.boxes = grow(&e.boxes);
        e.region_pad_mask.resize(regions, false);
    }
}

pub fn prepare_example<T: Scalar>(
    ctx: &BatchContext<'_, T>,
    index: usize,
    seed: u64,
    slot: u64,
) -> Result<PreparedExample<T>> {
    let cfg = ctx.config;
    let tasks = ctx.tasks;
    let ex: &StageExample<T> = &ctx.corpus.examples[index];

    let draw = if tasks.contains(&Task::ItmHs) {
        let ix = if cfg.hard_negatives { ctx.hard_index } else { None };
        sample_negative_pair(index, ix, ctx.corpus, cfg.p_replace, &mut stream_rng(seed, slot, Stream::Negative))?
    } else {
        PairDraw {
            source: index,
            match_label: 1,
        }
    };
    let source = &ctx.corpus.examples[draw.source];
    let regions = &source.regions;
    let m = regions.len();

    let shuffle_map = if tasks.contains(&Task::Ifrs) {
        plan_triplet_shuffle(m, cfg.p_shuffle, &mut stream_rng(seed, slot, Stream::Shuffle))?
    } else {
        ShuffleMap::default()
    };
    let order = shuffle_map.order(m);
    let shuffled = regions.permuted(&order);

    let (region_features, region_mask_positions, region_targets) =
        if tasks.contains(&Task::Mrfr) || tasks.contains(&Task::Moc) {
            let excluded: BTreeSet<usize> = shuffle_map.positions().collect();
            let mask = mask_regions_excluding(
                &shuffled.features,
                cfg.p_mask_regions,
                &excluded,
                &mut stream_rng(seed, slot, Stream::RegionMask),
            )?;
            (mask.corrupted, mask.positions, mask.targets)
        } else {
            (shuffled.features.clone(), Vec::new(), Matrix::zeros(0, regions.d_roi()))
        };
    let moc_category_targets = region_mask_positions.iter().map(|&p| shuffled.category_ids[p]).collect();
    let moc_attribute_targets = region_mask_positions.iter().map(|&p| shuffled.attribute_ids[p]).collect();

    let (text_ids, mlm_positions, mlm_targets) = if tasks.contains(&Task::Mlm) {
        let tm = mask_tokens(&ex.text_ids, ctx.vocab, cfg.p_mask_tokens, &mut stream_rng(seed, slot, Stream::TokenMask))?;
        (tm.corrupted, tm.positions, tm.targets)
    } else {
        (ex.text_ids.clone(), Vec::new(), Vec::new())
    };

    let topic_targets = if tasks.contains(&Task::Titp) || tasks.contains(&Task::Tits) {
        build_topic_targets(&ex.text_ids, &ex.regions.category_ids, ctx.vocab)
    } else {
        Vec::new()
    };

    let n = text_ids.len();
    Ok(PreparedExample {
        image_id: ex.image_id.clone(),
        region_source: source.image_id.clone(),
        text_ids,
        text_pad_mask: vec![true; n],
        mlm_positions,
        mlm_targets,
        region_features,
        boxes: shuffled.boxes,
        region_pad_mask: vec![true; m],
        region_mask_positions,
        region_targets,
        moc_category_targets,
        moc_attribute_targets,
        shuffle_map,
        original_features: regions.features.clone(),
        match_label: draw.match_label,
        topic_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, build_sentence_stage_corpus, Lexicon};

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "car", "green", "tree", ","])
    }

    #[test]
    fn full_probability_masks_every_candidate() {
        let v = vocab();
        let ids = vec![v.cls(), 4, 5, 6, v.sep(), v.pad()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tm = mask_tokens(&ids, &v, 1.0, &mut rng).unwrap();
        assert_eq!(tm.positions, vec![1, 2, 3]);
        assert_eq!(tm.targets, vec![4, 5, 6]);
        assert_eq!(tm.corrupted[0], v.cls());
        assert_eq!(tm.corrupted[4], v.sep());
    }

    #[test]
    fn nothing_to_mask_is_an_error() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = mask_tokens(&[v.cls(), v.sep()], &v, 0.15, &mut rng);
        assert!(matches!(r, Err(Error::NothingToMask)));
    }

    #[test]
    fn force_one_rule() {
        let v = vocab();
        let ids = vec![v.cls(), 4, v.sep()];
        for s in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let tm = mask_tokens(&ids, &v, 1e-9, &mut rng).unwrap();
            assert_eq!(tm.positions, vec![1]);
        }
    }

    #[test]
    fn region_mask_zeroes_rows_and_keeps_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Matrix::<f64>::randn(10, 3, 1.0, &mut rng);
        let all = mask_regions(&f, 1.0, &mut rng).unwrap();
        assert!(all.corrupted.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(all.targets, f);
        let some = mask_regions(&f, 0.3, &mut rng).unwrap();
        for r in 0..10 {
            if some.positions.contains(&r) {
                assert!(some.corrupted.row(r).iter().all(|&x| x == 0.0));
            } else {
                assert_eq!(some.corrupted.row(r), f.row(r));
            }
        }
    }

    #[test]
    fn shuffle_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Matrix::<f64>::randn(7, 2, 1.0, &mut rng);
        let (g, map) = shuffle_region_triplets(&f, 0.0, &mut rng).unwrap();
        assert_eq!(g, f);
        assert_eq!(map.triplets(), 0);
        let two = Matrix::<f64>::zeros(2, 2);
        assert!(matches!(
            shuffle_region_triplets(&two, 0.5, &mut rng),
            Err(Error::TooFewRegions(2))
        ));
        let (g, map) = shuffle_region_triplets(&f, 1.0, &mut rng).unwrap();
        assert_eq!(map.triplets(), 2);
        assert_eq!(g.row(6), f.row(6));
    }

    #[test]
    fn rotation_is_an_admissible_permutation() {
        assert!(TRIPLET_PERMUTATIONS.contains(&[1, 2, 0]));
        assert!(!TRIPLET_PERMUTATIONS.contains(&[0, 1, 2]));
    }

    #[test]
    fn topic_targets_are_set_intersection() {
        let v = vocab();
        let w = vec![v.cls(), v.index("a").unwrap(), v.index("green").unwrap(), v.index("car").unwrap(), v.sep()];
        let l = vec![v.index("car").unwrap(), v.index("tree").unwrap()];
        let y = build_topic_targets(&w, &l, &v);
        assert_eq!(y.iter().map(|&b| b as usize).sum::<usize>(), 1);
        assert_eq!(y[v.index("car").unwrap()], 1);
        let disjoint = build_topic_targets(&w[..3], &l, &v);
        assert!(disjoint.iter().all(|&b| b == 0));
    }

    #[test]
    fn identical_images_are_each_others_neighbors() {
        let exs = generate_synthetic_corpus(2, 4, 3, 1).unwrap();
        let mut exs = exs;
        exs[1].features = exs[0].features.clone();
        let lex = Lexicon::build(&exs).unwrap();
        let sc = build_sentence_stage_corpus::<f64>(&exs, &lex).unwrap();
        let ix = build_hard_sample_index(&sc, 100).unwrap();
        assert_eq!(ix.neighbors("img0").len(), 1);
        assert_eq!(ix.neighbors("img0")[0].image_id, "img1");
        assert!((ix.neighbors("img0")[0].similarity - 1.0).abs() < 1e-12);
        let mut buf = Vec::new();
        ix.write(&mut buf).unwrap();
        let back = HardSampleIndex::read(&buf[..]).unwrap();
        assert_eq!(back.neighbors("img1")[0].image_id, "img0");
    }

    #[test]
    fn single_image_corpus_cannot_supply_negatives() {
        let exs = generate_synthetic_corpus(1, 3, 2, 1).unwrap();
        let lex = Lexicon::build(&exs).unwrap();
        let sc = build_sentence_stage_corpus::<f64>(&exs, &lex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_negative_pair(0, None, &sc, 1.0, &mut rng),
            Err(Error::NoNegativeAvailable)
        ));
        let keep = sample_negative_pair(0, None, &sc, 0.0, &mut rng).unwrap();
        assert_eq!(keep, PairDraw { source: 0, match_label: 1 });
    }
}
