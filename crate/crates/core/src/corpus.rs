//! Image-text data model, vocabulary, corpus files, the synthetic generator and
//! the token / phrase / sentence stage builders.
//!
//! An [`ImageTextExample`] is the on-disk record: region features with string
//! labels, a caption and a list of phrases. Stage corpora resolve those strings
//! against a [`Lexicon`] into index sequences ready for the transforms.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
/// Separator token placed between phrases in phrase-stage text.
pub const COMMA: &str = ",";

const SPECIALS: [&str; 4] = [PAD, CLS, SEP, MASK];

/// Image-text pair budgets per stage (token, phrase, sentence) used for the
/// full-scale runs. Desk-scale corpora are far smaller; see [`StageCorpus::truncate`].
pub const REFERENCE_STAGE_BUDGETS: [usize; 3] = [120_000, 340_000, 620_000];

/// Token-level vocabulary: four reserved specials followed by content tokens
/// in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = content
            .into_iter()
            .map(Into::into)
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.index(t.as_ref())
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn cls(&self) -> usize {
        1
    }

    pub fn sep(&self) -> usize {
        2
    }

    pub fn mask(&self) -> usize {
        3
    }

    pub fn comma(&self) -> Option<usize> {
        self.index(COMMA)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids of every non-special token.
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Self {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// A phrase attached to an image, flagged when it contains a verb.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub verb: bool,
}

impl Phrase {
    pub fn noun(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            verb: false,
        }
    }

    pub fn verb(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            verb: true,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

/// One image with its detected regions, caption and phrases, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTextExample {
    pub image_id: String,
    /// `m × d_roi` region features.
    pub features: Vec<Vec<f64>>,
    /// `m` normalized boxes `(x1, y1, x2, y2)`.
    pub boxes: Vec<[f64; 4]>,
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
    pub caption: String,
    #[serde(default)]
    pub phrases: Vec<Phrase>,
}

impl ImageTextExample {
    pub fn region_count(&self) -> usize {
        self.features.len()
    }

    pub fn caption_tokens(&self) -> Vec<&str> {
        self.caption.split_whitespace().collect()
    }

    /// Checks the record against a declared region count and feature width.
    pub fn validate(&self, m: usize, d_roi: usize) -> Result<()> {
        let fail = |message: String| Error::Validation {
            image_id: self.image_id.clone(),
            message,
        };
        if self.features.len() != m {
            return Err(fail(format!("features: expected {m} rows, got {}", self.features.len())));
        }
        if let Some(r) = self.features.iter().position(|r| r.len() != d_roi) {
            return Err(fail(format!(
                "features: row {r} has {} values, expected {d_roi}",
                self.features[r].len()
            )));
        }
        for (name, len) in [
            ("boxes", self.boxes.len()),
            ("categories", self.categories.len()),
            ("attributes", self.attributes.len()),
        ] {
            if len != m {
                return Err(fail(format!("{name}: expected {m} entries, got {len}")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(fail(format!("boxes: box {i} has coordinates outside [0, 1]")));
            }
            if b[0] > b[2] || b[1] > b[3] {
                return Err(fail(format!("boxes: box {i} violates x1 <= x2, y1 <= y2")));
            }
        }
        if let Some(c) = self.categories.iter().find(|c| SPECIALS.contains(&c.as_str())) {
            return Err(fail(format!("categories: reserved token {c} used as a label")));
        }
        if self.caption.split_whitespace().next().is_none() {
            return Err(fail("caption: empty".into()));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("features: non-finite value".into()));
        }
        Ok(())
    }
}

/// Builds the token vocabulary over captions, phrases, category and
/// attribute labels.
///
/// The comma separator is added whenever some example carries a noun phrase,
/// since phrase-stage text joins phrases with it.
pub fn build_vocabulary(examples: &[ImageTextExample]) -> Result<Vocabulary> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tokens: Vec<&str> = Vec::new();
    let mut has_noun_phrase = false;
    for ex in examples {
        tokens.extend(ex.caption.split_whitespace());
        tokens.extend(ex.categories.iter().map(String::as_str));
        tokens.extend(ex.attributes.iter().map(String::as_str));
        for p in &ex.phrases {
            tokens.extend(p.tokens());
            has_noun_phrase |= !p.verb;
        }
    }
    if has_noun_phrase {
        tokens.push(COMMA);
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Attribute classes form their own index space, separate from the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeClasses {
    names: Vec<String>,
}

impl AttributeClasses {
    pub fn from_examples(examples: &[ImageTextExample]) -> Self {
        let set: BTreeSet<&str> = examples
            .iter()
            .flat_map(|e| e.attributes.iter().map(String::as_str))
            .collect();
        Self {
            names: set.into_iter().map(str::to_string).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }
}

/// Vocabulary plus attribute classes: everything needed to resolve an example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub vocab: Vocabulary,
    pub attributes: AttributeClasses,
}

impl Lexicon {
    pub fn build(examples: &[ImageTextExample]) -> Result<Self> {
        Ok(Self {
            vocab: build_vocabulary(examples)?,
            attributes: AttributeClasses::from_examples(examples),
        })
    }

    pub fn resolve_regions<T: Scalar>(&self, ex: &ImageTextExample) -> Result<RegionSet<T>> {
        let m = ex.region_count();
        let d = ex.features.first().map_or(0, Vec::len);
        let features = Matrix::from_vec(
            m,
            d,
            ex.features.iter().flatten().map(|&v| T::c(v)).collect(),
        );
        let boxes = Matrix::from_vec(m, 4, ex.boxes.iter().flatten().map(|&v| T::c(v)).collect());
        let category_ids = self.vocab.encode(&ex.categories)?;
        let attribute_ids = ex
            .attributes
            .iter()
            .map(|a| {
                self.attributes
                    .index(a)
                    .ok_or_else(|| Error::UnknownToken(a.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionSet {
            features,
            boxes,
            category_ids,
            attribute_ids,
        })
    }
}

/// Region features and labels of one image, resolved to indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet<T> {
    /// `m × d_roi`; the stored rows are the regression targets.
    pub features: Matrix<T>,
    /// `m × 4` normalized boxes.
    pub boxes: Matrix<T>,
    /// Vocabulary ids of the category labels.
    pub category_ids: Vec<usize>,
    /// Attribute-class ids.
    pub attribute_ids: Vec<usize>,
}

impl<T: Scalar> RegionSet<T> {
    pub fn len(&self) -> usize {
        self.category_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_ids.is_empty()
    }

    pub fn d_roi(&self) -> usize {
        self.features.cols()
    }

    /// Reorders every per-region field by `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(order),
            boxes: self.boxes.select_rows(order),
            category_ids: order.iter().map(|&i| self.category_ids[i]).collect(),
            attribute_ids: order.iter().map(|&i| self.attribute_ids[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Granularity {
    Token,
    Phrase,
    Sentence,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Token, Granularity::Phrase, Granularity::Sentence];

    pub fn letter(self) -> char {
        match self {
            Granularity::Token => 'T',
            Granularity::Phrase => 'P',
            Granularity::Sentence => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'T' => Some(Granularity::Token),
            'P' => Some(Granularity::Phrase),
            'S' => Some(Granularity::Sentence),
            _ => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Token => "TOKEN",
            Granularity::Phrase => "PHRASE",
            Granularity::Sentence => "SENTENCE",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageExample<T> {
    pub image_id: String,
    /// `[CLS] … [SEP]`.
    pub text_ids: Vec<usize>,
    pub regions: RegionSet<T>,
}

/// A corpus specialised to one granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCorpus<T> {
    pub granularity: Granularity,
    pub examples: Vec<StageExample<T>>,
    /// Images excluded because their stage text came out empty.
    pub dropped: usize,
}

impl<T: Scalar> StageCorpus<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Keeps only the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.examples.truncate(n);
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.image_id == image_id)
    }
}

fn wrap(vocab: &Vocabulary, body: Vec<usize>) -> Vec<usize> {
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(vocab.cls());
    ids.extend(body);
    ids.push(vocab.sep());
    ids
}

/// Text is the region category labels in region order.
pub fn build_token_stage_corpus<T: Scalar>(
    examples: &[ImageTextExample],
    lex: &Lexicon,
) -> Result<StageCorpus<T>> {
    let examples = examples
        .iter()
        .map(|ex| {
            let regions = lex.resolve_regions(ex)?;
            Ok(StageExample {
                image_id: ex.image_id.clone(),
                text_ids: wrap(&lex.vocab, regions.category_ids.clone()),
                regions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageCorpus {
        granularity: Granularity::Token,
        examples,
        dropped: 0,
    })
}

/// Text is the non-verb phrases in source order joined by the comma token.
/// Images with no remaining phrase are dropped and counted.
pub fn build_phrase_stage_corpus<T: Scalar>(
    examples: &[ImageTextExample],
    lex: &Lexicon,
) -> Result<StageCorpus<T>> {
    let mut out = Vec::new();
    let mut dropped = 0;
    for ex in examples {
        let kept: Vec<&Phrase> = ex.phrases.iter().filter(|p| !p.verb).collect();
        if kept.iter().all(|p| p.tokens().next().is_none()) {
            dropped += 1;
            continue;
        }
        let comma = lex
            .vocab
            .comma()
            .ok_or_else(|| Error::UnknownToken(COMMA.into()))?;
        let mut body = Vec::new();
        for p in kept.iter().filter(|p| p.tokens().next().is_some()) {
            if !body.is_empty() {
                body.push(comma);
            }
            body.extend(lex.vocab.encode(&p.tokens().collect::<Vec<_>>())?);
        }
        out.push(StageExample {
            image_id: ex.image_id.clone(),
            text_ids: wrap(&lex.vocab, body),
            regions: lex.resolve_regions(ex)?,
        });
    }
    Ok(StageCorpus {
        granularity: Granularity::Phrase,
        examples: out,
        dropped,
    })
}

/// Text is the caption. Empty captions are dropped and counted.
pub fn build_sentence_stage_corpus<T: Scalar>(
    examples: &[ImageTextExample],
    lex: &Lexicon,
) -> Result<StageCorpus<T>> {
    let mut out = Vec::new();
    let mut dropped = 0;
    for ex in examples {
        let toks = ex.caption_tokens();
        if toks.is_empty() {
            dropped += 1;
            continue;
        }
        out.push(StageExample {
            image_id: ex.image_id.clone(),
            text_ids: wrap(&lex.vocab, lex.vocab.encode(&toks)?),
            regions: lex.resolve_regions(ex)?,
        });
    }
    Ok(StageCorpus {
        granularity: Granularity::Sentence,
        examples: out,
        dropped,
    })
}

pub fn build_stage_corpus<T: Scalar>(
    granularity: Granularity,
    examples: &[ImageTextExample],
    lex: &Lexicon,
) -> Result<StageCorpus<T>> {
    match granularity {
        Granularity::Token => build_token_stage_corpus(examples, lex),
        Granularity::Phrase => build_phrase_stage_corpus(examples, lex),
        Granularity::Sentence => build_sentence_stage_corpus(examples, lex),
    }
}

/// Longest `[CLS] … [SEP]` sequence any granularity produces for `examples`;
/// the lower bound on a model's `max_text_len`.
pub fn longest_stage_text(examples: &[ImageTextExample], lex: &Lexicon) -> Result<usize> {
    let mut longest = 0;
    for g in Granularity::ALL {
        let c = build_stage_corpus::<f64>(g, examples, lex)?;
        longest = c.examples.iter().map(|e| e.text_ids.len()).fold(longest, usize::max);
    }
    Ok(longest)
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

pub const CORPUS_FORMAT: &str = "msp-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub m: usize,
    pub d_roi: usize,
}

/// Writes the header line followed by one JSON record per image.
pub fn write_corpus<W: Write>(mut w: W, examples: &[ImageTextExample]) -> Result<()> {
    let first = examples.first().ok_or(Error::EmptyCorpus)?;
    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        m: first.region_count(),
        d_roi: first.features.first().map_or(0, Vec::len),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, examples: &[ImageTextExample]) -> Result<()> {
    write_corpus(BufWriter::new(File::create(path)?), examples)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ImageTextExample>> {
    let path = path.as_ref();
    read_corpus(BufReader::new(File::open(path)?), path)
}

/// Parses a corpus stream; `origin` is only used in error messages.
pub fn read_corpus<R: BufRead>(r: R, origin: &Path) -> Result<Vec<ImageTextExample>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = r.lines().enumerate();
    let header: CorpusHeader = loop {
        match lines.next() {
            None => return Err(Error::EmptyCorpus),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| perr(i + 1, format!("header: {e}")))?;
            }
        }
    };
    if header.format != CORPUS_FORMAT {
        return Err(perr(1, format!("unexpected format {:?}", header.format)));
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CORPUS_VERSION,
        });
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ImageTextExample =
            serde_json::from_str(&line).map_err(|e| perr(i + 1, e.to_string()))?;
        ex.validate(header.m, header.d_roi)?;
        if !seen.insert(ex.image_id.clone()) {
            return Err(perr(i + 1, format!("duplicate image_id {}", ex.image_id)));
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

const NOUNS: [&str; 24] = [
    "dog", "cat", "car", "tree", "man", "woman", "horse", "ball", "bench", "bike", "boat", "bird",
    "cup", "table", "chair", "kite", "train", "clock", "shirt", "hat", "rock", "phone", "lamp",
    "sign",
];
const ADJECTIVES: [&str; 12] = [
    "red", "green", "blue", "white", "black", "old", "small", "large", "wooden", "shiny", "striped",
    "pink",
];
const VERBS: [&str; 6] = ["running", "sitting", "standing", "eating", "sleeping", "jumping"];
const TEMPLATES: [&str; 3] = [
    "the {a} {c} is next to a {d}",
    "there is a {a} {c} near the {d}",
    "this is the {a} {c} with a {d}",
];

pub fn category_name(i: usize) -> String {
    if i < NOUNS.len() {
        NOUNS[i].to_string()
    } else {
        format!("object{i}")
    }
}

pub fn attribute_name(i: usize) -> String {
    if i < ADJECTIVES.len() {
        ADJECTIVES[i].to_string()
    } else {
        format!("quality{i}")
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_images: usize,
    pub m_regions: usize,
    pub n_categories: usize,
    pub n_attributes: usize,
    pub d_roi: usize,
    /// Probability that an image's phrase for one category is a verb phrase.
    pub verb_rate: f64,
    /// Scale of the per-attribute prototype added to the category prototype.
    pub attribute_scale: f64,
    /// Standard deviation of per-region noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            m_regions: 36,
            n_categories: 20,
            n_attributes: 6,
            d_roi: 16,
            verb_rate: 0.2,
            attribute_scale: 0.5,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

pub fn generate_synthetic_corpus(
    n_images: usize,
    m_regions: usize,
    n_categories: usize,
    seed: u64,
) -> Result<Vec<ImageTextExample>> {
    generate(&GeneratorConfig {
        n_images,
        m_regions,
        n_categories,
        seed,
        ..GeneratorConfig::default()
    })
}

/// Draws a corpus whose region features are Gaussian around per-category and
/// per-attribute prototypes, so labels are recoverable from features.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<ImageTextExample>> {
    if cfg.n_images == 0 || cfg.m_regions == 0 || cfg.n_categories == 0 || cfg.n_attributes == 0 || cfg.d_roi == 0 {
        return Err(Error::Invalid("generator counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.verb_rate) {
        return Err(Error::Invalid("verb_rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    };
    let cat_protos: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| (0..cfg.d_roi).map(|_| gauss(&mut rng, 1.0)).collect())
        .collect();
    let attr_protos: Vec<Vec<f64>> = (0..cfg.n_attributes)
        .map(|_| (0..cfg.d_roi).map(|_| gauss(&mut rng, cfg.attribute_scale)).collect())
        .collect();
    let width = (cfg.n_images.max(1) as f64).log10().floor() as usize + 1;

    let mut out = Vec::with_capacity(cfg.n_images);
    for img in 0..cfg.n_images {
        let mut features = Vec::with_capacity(cfg.m_regions);
        let mut boxes = Vec::with_capacity(cfg.m_regions);
        let mut cats = Vec::with_capacity(cfg.m_regions);
        let mut attrs = Vec::with_capacity(cfg.m_regions);
        for slot in 0..cfg.m_regions {
            let c = rng.random_range(0..cfg.n_categories);
            let a = rng.random_range(0..cfg.n_attributes);
            let f: Vec<f64> = (0..cfg.d_roi)
                .map(|k| cat_protos[c][k] + attr_protos[a][k] + gauss(&mut rng, cfg.noise_std))
                .collect();
            let [x1, y1, x2, y2] = grid_box(slot, cfg.m_regions, &mut rng);
            features.push(f);
            boxes.push([x1, y1, x2, y2]);
            cats.push(c);
            attrs.push(a);
        }

        // Distinct categories in order of first appearance, each with the
        // attribute of its first region.
        let mut distinct: Vec<(usize, usize)> = Vec::new();
        for (&c, &a) in cats.iter().zip(&attrs) {
            if !distinct.iter().any(|&(d, _)| d == c) {
                distinct.push((c, a));
            }
        }

        let mut mentioned = distinct.clone();
        mentioned.shuffle(&mut rng);
        let (c0, a0) = mentioned[0];
        let d = mentioned.get(1).map_or(c0, |&(c, _)| c);
        let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let caption = template
            .replace("{a}", &attribute_name(a0))
            .replace("{c}", &category_name(c0))
            .replace("{d}", &category_name(d));

        let phrases = distinct
            .iter()
            .map(|&(c, a)| {
                if rng.random_bool(cfg.verb_rate) {
                    let v = VERBS[rng.random_range(0..VERBS.len())];
                    Phrase::verb(format!("{} {v}", category_name(c)))
                } else {
                    Phrase::noun(format!("{} {}", attribute_name(a), category_name(c)))
                }
            })
            .collect();

        out.push(ImageTextExample {
            image_id: format!("img{img:0width$}"),
            features,
            boxes,
            categories: cats.into_iter().map(category_name).collect(),
            attributes: attrs.into_iter().map(attribute_name).collect(),
            caption,
            phrases,
        });
    }
    Ok(out)
}

/// Regions are laid out in reading order on a square grid; each box is its
/// cell with jittered margins, rounded to two decimals.
fn grid_box(slot: usize, m: usize, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let side = (m as f64).sqrt().ceil() as usize;
    let cell = 1.0 / side as f64;
    let (row, col) = (slot / side, slot % side);
    let mut margin = || rng.random::<f64>() * 0.25 * cell;
    let x1 = col as f64 * cell + margin();
    let y1 = row as f64 * cell + margin();
    let x2 = (col + 1) as f64 * cell - margin();
    let y2 = (row + 1) as f64 * cell - margin();
    [x1, y1, x2, y2].map(|v| ((v * 100.0).round() / 100.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, cats: &[&str], caption: &str, phrases: Vec<Phrase>) -> ImageTextExample {
        ImageTextExample {
            image_id: id.into(),
            features: cats.iter().map(|_| vec![0.5, -0.5]).collect(),
            boxes: cats.iter().map(|_| [0.1, 0.1, 0.5, 0.5]).collect(),
            categories: cats.iter().map(|c| c.to_string()).collect(),
            attributes: cats.iter().map(|_| "red".to_string()).collect(),
            caption: caption.into(),
            phrases,
        }
    }

    #[test]
    fn vocabulary_orders_specials_then_lexicographic() {
        let exs = vec![
            example("a", &["cat"], "a cat", vec![]),
            example("b", &["dog"], "a dog", vec![]),
        ];
        let v = build_vocabulary(&exs).unwrap();
        assert_eq!(v.len(), 8);
        let (a, cat, dog) = (v.index("a").unwrap(), v.index("cat").unwrap(), v.index("dog").unwrap());
        assert!(4 <= a && a < cat && cat < dog);
        for i in 0..v.len() {
            assert_eq!(v.index(v.token(i)), Some(i));
        }
    }

    #[test]
    fn vocabulary_dedups() {
        let mut ex = example("a", &["car"], "car", vec![]);
        ex.attributes = vec!["car".into()];
        let v = build_vocabulary(&[ex]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.tokens().iter().filter(|t| *t == "car").count(), 1);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_vocabulary(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn token_stage_uses_category_order() {
        let exs = vec![example("a", &["dog", "ball"], "a dog", vec![])];
        let lex = Lexicon::build(&exs).unwrap();
        let sc = build_token_stage_corpus::<f64>(&exs, &lex).unwrap();
        let toks: Vec<&str> = sc.examples[0].text_ids.iter().map(|&i| lex.vocab.token(i)).collect();
        assert_eq!(toks, [CLS, "dog", "ball", SEP]);
    }

    #[test]
    fn phrase_stage_drops_verbs_and_joins_with_commas() {
        let exs = vec![
            example(
                "a",
                &["car", "man"],
                "a car",
                vec![Phrase::noun("green old car"), Phrase::verb("man running")],
            ),
            example("b", &["car"], "a car", vec![Phrase::noun("red car"), Phrase::noun("old car")]),
            example("c", &["man"], "a man", vec![Phrase::verb("man running")]),
        ];
        let lex = Lexicon::build(&exs).unwrap();
        let sc = build_phrase_stage_corpus::<f64>(&exs, &lex).unwrap();
        let text = |i: usize| -> Vec<&str> {
            sc.examples[i].text_ids.iter().map(|&t| lex.vocab.token(t)).collect()
        };
        assert_eq!(text(0), [CLS, "green", "old", "car", SEP]);
        assert_eq!(text(1), [CLS, "red", "car", ",", "old", "car", SEP]);
        assert_eq!(sc.len(), 2);
        assert_eq!(sc.dropped, 1);
    }

    #[test]
    fn sentence_stage_wraps_caption() {
        let exs = vec![
            example("a", &["man", "horse"], "a man rides a horse", vec![]),
            example("b", &["man"], "   ", vec![]),
        ];
        let lex = Lexicon::build(&exs[..1]).unwrap();
        let sc = build_sentence_stage_corpus::<f32>(&exs, &lex).unwrap();
        assert_eq!(sc.examples[0].text_ids.len(), 7);
        assert_eq!(sc.dropped, 1);
        assert_eq!(sc.len(), exs.len() - sc.dropped);
    }

    #[test]
    fn validation_errors_name_the_problem() {
        let mut ex = example("bad", &["car", "dog"], "a car", vec![]);
        ex.categories.pop();
        let e = ex.validate(2, 2).unwrap_err().to_string();
        assert!(e.contains("categories"), "{e}");

        let mut ex = example("flip", &["car"], "a car", vec![]);
        ex.boxes[0] = [0.8, 0.1, 0.2, 0.5];
        let e = ex.validate(1, 2).unwrap_err().to_string();
        assert!(e.contains("flip"), "{e}");

        let mut ex = example("sp", &["car"], "a car", vec![]);
        ex.categories[0] = MASK.into();
        assert!(ex.validate(1, 2).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_corpus(1, 2, 2, 0).unwrap();
        let b = generate_synthetic_corpus(1, 2, 2, 0).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_corpus(&mut ba, &a).unwrap();
        write_corpus(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
    }
}
