//! The compact cross-modality encoder and its task heads.
//!
//! Parameters live in a [`ParamStore`] under canonical names
//! (`module.layer-index.sublayer.tensor`, e.g. `xlayer.0.cross.query.weight`).
//! Heads are created on demand, so a checkpoint only carries the heads its
//! training actually touched.

mod checkpoint;
mod encoder;
mod param_count;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};
pub use encoder::{EncoderNodes, EncoderOutput, ExampleInput};
pub use param_count::{count_parameters, Architecture};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::losses::Task;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_xlayers: usize,
    pub ffn_size: usize,
    pub d_roi: usize,
    pub vocab_size: usize,
    pub n_attr: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    /// Applied in training mode only.
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    /// The full-size backbone: 768 hidden units, 12 heads, 5 cross-modality layers.
    fn default() -> Self {
        Self {
            hidden_size: 768,
            num_heads: 12,
            num_xlayers: 5,
            ffn_size: 3072,
            d_roi: 2048,
            vocab_size: 30522,
            n_attr: 400,
            max_text_len: 20,
            max_regions: 36,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// A desk-scale configuration sized for the given vocabulary and features.
    pub fn toy(vocab_size: usize, n_attr: usize, d_roi: usize) -> Self {
        Self {
            hidden_size: 64,
            num_heads: 4,
            num_xlayers: 2,
            ffn_size: 128,
            d_roi,
            vocab_size,
            n_attr,
            max_text_len: 32,
            max_regions: 36,
            dropout: 0.0,
            // 0.02 at width 768, rescaled by sqrt(768 / 64).
            init_std: 0.07,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("d_roi", self.d_roi),
            ("vocab_size", self.vocab_size),
            ("n_attr", self.n_attr),
            ("max_text_len", self.max_text_len),
            ("max_regions", self.max_regions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Prediction heads on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Head {
    /// Token logits, decoder tied to the word embedding table.
    Mlm,
    /// Region features back in ROI space.
    Region,
    MocCategory,
    MocAttribute,
    /// Multi-label topic logits from the pooled vector.
    Topic,
    /// Image-text match logit from the pooled vector.
    Match,
    /// Answer logits for a downstream classification task.
    Classifier,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Mlm => "head.mlm",
            Head::Region => "head.region",
            Head::MocCategory => "head.moc_category",
            Head::MocAttribute => "head.moc_attribute",
            Head::Topic => "head.topic",
            Head::Match => "head.match",
            Head::Classifier => "head.classifier",
        }
    }

    pub fn for_task(task: Task) -> &'static [Head] {
        match task {
            Task::Mlm => &[Head::Mlm],
            Task::Mrfr | Task::Ifrs => &[Head::Region],
            Task::Moc => &[Head::MocCategory, Head::MocAttribute],
            Task::Titp | Task::Tits => &[Head::Topic],
            Task::ItmHs => &[Head::Match],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Seed used for every initialization, including later head creation.
    pub seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl<T: Scalar> Model<T> {
    /// Encoder and pooler initialized from `seed`; no heads.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config,
            params: ParamStore::new(),
            seed,
        };
        let c = m.config.clone();
        let h = c.hidden_size;
        m.dense("embeddings.word.weight", c.vocab_size, h);
        m.dense("embeddings.position.weight", c.max_text_len, h);
        m.layer_norm("embeddings.ln", h);
        m.linear("visual.feat", c.d_roi, h);
        m.layer_norm("visual.feat_ln", h);
        m.linear("visual.box", 4, h);
        m.layer_norm("visual.box_ln", h);
        for i in 0..c.num_xlayers {
            for att in ["cross", "lang_self", "visn_self"] {
                let p = format!("xlayer.{i}.{att}");
                for proj in ["query", "key", "value", "output"] {
                    m.linear(&format!("{p}.{proj}"), h, h);
                }
                m.layer_norm(&format!("{p}.ln"), h);
            }
            for ffn in ["lang_ffn", "visn_ffn"] {
                let p = format!("xlayer.{i}.{ffn}");
                m.linear(&format!("{p}.inter"), h, c.ffn_size);
                m.linear(&format!("{p}.output"), c.ffn_size, h);
                m.layer_norm(&format!("{p}.ln"), h);
            }
        }
        m.linear("pooler.dense", h, h);
        Ok(m)
    }

    /// Encoder plus every pre-training head.
    pub fn with_pretraining_heads(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        for h in [Head::Mlm, Head::Region, Head::MocCategory, Head::MocAttribute, Head::Topic, Head::Match] {
            m.ensure_head(h, 0);
        }
        Ok(m)
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(name_seed(self.seed, name))
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) {
        let mut rng = self.rng_for(name);
        let t = Matrix::randn(rows, cols, self.config.init_std, &mut rng);
        self.params.insert(name, t);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.dense(&format!("{prefix}.weight"), fan_in, fan_out);
        self.params.insert(format!("{prefix}.bias"), Matrix::zeros(1, fan_out));
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.params.insert(format!("{prefix}.gamma"), Matrix::filled(1, width, T::one()));
        self.params.insert(format!("{prefix}.beta"), Matrix::zeros(1, width));
    }

    pub fn has_head(&self, head: Head) -> bool {
        match head {
            Head::Mlm => self.params.contains("head.mlm.bias"),
            _ => self.params.contains(&format!("{}.weight", head.prefix())),
        }
    }

    /// Creates `head` if missing. `n_classes` is only read for [`Head::Classifier`];
    /// an existing classifier of a different width is replaced.
    pub fn ensure_head(&mut self, head: Head, n_classes: usize) {
        let c = &self.config;
        let (h, v, d, a) = (c.hidden_size, c.vocab_size, c.d_roi, c.n_attr);
        if head == Head::Classifier {
            if let Some(w) = self.params.by_name("head.classifier.weight") {
                if w.cols() == n_classes {
                    return;
                }
                self.remove_prefix("head.classifier");
            }
        } else if self.has_head(head) {
            return;
        }
        match head {
            Head::Mlm => {
                self.linear("head.mlm.transform", h, h);
                self.layer_norm("head.mlm.transform_ln", h);
                self.params.insert("head.mlm.bias", Matrix::zeros(1, v));
            }
            Head::Region => self.linear("head.region", h, d),
            Head::MocCategory => self.linear("head.moc_category", h, v),
            Head::MocAttribute => self.linear("head.moc_attribute", h, a),
            Head::Topic => self.linear("head.topic", h, v),
            Head::Match => self.linear("head.match", h, 1),
            Head::Classifier => self.linear("head.classifier", h, n_classes),
        }
    }

    fn remove_prefix(&mut self, prefix: &str) {
        let mut fresh = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            if !name.starts_with(prefix) {
                fresh.insert(name, t.clone());
            }
        }
        self.params = fresh;
    }

    pub fn ensure_heads_for(&mut self, tasks: impl IntoIterator<Item = Task>) {
        for t in tasks {
            for &h in Head::for_task(t) {
                self.ensure_head(h, 0);
            }
        }
    }

    /// Appends the head's output node for `x` (token, region or pooled rows).
    pub fn head_node(&self, g: &mut Graph<'_, T>, head: Head, x: NodeId) -> Result<NodeId> {
        if !self.has_head(head) {
            return Err(Error::MissingHead(head.prefix().trim_start_matches("head.").to_string()));
        }
        Ok(match head {
            Head::Mlm => {
                // Dense, GELU and layer norm, then the tied decoder. Without the
                // transform the final text states are pinned to embedding space.
                let t = g.linear(x, "head.mlm.transform.weight", "head.mlm.transform.bias");
                let t = g.gelu(t);
                let gamma = g.param_named("head.mlm.transform_ln.gamma");
                let beta = g.param_named("head.mlm.transform_ln.beta");
                let x = g.layer_norm(t, gamma, beta);
                let emb = g.param_named("embeddings.word.weight");
                let b = g.param_named("head.mlm.bias");
                let logits = g.matmul_bt(x, emb);
                g.add_row(logits, b)
            }
            _ => {
                let p = head.prefix();
                g.linear(x, &format!("{p}.weight"), &format!("{p}.bias"))
            }
        })
    }

    /// Evaluates one head on plain activations.
    pub fn apply_head(&self, head: Head, states: &Matrix<T>) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.input(states.clone());
        let out = self.head_node(&mut g, head, x)?;
        Ok(g.value(out).clone())
    }

    /// Token logits over the vocabulary for every text position.
    pub fn head_mlm(&self, text_states: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply_head(Head::Mlm, text_states)
    }

    /// Predicted ROI features for every region.
    pub fn head_region_regression(&self, vision_states: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply_head(Head::Region, vision_states)
    }

    /// Category logits (over the vocabulary) and attribute logits per region.
    pub fn head_moc(&self, vision_states: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        Ok((
            self.apply_head(Head::MocCategory, vision_states)?,
            self.apply_head(Head::MocAttribute, vision_states)?,
        ))
    }

    pub fn head_topic(&self, pooled: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply_head(Head::Topic, pooled)
    }

    pub fn head_match(&self, pooled: &Matrix<T>) -> Result<Matrix<T>> {
        self.apply_head(Head::Match, pooled)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.count("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            num_heads: 2,
            num_xlayers: 1,
            ffn_size: 16,
            d_roi: 4,
            vocab_size: 12,
            n_attr: 3,
            max_text_len: 8,
            max_regions: 6,
            dropout: 0.0,
            init_std: 0.3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(Model::<f64>::new(c, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::<f64>::with_pretraining_heads(tiny(), 1).unwrap();
        for name in ["head.topic.weight", "head.topic.bias", "head.match.weight", "head.match.bias"] {
            m.params.by_name_mut(name).unwrap().as_mut_slice().fill(0.0);
        }
        let pooled = Matrix::filled(2, 8, 0.7);
        assert!(m.head_topic(&pooled).unwrap().as_slice().iter().all(|&x| x == 0.0));
        assert!(m.head_match(&pooled).unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mlm_head_is_tied_to_embeddings() {
        let mut m = Model::<f64>::with_pretraining_heads(tiny(), 2).unwrap();
        let states = Matrix::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let before = m.head_mlm(&states).unwrap();
        let emb = m.params.by_name_mut("embeddings.word.weight").unwrap();
        emb.row_mut(5).iter_mut().for_each(|x| *x += 1.0);
        let after = m.head_mlm(&states).unwrap();
        for r in 0..3 {
            for c in 0..12 {
                assert_eq!(before[(r, c)] != after[(r, c)], c == 5, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn match_head_is_not_degenerate() {
        let m = Model::<f64>::with_pretraining_heads(tiny(), 3).unwrap();
        let pooled = Matrix::from_rows(&[vec![0.1; 8], vec![-0.4; 8]]);
        let out = m.head_match(&pooled).unwrap();
        assert_ne!(out[(0, 0)], out[(1, 0)]);
    }

    #[test]
    fn heads_are_created_lazily_and_deterministically() {
        let mut a = Model::<f32>::new(tiny(), 9).unwrap();
        assert!(!a.has_head(Head::Match));
        assert!(matches!(a.head_match(&Matrix::zeros(1, 8)), Err(Error::MissingHead(_))));
        a.ensure_head(Head::Match, 0);
        a.ensure_head(Head::Topic, 0);
        let mut b = Model::<f32>::new(tiny(), 9).unwrap();
        b.ensure_head(Head::Topic, 0);
        b.ensure_head(Head::Match, 0);
        assert_eq!(a.params.by_name("head.match.weight"), b.params.by_name("head.match.weight"));
    }
}
