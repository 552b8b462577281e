use rand::Rng;

use super::Model;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// One image-text pair as seen by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct ExampleInput<'a, T> {
    pub text_ids: &'a [usize],
    /// `true` at real positions; pads are excluded as attention keys.
    pub text_mask: &'a [bool],
    pub features: &'a Matrix<T>,
    pub boxes: &'a Matrix<T>,
    pub region_mask: &'a [bool],
}

/// Tape nodes of one encoder pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderNodes {
    /// `n × H` text states.
    pub text: NodeId,
    /// `m × H` region states.
    pub vision: NodeId,
    /// `1 × H` pooled vector.
    pub pooled: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub text: Matrix<T>,
    pub vision: Matrix<T>,
    pub pooled: Matrix<T>,
}

impl<T: Scalar> Model<T> {
    pub fn check_input(&self, x: &ExampleInput<'_, T>) -> Result<()> {
        let c = &self.config;
        let n = x.text_ids.len();
        let m = x.features.rows();
        let fail = |msg: String| Err(Error::Shape(msg));
        if n == 0 {
            return fail("empty text".into());
        }
        if n > c.max_text_len {
            return fail(format!("text length {n} exceeds max_text_len {}", c.max_text_len));
        }
        if x.text_mask.len() != n {
            return fail(format!("text mask has {} entries for {n} tokens", x.text_mask.len()));
        }
        if let Some(&id) = x.text_ids.iter().find(|&&id| id >= c.vocab_size) {
            return fail(format!("token id {id} outside vocabulary of {}", c.vocab_size));
        }
        if m == 0 {
            return fail("no regions".into());
        }
        if m > c.max_regions {
            return fail(format!("{m} regions exceed max_regions {}", c.max_regions));
        }
        if x.features.cols() != c.d_roi {
            return fail(format!("feature width {} != d_roi {}", x.features.cols(), c.d_roi));
        }
        if x.boxes.shape() != (m, 4) {
            return fail(format!("boxes are {:?}, expected ({m}, 4)", x.boxes.shape()));
        }
        if x.region_mask.len() != m {
            return fail(format!("region mask has {} entries for {m} regions", x.region_mask.len()));
        }
        Ok(())
    }

    /// Appends the encoder to `g`. Passing an RNG enables dropout.
    pub fn encode_nodes<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x: &ExampleInput<'_, T>,
        mut dropout: Option<&mut R>,
    ) -> Result<EncoderNodes> {
        self.check_input(x)?;
        let p = self.config.dropout;
        let mut drop = |g: &mut Graph<'_, T>, node: NodeId| match dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let (r, c) = g.value(node).shape();
                let keep = T::c(1.0 / (1.0 - p));
                let mask = (0..r * c)
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                    .collect();
                g.mul_const(node, Matrix::from_vec(r, c, mask))
            }
            _ => node,
        };

        let n = x.text_ids.len();
        let word = g.param_named("embeddings.word.weight");
        let pos = g.param_named("embeddings.position.weight");
        let w = g.gather_rows(word, x.text_ids);
        let positions: Vec<usize> = (0..n).collect();
        let ps = g.gather_rows(pos, &positions);
        let sum = g.add(w, ps);
        let text = layer_norm(g, sum, "embeddings.ln");
        let mut lang = drop(g, text);

        let feats = g.input(x.features.clone());
        let boxes = g.input(x.boxes.clone());
        let f = g.linear(feats, "visual.feat.weight", "visual.feat.bias");
        let f = layer_norm(g, f, "visual.feat_ln");
        let b = g.linear(boxes, "visual.box.weight", "visual.box.bias");
        let b = layer_norm(g, b, "visual.box_ln");
        let fb = g.add(f, b);
        let vis = g.scale(fb, T::c(0.5));
        let mut visn = drop(g, vis);

        for i in 0..self.config.num_xlayers {
            let cross = format!("xlayer.{i}.cross");
            let l = self.attention(g, &cross, lang, visn, x.region_mask, &mut drop);
            let v = self.attention(g, &cross, visn, lang, x.text_mask, &mut drop);
            let l = self.attention(g, &format!("xlayer.{i}.lang_self"), l, l, x.text_mask, &mut drop);
            let v = self.attention(g, &format!("xlayer.{i}.visn_self"), v, v, x.region_mask, &mut drop);
            lang = ffn(g, &format!("xlayer.{i}.lang_ffn"), l, &mut drop);
            visn = ffn(g, &format!("xlayer.{i}.visn_ffn"), v, &mut drop);
        }

        let cls = g.select_rows(lang, &[0]);
        let dense = g.linear(cls, "pooler.dense.weight", "pooler.dense.bias");
        let pooled = g.tanh(dense);
        Ok(EncoderNodes {
            text: lang,
            vision: visn,
            pooled,
        })
    }

    fn attention(
        &self,
        g: &mut Graph<'_, T>,
        prefix: &str,
        query_from: NodeId,
        key_from: NodeId,
        key_mask: &[bool],
        drop: &mut impl FnMut(&mut Graph<'_, T>, NodeId) -> NodeId,
    ) -> NodeId {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let q = g.linear(query_from, &format!("{prefix}.query.weight"), &format!("{prefix}.query.bias"));
        let k = g.linear(key_from, &format!("{prefix}.key.weight"), &format!("{prefix}.key.bias"));
        let v = g.linear(key_from, &format!("{prefix}.value.weight"), &format!("{prefix}.value.bias"));
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let ctx: Vec<NodeId> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul_bt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.masked_softmax(s, key_mask);
                g.matmul(a, vh)
            })
            .collect();
        let ctx = g.concat_cols(&ctx);
        let out = g.linear(ctx, &format!("{prefix}.output.weight"), &format!("{prefix}.output.bias"));
        let out = drop(g, out);
        let res = g.add(out, query_from);
        layer_norm(g, res, &format!("{prefix}.ln"))
    }

    /// Inference pass without dropout.
    pub fn encode(&self, x: &ExampleInput<'_, T>) -> Result<EncoderOutput<T>> {
        let mut g = Graph::new(&self.params);
        let nodes = self.encode_nodes::<rand_chacha::ChaCha8Rng>(&mut g, x, None)?;
        Ok(EncoderOutput {
            text: g.value(nodes.text).clone(),
            vision: g.value(nodes.vision).clone(),
            pooled: g.value(nodes.pooled).clone(),
        })
    }
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, prefix: &str) -> NodeId {
    let gamma = g.param_named(&format!("{prefix}.gamma"));
    let beta = g.param_named(&format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

fn ffn<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: NodeId,
    drop: &mut impl FnMut(&mut Graph<'_, T>, NodeId) -> NodeId,
) -> NodeId {
    let h = g.linear(x, &format!("{prefix}.inter.weight"), &format!("{prefix}.inter.bias"));
    let h = g.gelu(h);
    let o = g.linear(h, &format!("{prefix}.output.weight"), &format!("{prefix}.output.bias"));
    let o = drop(g, o);
    let res = g.add(o, x);
    layer_norm(g, res, &format!("{prefix}.ln"))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::ModelConfig;

    fn config(layers: usize) -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            num_heads: 2,
            num_xlayers: layers,
            ffn_size: 16,
            d_roi: 5,
            vocab_size: 10,
            n_attr: 3,
            max_text_len: 6,
            max_regions: 4,
            dropout: 0.5,
            init_std: 0.5,
        }
    }

    fn sample() -> (Vec<usize>, Matrix<f64>, Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (
            vec![1, 5, 6, 2],
            Matrix::randn(3, 5, 1.0, &mut rng),
            Matrix::from_rows(&[vec![0.0, 0.0, 0.5, 0.5], vec![0.2, 0.1, 0.9, 0.4], vec![0.5, 0.5, 1.0, 1.0]]),
        )
    }

    #[test]
    fn output_shapes() {
        let m = Model::<f64>::new(config(2), 0).unwrap();
        let (ids, f, b) = sample();
        let x = ExampleInput { text_ids: &ids, text_mask: &[true; 4], features: &f, boxes: &b, region_mask: &[true; 3] };
        let out = m.encode(&x).unwrap();
        assert_eq!(out.text.shape(), (4, 8));
        assert_eq!(out.vision.shape(), (3, 8));
        assert_eq!(out.pooled.shape(), (1, 8));
        assert!(out.pooled.as_slice().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_layers_return_embeddings() {
        let m = Model::<f64>::new(config(0), 0).unwrap();
        let (ids, f, b) = sample();
        let x = ExampleInput { text_ids: &ids, text_mask: &[true; 4], features: &f, boxes: &b, region_mask: &[true; 3] };
        let out = m.encode(&x).unwrap();
        let emb = m.params.by_name("embeddings.word.weight").unwrap();
        let pos = m.params.by_name("embeddings.position.weight").unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let row: Vec<f64> = emb.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            for (c, x) in row.iter().enumerate() {
                let want = (x - mean) / (var + 1e-5).sqrt();
                assert!((out.text[(i, c)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let m = Model::<f64>::new(config(1), 0).unwrap();
        let (ids, f, b) = sample();
        let bad_ids = [1, 99];
        let x = ExampleInput { text_ids: &bad_ids, text_mask: &[true; 2], features: &f, boxes: &b, region_mask: &[true; 3] };
        assert!(matches!(m.encode(&x), Err(Error::Shape(_))));
        let narrow = Matrix::zeros(3, 4);
        let x = ExampleInput { text_ids: &ids, text_mask: &[true; 4], features: &narrow, boxes: &b, region_mask: &[true; 3] };
        assert!(matches!(m.encode(&x), Err(Error::Shape(_))));
        let long = [1; 7];
        let x = ExampleInput { text_ids: &long, text_mask: &[true; 7], features: &f, boxes: &b, region_mask: &[true; 3] };
        assert!(matches!(m.encode(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = Model::<f64>::new(config(2), 1).unwrap();
        let (ids, f, b) = sample();
        let x = ExampleInput { text_ids: &ids, text_mask: &[true; 4], features: &f, boxes: &b, region_mask: &[true; 3] };
        let plain = m.encode(&x).unwrap();
        let padded_ids = [1, 5, 6, 2, 0, 0];
        let mask = [true, true, true, true, false, false];
        let x = ExampleInput { text_ids: &padded_ids, text_mask: &mask, features: &f, boxes: &b, region_mask: &[true; 3] };
        let padded = m.encode(&x).unwrap();
        assert!(plain.vision.max_abs_diff(&padded.vision) < 1e-10);
        assert!(plain.pooled.max_abs_diff(&padded.pooled) < 1e-10);
    }

    #[test]
    fn dropout_only_in_training() {
        let m = Model::<f64>::new(config(1), 2).unwrap();
        let (ids, f, b) = sample();
        let x = ExampleInput { text_ids: &ids, text_mask: &[true; 4], features: &f, boxes: &b, region_mask: &[true; 3] };
        let a = m.encode(&x).unwrap();
        let b2 = m.encode(&x).unwrap();
        assert_eq!(a, b2);
        let mut g = Graph::new(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = m.encode_nodes(&mut g, &x, Some(&mut rng)).unwrap();
        assert!(g.value(nodes.pooled).max_abs_diff(&a.pooled) > 1e-6);
    }
}
