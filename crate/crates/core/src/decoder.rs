//! Lightweight cross-modality text decoder producing the text query `Q_t`.
//!
//! Two randomly initialised layers, single head, hidden width `C`. With the
//! running states `h` (M × C), patches `x` (N × C) and `s = 1/√C` each layer is
//!
//! ```text
//! h += softmax(h·hᵀ·s) · h · W_self
//! h += softmax((h·W_q)·(x·W_k)ᵀ·s) · (x·W_v)
//! h += tanh(h · W_ff)
//! ```
//!
//! starting from the token embeddings of the instruction.

use std::path::Path;

use thiserror::Error;

use crate::store::{read_tensor, StoreError};
use crate::tensor::{seeded_rng, Graph, Tensor, TensorError, Var};
use crate::token::{TextQuery, TokenError, VisualEmbedding};

pub const LAYERS: usize = 2;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("instruction has no tokens")]
    EmptyInstruction,
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },
    #[error("{what}: expected {expected} channels, got {actual}")]
    ChannelMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("decoder must have exactly {LAYERS} layers, got {0}")]
    LayerCount(usize),
    #[error("{name}: expected shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("stored query must be rank 2, got shape {0:?}")]
    QueryRank(Vec<usize>),
}

impl DecoderError {
    pub fn is_non_finite(&self) -> bool {
        match self {
            Self::Tensor(e) => e.is_non_finite(),
            Self::Token(e) => e.is_non_finite(),
            _ => false,
        }
    }
}

pub type Result<T, E = DecoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTokens {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl InstructionTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(DecoderError::EmptyInstruction);
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(DecoderError::TokenOutOfVocab { id, vocab_size });
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_proj: Tensor,
    pub cross_query: Tensor,
    pub cross_key: Tensor,
    pub cross_value: Tensor,
    pub feed_forward: Tensor,
}

impl DecoderLayer {
    pub const NAMES: [&'static str; 5] = ["self_proj", "cross_query", "cross_key", "cross_value", "feed_forward"];

    fn weights(&self) -> [&Tensor; 5] {
        [
            &self.self_proj,
            &self.cross_query,
            &self.cross_key,
            &self.cross_value,
            &self.feed_forward,
        ]
    }

    fn weights_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.self_proj,
            &mut self.cross_query,
            &mut self.cross_key,
            &mut self.cross_value,
            &mut self.feed_forward,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub token_embedding: Tensor,
    pub layers: Vec<DecoderLayer>,
}

impl DecoderParams {
    /// `N(0, 0.02)` initialisation of every weight.
    pub fn init(vocab_size: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut w = |shape: Vec<usize>| Tensor::rand_normal(shape, 0.0, 0.02, &mut rng);
        let token_embedding = w(vec![vocab_size, channels])?;
        let mut layers = Vec::with_capacity(LAYERS);
        for _ in 0..LAYERS {
            layers.push(DecoderLayer {
                self_proj: w(vec![channels, channels])?,
                cross_query: w(vec![channels, channels])?,
                cross_key: w(vec![channels, channels])?,
                cross_value: w(vec![channels, channels])?,
                feed_forward: w(vec![channels, channels])?,
            });
        }
        Ok(Self { token_embedding, layers })
    }

    /// Identity token embeddings (vocabulary = channels) and all-zero layers.
    pub fn identity_embedding(channels: usize) -> Result<Self> {
        let z = || Tensor::zeros(vec![channels, channels]);
        let layers = (0..LAYERS)
            .map(|_| {
                Ok(DecoderLayer {
                    self_proj: z()?,
                    cross_query: z()?,
                    cross_key: z()?,
                    cross_value: z()?,
                    feed_forward: z()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding: Tensor::eye(channels)?,
            layers,
        })
    }

    pub fn channels(&self) -> usize {
        self.token_embedding.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != LAYERS {
            return Err(DecoderError::LayerCount(self.layers.len()));
        }
        if self.token_embedding.rank() != 2 {
            return Err(DecoderError::ParamShape {
                name: "token_embedding".into(),
                expected: vec![self.vocab_size(), 0],
                actual: self.token_embedding.shape().to_vec(),
            });
        }
        let c = self.channels();
        for (name, t) in self.named_tensors().into_iter().skip(1) {
            if t.shape() != [c, c] {
                return Err(DecoderError::ParamShape {
                    name,
                    expected: vec![c, c],
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Every parameter tensor with a stable name, embedding first.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in DecoderLayer::NAMES.iter().zip(layer.weights()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.extend(layer.weights_mut());
        }
        out
    }

    /// Records all parameters on a tape.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let token_embedding = leaf(&self.token_embedding);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let [a, b, c, d, e] = l.weights();
                [leaf(a), leaf(b), leaf(c), leaf(d), leaf(e)]
            })
            .collect();
        DecoderVars { token_embedding, layers }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub token_embedding: Var,
    /// Per layer, in [`DecoderLayer::NAMES`] order.
    pub layers: Vec<[Var; 5]>,
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out
    }
}

fn check(instr: &InstructionTokens, x: &VisualEmbedding, params: &DecoderParams) -> Result<()> {
    params.validate()?;
    if x.channels() != params.channels() {
        return Err(DecoderError::ChannelMismatch {
            what: "visual embedding",
            expected: params.channels(),
            actual: x.channels(),
        });
    }
    if let Some(&id) = instr.ids().iter().find(|&&id| id >= params.vocab_size()) {
        return Err(DecoderError::TokenOutOfVocab {
            id,
            vocab_size: params.vocab_size(),
        });
    }
    Ok(())
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f32) -> Result<Tensor> {
    let w = q.matmul(&k.transpose()?)?.scale(scale)?.softmax(1)?;
    Ok(w.matmul(v)?)
}

/// Runs the decoder; the output has one query row per instruction token.
pub fn decode_queries(instr: &InstructionTokens, x: &VisualEmbedding, params: &DecoderParams) -> Result<TextQuery> {
    check(instr, x, params)?;
    let s = 1.0 / (params.channels() as f32).sqrt();
    let xv = x.values();
    let mut h = params.token_embedding.select_rows(instr.ids())?;
    for layer in &params.layers {
        let self_branch = attend(&h, &h, &h, s)?.matmul(&layer.self_proj)?;
        h = h.add(&self_branch)?;
        let q = h.matmul(&layer.cross_query)?;
        let k = xv.matmul(&layer.cross_key)?;
        let v = xv.matmul(&layer.cross_value)?;
        h = h.add(&attend(&q, &k, &v, s)?)?;
        h = h.add(&h.matmul(&layer.feed_forward)?.tanh())?;
    }
    Ok(TextQuery::new(h)?)
}

fn attend_traced(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale)?;
    let w = g.softmax(logits, 1)?;
    Ok(g.matmul(w, v)?)
}

/// Tape version of [`decode_queries`]; returns the M × C query states.
pub fn decode_queries_traced(g: &mut Graph, ids: &[usize], x: Var, vars: &DecoderVars) -> Result<Var> {
    if ids.is_empty() {
        return Err(DecoderError::EmptyInstruction);
    }
    let c = g.shape(vars.token_embedding)[1];
    let s = 1.0 / (c as f64).sqrt();
    let mut h = g.select_rows(vars.token_embedding, ids)?;
    for &[w_self, w_q, w_k, w_v, w_ff] in &vars.layers {
        let a = attend_traced(g, h, h, h, s)?;
        let a = g.matmul(a, w_self)?;
        h = g.add(h, a)?;
        let q = g.matmul(h, w_q)?;
        let k = g.matmul(x, w_k)?;
        let v = g.matmul(x, w_v)?;
        let a = attend_traced(g, q, k, v, s)?;
        h = g.add(h, a)?;
        let f = g.matmul(h, w_ff)?;
        let f = g.tanh(f)?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// Loads precomputed queries (for example from an external query former).
pub fn load_queries(path: impl AsRef<Path>, channels: Option<usize>) -> Result<TextQuery> {
    let t = read_tensor(path)?;
    if t.rank() != 2 {
        return Err(DecoderError::QueryRank(t.shape().to_vec()));
    }
    if let Some(c) = channels {
        if t.shape()[1] != c {
            return Err(DecoderError::ChannelMismatch {
                what: "stored query",
                expected: c,
                actual: t.shape()[1],
            });
        }
    }
    Ok(TextQuery::new(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::write_tensor;

    fn embedding(n: usize, c: usize, seed: u64) -> VisualEmbedding {
        VisualEmbedding::new(Tensor::rand_uniform(vec![n, c], -1.0, 1.0, &mut seeded_rng(seed)).unwrap()).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let c = t.shape()[1];
        t.data().chunks(c).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn looped_attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qr| {
                let logits: Vec<f64> = k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * s).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let mut out = vec![0.0; v[0].len()];
                for (l, vr) in logits.iter().zip(v) {
                    let w = (l - max).exp() / z;
                    for (o, vv) in out.iter_mut().zip(vr) {
                        *o += w * vv;
                    }
                }
                out
            })
            .collect()
    }

    fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
        for (ar, br) in a.iter_mut().zip(b) {
            for (x, y) in ar.iter_mut().zip(br) {
                *x += y;
            }
        }
    }

    fn looped_decoder(ids: &[usize], x: &VisualEmbedding, p: &DecoderParams) -> Vec<Vec<f64>> {
        let s = 1.0 / (p.channels() as f64).sqrt();
        let emb = rows(&p.token_embedding);
        let xr = rows(x.values());
        let mut h: Vec<Vec<f64>> = ids.iter().map(|&i| emb[i].clone()).collect();
        for l in &p.layers {
            let a = mm(&looped_attend(&h, &h, &h, s), &rows(&l.self_proj));
            add(&mut h, &a);
            let q = mm(&h, &rows(&l.cross_query));
            let k = mm(&xr, &rows(&l.cross_key));
            let v = mm(&xr, &rows(&l.cross_value));
            let a = looped_attend(&q, &k, &v, s);
            add(&mut h, &a);
            let f: Vec<Vec<f64>> = mm(&h, &rows(&l.feed_forward))
                .into_iter()
                .map(|r| r.into_iter().map(f64::tanh).collect())
                .collect();
            add(&mut h, &f);
        }
        h
    }

    #[test]
    fn identity_embedding_passes_through() {
        let p = DecoderParams::identity_embedding(6).unwrap();
        let instr = InstructionTokens::new(vec![3, 0, 5], 6).unwrap();
        let q = decode_queries(&instr, &embedding(9, 6, 1), &p).unwrap();
        // zero branches leave the one-hot embedding rows untouched
        let expect = Tensor::eye(6).unwrap().select_rows(&[3, 0, 5]).unwrap();
        assert_eq!(q.values(), &expect);
    }

    #[test]
    fn one_token_one_query() {
        let p = DecoderParams::init(10, 4, 3).unwrap();
        let q = decode_queries(&InstructionTokens::new(vec![7], 10).unwrap(), &embedding(4, 4, 2), &p).unwrap();
        assert_eq!(q.values().shape(), &[1, 4]);
    }

    #[test]
    fn matches_looped_oracle() {
        // larger weights than the default init so every branch matters
        let mut p = DecoderParams::init(12, 8, 5).unwrap();
        for t in p.tensors_mut() {
            *t = t.scale(20.0).unwrap();
        }
        let ids = vec![1, 11, 4, 4, 0];
        let x = embedding(16, 8, 6);
        let got = decode_queries(&InstructionTokens::new(ids.clone(), 12).unwrap(), &x, &p).unwrap();
        let expect = looped_decoder(&ids, &x, &p);
        for (g, e) in got.values().data().iter().zip(expect.concat()) {
            assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
        }

        let mut g = Graph::new();
        let xv = g.constant(x.values());
        let vars = p.bind(&mut g, true);
        let out = decode_queries_traced(&mut g, &ids, xv, &vars).unwrap();
        assert!(g.value(out).max_abs_diff(got.values()) < 1e-6);
    }

    #[test]
    fn deterministic_and_sensitive_to_patches() {
        let mut p = DecoderParams::init(8, 4, 9).unwrap();
        for t in p.tensors_mut() {
            *t = t.scale(25.0).unwrap();
        }
        let instr = InstructionTokens::new(vec![1, 2], 8).unwrap();
        let x = embedding(9, 4, 10);
        let a = decode_queries(&instr, &x, &p).unwrap();
        let b = decode_queries(&instr, &x, &p).unwrap();
        let bits = |q: &TextQuery| q.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));

        let mut data = x.values().data().to_vec();
        data[4] += 0.5;
        let x2 = VisualEmbedding::new(Tensor::new(vec![9, 4], data).unwrap()).unwrap();
        let c = decode_queries(&instr, &x2, &p).unwrap();
        assert!(c.values().max_abs_diff(a.values()) > 0.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(InstructionTokens::new(vec![], 4), Err(DecoderError::EmptyInstruction)));
        assert!(matches!(
            InstructionTokens::new(vec![4], 4),
            Err(DecoderError::TokenOutOfVocab { id: 4, vocab_size: 4 })
        ));
        let p = DecoderParams::init(4, 4, 0).unwrap();
        assert!(matches!(
            decode_queries(&InstructionTokens::new(vec![0], 4).unwrap(), &embedding(4, 3, 0), &p),
            Err(DecoderError::ChannelMismatch { .. })
        ));
        let mut short = p.clone();
        short.layers.pop();
        assert!(matches!(
            decode_queries(&InstructionTokens::new(vec![0], 4).unwrap(), &embedding(4, 4, 0), &short),
            Err(DecoderError::LayerCount(1))
        ));
    }

    #[test]
    fn load_queries_round_trip_and_rank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.lvid");
        let t = Tensor::rand_normal(vec![32, 8], 0.0, 1.0, &mut seeded_rng(1)).unwrap();
        write_tensor(&t, &path).unwrap();
        let q = load_queries(&path, Some(8)).unwrap();
        assert_eq!(q.queries(), 32);
        assert_eq!(q.values(), &t);
        assert!(matches!(load_queries(&path, Some(4)), Err(DecoderError::ChannelMismatch { .. })));

        write_tensor(&Tensor::zeros(vec![2, 4, 8]).unwrap(), &path).unwrap();
        assert!(matches!(load_queries(&path, None), Err(DecoderError::QueryRank(_))));
    }
}
