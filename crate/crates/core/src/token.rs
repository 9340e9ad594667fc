//! Dual-token frame encoding.
//!
//! Each frame becomes one instruction-guided *context* token followed by `n`
//! *content* tokens:
//!
//! ```text
//! logits  = Q · Xᵀ / √C                       (M × N)
//! context = ctxproj( mean_M( softmax_N(logits) · X ) )
//! content = visproj( avg_pool(X as S×S×C, S/√n) flattened to n × C )
//! frame   = [context; content]                 ((n + 1) × D)
//! ```
//!
//! `n` counts tokens, not grid side: it must be a perfect square whose side
//! divides the patch-grid side `S`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{seeded_rng, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TokenError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("visual embedding must be a rank-2 N×C matrix, got {0:?}")]
    EmbeddingRank(Vec<usize>),
    #[error("patch count {0} is not a perfect square")]
    NotSquare(usize),
    #[error("text query must be a rank-2 M×C matrix, got {0:?}")]
    QueryRank(Vec<usize>),
    #[error("text query has no rows")]
    EmptyQuery,
    #[error("{what}: expected {expected} channels, got {actual}")]
    ChannelMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("content count {n} is not admissible for grid side {grid_side}; admissible: {admissible:?}")]
    Inadmissible {
        n: usize,
        grid_side: usize,
        admissible: Vec<usize>,
    },
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("frame {frame}: {detail}")]
    ShapeDrift { frame: usize, detail: String },
    #[error("frame {frame}: timestamp {timestamp_s} is not a finite non-negative number")]
    Timestamp { frame: usize, timestamp_s: f64 },
    #[error("query index {index} out of range for {queries} queries")]
    QueryIndex { index: usize, queries: usize },
    #[error("k = {k} exceeds the {patches} patches")]
    TopK { k: usize, patches: usize },
}

impl TokenError {
    pub fn is_non_finite(&self) -> bool {
        matches!(self, Self::Tensor(e) if e.is_non_finite())
    }
}

pub type Result<T, E = TokenError> = std::result::Result<T, E>;

/// Per-frame patch features `X_t` (N × C) on an S × S grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    values: Tensor,
    grid_side: usize,
}

fn exact_sqrt(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

impl VisualEmbedding {
    pub fn new(values: Tensor) -> Result<Self> {
        let [n, _c] = values.shape() else {
            return Err(TokenError::EmbeddingRank(values.shape().to_vec()));
        };
        let grid_side = exact_sqrt(*n).ok_or(TokenError::NotSquare(*n))?;
        Ok(Self { values, grid_side })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn patches(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Instruction-derived queries `Q_t` (M × C).
#[derive(Debug, Clone, PartialEq)]
pub struct TextQuery {
    values: Tensor,
}

impl TextQuery {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(TokenError::QueryRank(values.shape().to_vec()));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TokenError::EmptyQuery);
        }
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn queries(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Linear map from embedding channels into the LLM token width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub weight: Tensor,
    pub bias: Tensor,
    pub trainable: bool,
}

impl Projector {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [_, d] = weight.shape() else {
            return Err(TensorError::Rank {
                op: "projector",
                expected: 2,
                shape: weight.shape().to_vec(),
            }
            .into());
        };
        if bias.shape() != [*d] {
            return Err(TensorError::ShapeMismatch {
                op: "projector bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            weight,
            bias,
            trainable: true,
        })
    }

    /// Fan-in uniform initialisation, `U(-1/√C, 1/√C)` for weight and bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = Tensor::rand_uniform(vec![in_dim, out_dim], -bound, bound, rng)?;
        let bias = Tensor::rand_uniform(vec![out_dim], -bound, bound, rng)?;
        Self::new(weight, bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.affine(&self.weight, Some(&self.bias))?)
    }

    /// Records the parameters on a tape, trainable according to `self.trainable`.
    pub fn bind(&self, g: &mut Graph) -> ProjectorVars {
        let (weight, bias) = if self.trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.constant(&self.weight), g.constant(&self.bias))
        };
        ProjectorVars { weight, bias }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub weight: Var,
    pub bias: Var,
}

/// The two independent projectors: one for the context token, one for content.
#[derive(Debug, Clone, PartialEq)]
pub struct Projectors {
    pub context: Projector,
    pub content: Projector,
}

impl Projectors {
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        Ok(Self {
            context: Projector::init(in_dim, out_dim, &mut rng)?,
            content: Projector::init(in_dim, out_dim, &mut rng)?,
        })
    }
}

/// Scaled query/patch responses for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `Q·Xᵀ/√C`, before softmax (M × N).
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub weights: Tensor,
    pub grid_side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub context: Tensor,
    pub content: Tensor,
    pub timestamp_s: f64,
    pub n: usize,
}

impl FrameTokens {
    pub fn token_count(&self) -> usize {
        self.n + 1
    }

    /// Context row first, then the content rows.
    pub fn tokens(&self) -> Tensor {
        Tensor::concat_rows(&[&self.context, &self.content]).expect("context and content share the token width")
    }
}

fn check_channels(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(TokenError::ChannelMismatch { what, expected, actual })
    }
}

/// Pre-projection context embedding `E_t` (1 × C) with the attention it used.
pub fn context_embedding(q: &TextQuery, x: &VisualEmbedding) -> Result<(Tensor, AttentionRecord)> {
    let c = x.channels();
    check_channels("text query", c, q.channels())?;
    let logits = q
        .values()
        .matmul(&x.values().transpose()?)?
        .scale(1.0 / (c as f32).sqrt())?;
    let weights = logits.softmax(1)?;
    let embed = weights.matmul(x.values())?.mean(0)?.reshape(vec![1, c])?;
    Ok((
        embed,
        AttentionRecord {
            logits,
            weights,
            grid_side: x.grid_side(),
        },
    ))
}

pub fn context_token(q: &TextQuery, x: &VisualEmbedding, proj: &Projector) -> Result<(Tensor, AttentionRecord)> {
    check_channels("context projector", x.channels(), proj.in_dim())?;
    let (embed, record) = context_embedding(q, x)?;
    Ok((proj.apply(&embed)?, record))
}

/// Content counts realisable on an S × S grid, ascending.
pub fn admissible_counts(grid_side: usize) -> Vec<usize> {
    (1..=grid_side)
        .filter(|k| grid_side.is_multiple_of(*k))
        .map(|k| k * k)
        .collect()
}

/// Side of the pooled grid for `n` content tokens.
pub fn content_side(n: usize, grid_side: usize) -> Result<usize> {
    match exact_sqrt(n) {
        Some(side) if side > 0 && grid_side.is_multiple_of(side) => Ok(side),
        _ => Err(TokenError::Inadmissible {
            n,
            grid_side,
            admissible: admissible_counts(grid_side),
        }),
    }
}

/// Pre-projection content tokens (n × C), row-major over the pooled grid.
pub fn pooled_content(x: &VisualEmbedding, n: usize) -> Result<Tensor> {
    let s = x.grid_side();
    let side = content_side(n, s)?;
    let kernel = s / side;
    let c = x.channels();
    let grid = x.values().reshape(vec![s, s, c])?;
    Ok(grid.avg_pool2d(kernel, kernel)?.reshape(vec![n, c])?)
}

pub fn content_tokens(x: &VisualEmbedding, n: usize, proj: &Projector) -> Result<Tensor> {
    check_channels("content projector", x.channels(), proj.in_dim())?;
    proj.apply(&pooled_content(x, n)?)
}

pub fn encode_frame(
    q: &TextQuery,
    x: &VisualEmbedding,
    n: usize,
    projs: &Projectors,
    timestamp_s: f64,
) -> Result<FrameTokens> {
    if projs.context.out_dim() != projs.content.out_dim() {
        return Err(TokenError::ChannelMismatch {
            what: "content projector width",
            expected: projs.context.out_dim(),
            actual: projs.content.out_dim(),
        });
    }
    let (context, _) = context_token(q, x, &projs.context)?;
    let content = content_tokens(x, n, &projs.content)?;
    Ok(FrameTokens {
        context,
        content,
        timestamp_s,
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub query: TextQuery,
    pub embedding: VisualEmbedding,
    pub timestamp_s: f64,
}

/// Encodes every frame (in parallel) and returns them ordered by timestamp.
/// All frames must share N, M and C with the first one.
pub fn encode_sequence(frames: &[FrameInput], n: usize, projs: &Projectors) -> Result<Vec<FrameTokens>> {
    let first = frames.first().ok_or(TokenError::EmptySequence)?;
    let reference = (first.embedding.values().shape(), first.query.values().shape());
    for (i, f) in frames.iter().enumerate() {
        if !(f.timestamp_s.is_finite() && f.timestamp_s >= 0.0) {
            return Err(TokenError::Timestamp {
                frame: i,
                timestamp_s: f.timestamp_s,
            });
        }
        let shapes = (f.embedding.values().shape(), f.query.values().shape());
        if shapes != reference {
            return Err(TokenError::ShapeDrift {
                frame: i,
                detail: format!(
                    "embedding {:?} / query {:?} differ from frame 0 ({:?} / {:?})",
                    shapes.0, shapes.1, reference.0, reference.1
                ),
            });
        }
    }
    let mut out = frames
        .par_iter()
        .map(|f| encode_frame(&f.query, &f.embedding, n, projs, f.timestamp_s))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    Ok(out)
}

/// The `k` strongest patches for one query, by min-max normalised logit.
/// Ties go to the lower patch index. A constant row normalises to zeros.
pub fn top_responses(rec: &AttentionRecord, query_index: usize, k: usize) -> Result<Vec<(usize, f32)>> {
    let (m, n) = (rec.logits.shape()[0], rec.logits.shape()[1]);
    if query_index >= m {
        return Err(TokenError::QueryIndex {
            index: query_index,
            queries: m,
        });
    }
    if k > n {
        return Err(TokenError::TopK { k, patches: n });
    }
    let row = rec.logits.row(query_index);
    let (lo, hi) = row
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut scored: Vec<(usize, f32)> = row
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, if span > 0.0 { (v - lo) / span } else { 0.0 }))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub patch: usize,
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub query_index: usize,
    pub k: usize,
    pub entries: Vec<HeatmapEntry>,
}

pub fn heatmap(rec: &AttentionRecord, query_index: usize, k: usize) -> Result<Heatmap> {
    let entries = top_responses(rec, query_index, k)?
        .into_iter()
        .map(|(patch, score)| HeatmapEntry {
            patch,
            row: patch / rec.grid_side,
            col: patch % rec.grid_side,
            score,
        })
        .collect();
    Ok(Heatmap { query_index, k, entries })
}

/// Context token recorded on a tape.
pub fn context_token_traced(g: &mut Graph, q: Var, x: Var, proj: ProjectorVars) -> Result<Var> {
    let c = *g.shape(x).last().unwrap_or(&0);
    check_channels("text query", c, *g.shape(q).last().unwrap_or(&0))?;
    let xt = g.transpose(x)?;
    let logits = g.matmul(q, xt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt())?;
    let weights = g.softmax(logits, 1)?;
    let mixed = g.matmul(weights, x)?;
    let embed = g.mean(mixed, 0)?;
    let embed = g.reshape(embed, vec![1, c])?;
    Ok(g.affine(embed, proj.weight, Some(proj.bias))?)
}

pub fn content_tokens_traced(g: &mut Graph, x: Var, grid_side: usize, n: usize, proj: ProjectorVars) -> Result<Var> {
    let side = content_side(n, grid_side)?;
    let kernel = grid_side / side;
    let c = g.shape(x)[1];
    let grid = g.reshape(x, vec![grid_side, grid_side, c])?;
    let pooled = g.avg_pool2d(grid, kernel, kernel)?;
    let flat = g.reshape(pooled, vec![n, c])?;
    Ok(g.affine(flat, proj.weight, Some(proj.bias))?)
}

/// `(n + 1) × D` frame tokens recorded on a tape.
pub fn encode_frame_traced(
    g: &mut Graph,
    q: Var,
    x: Var,
    grid_side: usize,
    n: usize,
    context: ProjectorVars,
    content: ProjectorVars,
) -> Result<Var> {
    let ctx = context_token_traced(g, q, x, context)?;
    let vis = content_tokens_traced(g, x, grid_side, n, content)?;
    Ok(g.concat_rows(&[ctx, vis])?)
}
