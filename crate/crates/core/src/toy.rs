//! Desk-scale training run on a synthetic retrieval task.
//!
//! Every example is a random patch grid in which one patch carries a marker
//! channel. A fixed instruction is decoded into queries, the context token is
//! computed from them, and the loss is the mean squared error between that
//! token and a teacher projection of the marked patch. The context projector
//! always trains; the text decoder trains only when opened.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::decoder::{decode_queries_traced, DecoderError, DecoderParams, DecoderVars, LAYERS};
use crate::tensor::{seeded_rng, Graph, Tensor, TensorError, Var};
use crate::token::{context_token_traced, Projector, ProjectorVars, TokenError};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("steps must be at least 1")]
    ZeroSteps,
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyConfig {
    pub steps: usize,
    pub seed: u64,
    pub open_decoder: bool,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub examples: usize,
    pub grid_side: usize,
    pub channels: usize,
    pub llm_width: usize,
    pub vocab_size: usize,
    pub instruction_len: usize,
    pub marker: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            seed: 0,
            open_decoder: true,
            learning_rate: 0.02,
            warmup_ratio: 0.03,
            examples: 32,
            grid_side: 4,
            channels: 16,
            llm_width: 16,
            vocab_size: 8,
            instruction_len: 4,
            marker: 1.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.steps == 0 {
            return Err(ToyError::ZeroSteps);
        }
        let positive = [
            ("examples", self.examples),
            ("grid_side", self.grid_side),
            ("channels", self.channels),
            ("llm_width", self.llm_width),
            ("vocab_size", self.vocab_size),
            ("instruction_len", self.instruction_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ToyError::Config(format!("{name} must be positive")));
        }
        if self.channels < 2 {
            return Err(ToyError::Config("channels must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ToyError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(ToyError::Config("warmup_ratio must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to zero.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_ratio * self.steps as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub seed: u64,
    pub steps: usize,
    pub open_decoder: bool,
    pub learning_rate: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub converged: bool,
    pub decoder_unchanged: bool,
    /// Loss before each update; `final_loss` is measured after the last one.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub report: ToyReport,
    pub decoder_before: DecoderParams,
    pub decoder_after: DecoderParams,
    pub projector: Projector,
}

struct Example {
    embedding: Tensor,
    target: Tensor,
}

fn make_examples(cfg: &ToyConfig, rng: &mut impl Rng) -> Result<Vec<Example>, ToyError> {
    let patches = cfg.grid_side * cfg.grid_side;
    let (c, d) = (cfg.channels, cfg.llm_width);
    let teacher = Projector::init(c, d, rng)?;
    (0..cfg.examples)
        .map(|_| {
            let marked = rng.gen_range(0..patches);
            let mut data = vec![0f32; patches * c];
            for (p, row) in data.chunks_exact_mut(c).enumerate() {
                row[0] = if p == marked { cfg.marker as f32 } else { 0.0 };
                for v in &mut row[1..] {
                    *v = rng.gen_range(-1.0..=1.0);
                }
            }
            let embedding = Tensor::new(vec![patches, c], data)?;
            let target = teacher.apply(&embedding.select_rows(&[marked])?)?;
            Ok(Example { embedding, target })
        })
        .collect()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for j in 0..p.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g[j];
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g[j] * g[j];
                p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Leaves in order: projector weight, projector bias, token embedding, then
/// the decoder layers in [`crate::decoder::DecoderLayer::NAMES`] order.
fn flatten(proj: &Projector, dec: &DecoderParams) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut out = vec![
        (proj.weight.shape().to_vec(), to_f64(&proj.weight)),
        (proj.bias.shape().to_vec(), to_f64(&proj.bias)),
    ];
    for (_, t) in dec.named_tensors() {
        out.push((t.shape().to_vec(), to_f64(t)));
    }
    out
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], v: &[f64]) -> Result<Tensor, TensorError> {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect())
}

fn forward(
    g: &mut Graph,
    leaves: &[(Vec<usize>, Vec<f64>)],
    cfg: &ToyConfig,
    ids: &[usize],
    examples: &[Example],
) -> Result<(Var, Vec<Var>), ToyError> {
    let vars = leaves
        .iter()
        .enumerate()
        .map(|(i, (shape, value))| g.leaf_f64(shape.clone(), value.clone(), i < 2 || cfg.open_decoder))
        .collect::<Result<Vec<_>, _>>()?;
    let proj = ProjectorVars {
        weight: vars[0],
        bias: vars[1],
    };
    let dec = DecoderVars {
        token_embedding: vars[2],
        layers: (0..LAYERS).map(|l| std::array::from_fn(|k| vars[3 + l * 5 + k])).collect(),
    };
    let mut total = None;
    for ex in examples {
        let x = g.constant(&ex.embedding);
        let target = g.constant(&ex.target);
        let q = decode_queries_traced(g, ids, x, &dec)?;
        let token = context_token_traced(g, q, x, proj)?;
        let diff = g.sub(token, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.expect("at least one example");
    let loss = g.scale(total, 1.0 / (examples.len() * cfg.llm_width) as f64)?;
    Ok((loss, vars))
}

fn unflatten_decoder(leaves: &[(Vec<usize>, Vec<f64>)], template: &DecoderParams) -> Result<DecoderParams, TensorError> {
    let mut out = template.clone();
    for (t, (shape, v)) in out.tensors_mut().into_iter().zip(&leaves[2..]) {
        *t = to_tensor(shape, v)?;
    }
    Ok(out)
}

pub fn train_toy(cfg: &ToyConfig) -> Result<ToyOutcome, ToyError> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let examples = make_examples(cfg, &mut rng)?;
    let ids: Vec<usize> = (0..cfg.instruction_len).map(|i| i % cfg.vocab_size).collect();
    let decoder_before = DecoderParams::init(cfg.vocab_size, cfg.channels, rng.gen())?;
    let projector_init = Projector::init(cfg.channels, cfg.llm_width, &mut rng)?;

    let mut leaves = flatten(&projector_init, &decoder_before);
    let trainable: Vec<usize> = if cfg.open_decoder {
        (0..leaves.len()).collect()
    } else {
        vec![0, 1]
    };
    let mut adam = Adam::new(&trainable.iter().map(|&i| leaves[i].1.len()).collect::<Vec<_>>());

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let (loss, vars) = forward(&mut g, &leaves, cfg, &ids, &examples).map_err(|e| diverged(e, step))?;
        let value = g.value_f64(loss)[0];
        if !value.is_finite() {
            return Err(ToyError::Diverged { step });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let grad_refs: Vec<&[f64]> = trainable
            .iter()
            .map(|&i| grads.get(vars[i]).expect("trainable leaf"))
            .collect();
        let mut params: Vec<Vec<f64>> = trainable.iter().map(|&i| std::mem::take(&mut leaves[i].1)).collect();
        adam.step(&mut params, &grad_refs, cfg.learning_rate_at(step));
        if params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ToyError::Diverged { step });
        }
        for (&i, p) in trainable.iter().zip(params) {
            leaves[i].1 = p;
        }
    }

    let mut g = Graph::new();
    let (loss, _) = forward(&mut g, &leaves, cfg, &ids, &examples).map_err(|e| diverged(e, cfg.steps))?;
    let final_loss = g.value_f64(loss)[0];

    let decoder_after = if cfg.open_decoder {
        unflatten_decoder(&leaves, &decoder_before)?
    } else {
        decoder_before.clone()
    };
    let projector = Projector::new(to_tensor(&leaves[0].0, &leaves[0].1)?, to_tensor(&leaves[1].0, &leaves[1].1)?)?;
    let initial_loss = losses[0];
    let loss_ratio = final_loss / initial_loss;
    let report = ToyReport {
        seed: cfg.seed,
        steps: cfg.steps,
        open_decoder: cfg.open_decoder,
        learning_rate: cfg.learning_rate,
        initial_loss,
        final_loss,
        loss_ratio,
        converged: loss_ratio < 0.1,
        decoder_unchanged: decoder_after == decoder_before,
        losses,
    };
    Ok(ToyOutcome {
        report,
        decoder_before,
        decoder_after,
        projector,
    })
}

fn diverged(e: ToyError, step: usize) -> ToyError {
    let hit = match &e {
        ToyError::Tensor(t) => t.is_non_finite(),
        ToyError::Token(t) => t.is_non_finite(),
        ToyError::Decoder(t) => t.is_non_finite(),
        _ => false,
    };
    if hit {
        ToyError::Diverged { step }
    } else {
        e
    }
}
