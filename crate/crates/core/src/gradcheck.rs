//! Central finite-difference checks of the tape against its own forward pass.
//!
//! Each suite builds a graph from `f64` leaves, reduces the output to a scalar
//! with a fixed random weighting, and compares every gradient entry with
//! `(f(v + h) - f(v - h)) / 2h`. The error of one entry is
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{decode_queries_traced, DecoderError, DecoderVars, LAYERS};
use crate::tensor::{seeded_rng, Graph, TensorError, Var};
use crate::token::{context_token_traced, encode_frame_traced, ProjectorVars, TokenError};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

impl GradCheckError {
    pub fn is_non_finite(&self) -> bool {
        match self {
            Self::Tensor(e) => e.is_non_finite(),
            Self::Token(e) => e.is_non_finite(),
            Self::Decoder(e) => e.is_non_finite(),
        }
    }
}

type Result<T, E = GradCheckError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizes {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub sizes: Sizes,
    /// Perturbs the matmul backward rule so the report must fail.
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub suite: String,
    pub group: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub sizes: Sizes,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// A named leaf with its initial value.
pub struct Leaf {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Leaf {
    pub fn uniform(name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: (0..len).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks `build` with respect to every leaf. `build` receives the leaves in
/// order and returns any output node.
pub fn check<F>(suite: &str, leaves: &[Leaf], inject_fault: bool, seed: u64, build: F) -> Result<Vec<GroupResult>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Vec<f64>> = None;
    let mut rng = seeded_rng(seed);
    let mut forward = |values: &[Vec<f64>], fault: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        if fault {
            g.corrupt_backward();
        }
        let vars = leaves
            .iter()
            .zip(values)
            .map(|(l, v)| g.leaf_f64(l.shape.clone(), v.clone(), true))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = build(&mut g, &vars)?;
        let len = g.value_f64(out).len();
        let w = weights.get_or_insert_with(|| (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        let w = g.leaf_f64(g.shape(out).to_vec(), w.clone(), false)?;
        let weighted = g.mul(out, w)?;
        let loss = g.sum(weighted)?;
        Ok((g, vars, loss))
    };

    let mut values: Vec<Vec<f64>> = leaves.iter().map(|l| l.value.clone()).collect();
    let (g, vars, loss) = forward(&values, inject_fault)?;
    let grads = g.backward(loss)?;

    let mut results = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).expect("leaf is trainable").to_vec();
        let mut worst = 0.0f64;
        for j in 0..leaf.value.len() {
            let orig = values[li][j];
            values[li][j] = orig + STEP;
            let (gp, _, lp) = forward(&values, false)?;
            values[li][j] = orig - STEP;
            let (gm, _, lm) = forward(&values, false)?;
            values[li][j] = orig;
            let numeric = (gp.value_f64(lp)[0] - gm.value_f64(lm)[0]) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
        results.push(GroupResult {
            suite: suite.to_string(),
            group: leaf.name.clone(),
            params: leaf.value.len(),
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(results)
}

struct Dims {
    m: usize,
    grid_side: usize,
    c: usize,
    d: usize,
    n: usize,
    vocab: usize,
}

fn dims(sizes: Sizes) -> Dims {
    match sizes {
        Sizes::Small => Dims {
            m: 3,
            grid_side: 4,
            c: 6,
            d: 5,
            n: 4,
            vocab: 7,
        },
        Sizes::Large => Dims {
            m: 8,
            grid_side: 8,
            c: 16,
            d: 12,
            n: 16,
            vocab: 24,
        },
    }
}

/// Every differentiable tensor operation on its own.
pub fn tensor_suite(opts: &GradCheckOptions) -> Result<Vec<GroupResult>> {
    let dm = dims(opts.sizes);
    let (p, q, r) = (dm.m, dm.c, dm.d);
    let s = dm.grid_side;
    let mut rng = seeded_rng(opts.seed);
    let mut out = Vec::new();
    let mut run = |name: &str, leaves: Vec<Leaf>, build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let seed = opts.seed.wrapping_add(out.len() as u64);
        let mut res = check("tensor", &leaves, opts.inject_fault, seed, build)?;
        for g in &mut res {
            g.group = format!("{name}.{}", g.group);
        }
        out.extend(res);
        Ok(())
    };
    let mut u = |name: &str, shape: &[usize]| Leaf::uniform(name, shape, 1.0, &mut rng);

    run("matmul", vec![u("a", &[p, q]), u("b", &[q, r])], &|g, v| Ok(g.matmul(v[0], v[1])?))?;
    run("transpose", vec![u("a", &[p, q])], &|g, v| Ok(g.transpose(v[0])?))?;
    run("softmax_rows", vec![u("a", &[p, q])], &|g, v| Ok(g.softmax(v[0], 1)?))?;
    run("softmax_cols", vec![u("a", &[p, q])], &|g, v| Ok(g.softmax(v[0], 0)?))?;
    run("mean_rows", vec![u("a", &[p, q])], &|g, v| Ok(g.mean(v[0], 0)?))?;
    run("mean_cols", vec![u("a", &[p, q])], &|g, v| Ok(g.mean(v[0], 1)?))?;
    run("avg_pool2d", vec![u("a", &[s, s, 3])], &|g, v| Ok(g.avg_pool2d(v[0], 2, 2)?))?;
    run("affine", vec![u("x", &[p, q]), u("w", &[q, r]), u("b", &[r])], &|g, v| {
        Ok(g.affine(v[0], v[1], Some(v[2]))?)
    })?;
    run("add", vec![u("a", &[p, q]), u("b", &[p, q])], &|g, v| Ok(g.add(v[0], v[1])?))?;
    run("sub", vec![u("a", &[p, q]), u("b", &[p, q])], &|g, v| Ok(g.sub(v[0], v[1])?))?;
    run("mul", vec![u("a", &[p, q]), u("b", &[p, q])], &|g, v| Ok(g.mul(v[0], v[1])?))?;
    run("scale", vec![u("a", &[p, q])], &|g, v| Ok(g.scale(v[0], -0.7)?))?;
    run("tanh", vec![u("a", &[p, q])], &|g, v| Ok(g.tanh(v[0])?))?;
    run("reshape", vec![u("a", &[p, q])], &|g, v| Ok(g.reshape(v[0], vec![q, p])?))?;
    run("select_rows", vec![u("a", &[p, q])], &|g, v| {
        let idx: Vec<usize> = (0..p + 2).map(|i| (i * 2) % p).collect();
        Ok(g.select_rows(v[0], &idx)?)
    })?;
    run("concat_rows", vec![u("a", &[p, q]), u("b", &[2, q])], &|g, v| {
        Ok(g.concat_rows(&[v[0], v[1], v[0]])?)
    })?;
    run("shared_input", vec![u("a", &[p, p])], &|g, v| {
        let sq = g.matmul(v[0], v[0])?;
        Ok(g.mul(sq, v[0])?)
    })?;
    Ok(out)
}

/// The full frame encoding: query, embedding, and both projectors.
pub fn token_suite(opts: &GradCheckOptions) -> Result<Vec<GroupResult>> {
    let dm = dims(opts.sizes);
    let patches = dm.grid_side * dm.grid_side;
    let mut rng = seeded_rng(opts.seed ^ 0x746f_6b65);
    let bound = 1.0 / (dm.c as f64).sqrt();
    let leaves = vec![
        Leaf::uniform("query", &[dm.m, dm.c], 1.0, &mut rng),
        Leaf::uniform("embedding", &[patches, dm.c], 1.0, &mut rng),
        Leaf::uniform("context_proj.weight", &[dm.c, dm.d], bound, &mut rng),
        Leaf::uniform("context_proj.bias", &[dm.d], bound, &mut rng),
        Leaf::uniform("content_proj.weight", &[dm.c, dm.d], bound, &mut rng),
        Leaf::uniform("content_proj.bias", &[dm.d], bound, &mut rng),
    ];
    check("encode_frame", &leaves, opts.inject_fault, opts.seed, |g, v| {
        let ctx = ProjectorVars {
            weight: v[2],
            bias: v[3],
        };
        let vis = ProjectorVars {
            weight: v[4],
            bias: v[5],
        };
        Ok(encode_frame_traced(g, v[0], v[1], dm.grid_side, dm.n, ctx, vis)?)
    })
}

/// Decoder queries feeding the context token.
pub fn decoder_suite(opts: &GradCheckOptions) -> Result<Vec<GroupResult>> {
    let dm = dims(opts.sizes);
    let patches = dm.grid_side * dm.grid_side;
    let mut rng = seeded_rng(opts.seed ^ 0x6465_636f);
    let ids: Vec<usize> = (0..dm.m).map(|_| rng.gen_range(0..dm.vocab)).collect();
    let wb = 1.0 / (dm.c as f64).sqrt();
    let mut leaves = vec![
        Leaf::uniform("token_embedding", &[dm.vocab, dm.c], 1.0, &mut rng),
        Leaf::uniform("embedding", &[patches, dm.c], 1.0, &mut rng),
        Leaf::uniform("context_proj.weight", &[dm.c, dm.d], wb, &mut rng),
        Leaf::uniform("context_proj.bias", &[dm.d], wb, &mut rng),
    ];
    for l in 0..LAYERS {
        for name in crate::decoder::DecoderLayer::NAMES {
            leaves.push(Leaf::uniform(&format!("layer{l}.{name}"), &[dm.c, dm.c], wb, &mut rng));
        }
    }
    check("decode_queries", &leaves, opts.inject_fault, opts.seed, |g, v| {
        let vars = DecoderVars {
            token_embedding: v[0],
            layers: (0..LAYERS).map(|l| std::array::from_fn(|k| v[4 + l * 5 + k])).collect(),
        };
        let q = decode_queries_traced(g, &ids, v[1], &vars)?;
        let proj = ProjectorVars {
            weight: v[2],
            bias: v[3],
        };
        Ok(context_token_traced(g, q, v[1], proj)?)
    })
}

pub fn run(opts: &GradCheckOptions) -> Result<GradReport> {
    let mut groups = tensor_suite(opts)?;
    groups.extend(token_suite(opts)?);
    groups.extend(decoder_suite(opts)?);
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        seed: opts.seed,
        sizes: opts.sizes,
        step: STEP,
        tolerance: TOLERANCE,
        passed: groups.iter().all(|g| g.passed),
        max_rel_error,
        groups,
    })
}
