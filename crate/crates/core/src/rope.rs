//! Rotary position encoding with linear position interpolation.
//!
//! Lane pairs `(v[2i], v[2i+1])` are rotated by `θ_i · p`, with
//! `θ_i = base^(-2i/d)`. Interpolation multiplies the position by
//! `original_max_pos / target_max_pos`, so a model trained on 4K positions
//! sees every position of a 64K sequence inside its trained range.
//! Angles are evaluated in `f64`.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RopeError {
    #[error("head_dim must be even and positive, got {0}")]
    OddDim(usize),
    #[error("vector length {actual} does not match head_dim {expected}")]
    Length { expected: usize, actual: usize },
    #[error("position {position} exceeds target_max_pos {max}")]
    Position { position: usize, max: usize },
    #[error("invalid rope config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub original_max_pos: usize,
    pub target_max_pos: usize,
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;
    pub const DEFAULT_ORIGINAL: usize = 4096;
    pub const DEFAULT_TARGET: usize = 65536;

    /// 4K → 64K extension with the standard base.
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            base: Self::DEFAULT_BASE,
            original_max_pos: Self::DEFAULT_ORIGINAL,
            target_max_pos: Self::DEFAULT_TARGET,
        }
    }

    pub fn validate(&self) -> Result<(), RopeError> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(RopeError::OddDim(self.head_dim));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(RopeError::Config(format!("base must be positive, got {}", self.base)));
        }
        if self.original_max_pos == 0 || self.target_max_pos < self.original_max_pos {
            return Err(RopeError::Config(format!(
                "need 0 < original_max_pos ({}) <= target_max_pos ({})",
                self.original_max_pos, self.target_max_pos
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.original_max_pos as f64 / self.target_max_pos as f64
    }

    /// Position actually fed to the rotation.
    pub fn effective_position(&self, position: usize, interpolate: bool) -> f64 {
        if interpolate {
            position as f64 * self.scale()
        } else {
            position as f64
        }
    }

    fn frequency(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }
}

fn rotate(v: &[f64], position: usize, cfg: &RopeConfig, interpolate: bool) -> Result<Vec<f64>, RopeError> {
    cfg.validate()?;
    if v.len() != cfg.head_dim {
        return Err(RopeError::Length {
            expected: cfg.head_dim,
            actual: v.len(),
        });
    }
    if position > cfg.target_max_pos {
        return Err(RopeError::Position {
            position,
            max: cfg.target_max_pos,
        });
    }
    let p = cfg.effective_position(position, interpolate);
    let mut out = vec![0.0; v.len()];
    for (i, (src, dst)) in v.chunks_exact(2).zip(out.chunks_exact_mut(2)).enumerate() {
        let (sin, cos) = (cfg.frequency(i) * p).sin_cos();
        dst[0] = src[0] * cos - src[1] * sin;
        dst[1] = src[0] * sin + src[1] * cos;
    }
    Ok(out)
}

fn lanes(v: &Tensor, cfg: &RopeConfig) -> Result<Vec<f64>, RopeError> {
    if v.rank() != 1 {
        return Err(RopeError::Length {
            expected: cfg.head_dim,
            actual: v.numel(),
        });
    }
    Ok(v.data().iter().map(|&x| x as f64).collect())
}

pub fn rope_apply(v: &Tensor, position: usize, cfg: &RopeConfig, interpolate: bool) -> Result<Tensor, RopeError> {
    let out = rotate(&lanes(v, cfg)?, position, cfg, interpolate)?;
    Ok(Tensor::new(vec![cfg.head_dim], out.into_iter().map(|x| x as f32).collect())?)
}

/// Dot product of the rotated query and key, computed in `f64`.
pub fn rope_inner(
    q: &Tensor,
    k: &Tensor,
    pos_q: usize,
    pos_k: usize,
    cfg: &RopeConfig,
    interpolate: bool,
) -> Result<f64, RopeError> {
    let rq = rotate(&lanes(q, cfg)?, pos_q, cfg, interpolate)?;
    let rk = rotate(&lanes(k, cfg)?, pos_k, cfg, interpolate)?;
    Ok(rq.iter().zip(&rk).map(|(a, b)| a * b).sum())
}
