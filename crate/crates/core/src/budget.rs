//! Token-budget arithmetic for packing long videos into a fixed context window.
//!
//! All token counts are integers; the only floating step is the single
//! `floor(duration * fps)` that turns seconds into frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::admissible_counts;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BudgetError {
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("fps must be positive and finite, got {0}")]
    Fps(f64),
    #[error("prompt overhead {overhead} + answer reserve {reserve} must be below the context window {window}")]
    Reserved { overhead: u64, reserve: u64, window: u64 },
    #[error("per-frame token cost is zero")]
    ZeroFrameCost,
}

/// Training stages and the limits attached to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Alignment,
    Instruction,
    LongVideo,
}

impl TrainingStage {
    pub const ALL: [TrainingStage; 3] = [Self::Alignment, Self::Instruction, Self::LongVideo];

    /// Maximum sequence length used in the stage.
    pub fn max_tokens(self) -> u64 {
        match self {
            Self::Alignment | Self::Instruction => 2048,
            Self::LongVideo => 65536,
        }
    }

    /// Whether the text decoder is optimised in this stage.
    pub fn text_decoder_open(self) -> bool {
        matches!(self, Self::Instruction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub fps: f64,
    /// Visual tokens per frame, i.e. `n + 1`.
    pub tokens_per_frame: u64,
    pub subtitle_tokens_per_frame: u64,
    pub prompt_overhead_tokens: u64,
    pub context_window: u64,
    pub answer_reserve_tokens: u64,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            fps: 1.0,
            tokens_per_frame: 2,
            subtitle_tokens_per_frame: 0,
            prompt_overhead_tokens: 0,
            context_window: TrainingStage::LongVideo.max_tokens(),
            answer_reserve_tokens: 0,
        }
    }
}

impl TokenBudget {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(BudgetError::Fps(self.fps));
        }
        if self.prompt_overhead_tokens + self.answer_reserve_tokens >= self.context_window {
            return Err(BudgetError::Reserved {
                overhead: self.prompt_overhead_tokens,
                reserve: self.answer_reserve_tokens,
                window: self.context_window,
            });
        }
        Ok(())
    }

    pub fn per_frame_cost(&self) -> u64 {
        self.tokens_per_frame + self.subtitle_tokens_per_frame
    }

    /// Tokens left for frames once overhead and reserve are taken out.
    pub fn frame_capacity_tokens(&self) -> u64 {
        self.context_window - self.prompt_overhead_tokens - self.answer_reserve_tokens
    }

    pub fn with_tokens_per_frame(&self, tokens_per_frame: u64) -> Self {
        Self {
            tokens_per_frame,
            ..self.clone()
        }
    }

    /// Frames covered by `duration_s` seconds.
    pub fn frames_for(&self, duration_s: f64) -> u64 {
        (duration_s * self.fps).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingReport {
    pub frame_count: u64,
    pub visual_tokens: u64,
    pub subtitle_tokens: u64,
    pub total_tokens: u64,
    pub fits: bool,
    pub max_duration_s: f64,
    /// `context_window - total_tokens`; negative when the video overflows.
    pub headroom_tokens: i64,
}

fn check_duration(duration_s: f64) -> Result<(), BudgetError> {
    if duration_s.is_finite() && duration_s > 0.0 {
        Ok(())
    } else {
        Err(BudgetError::Duration(duration_s))
    }
}

pub fn pack(duration_s: f64, b: &TokenBudget) -> Result<PackingReport, BudgetError> {
    check_duration(duration_s)?;
    b.validate()?;
    pack_frames(b.frames_for(duration_s), b)
}

/// Like [`pack`], but frame `i` uses `subtitle_overrides[i]` subtitle tokens
/// when present instead of the budget's constant.
pub fn pack_with_subtitles(
    duration_s: f64,
    b: &TokenBudget,
    subtitle_overrides: &[u64],
) -> Result<PackingReport, BudgetError> {
    check_duration(duration_s)?;
    b.validate()?;
    let frames = b.frames_for(duration_s);
    let overridden = (frames as usize).min(subtitle_overrides.len());
    let subtitle_tokens = subtitle_overrides[..overridden].iter().sum::<u64>()
        + (frames - overridden as u64) * b.subtitle_tokens_per_frame;
    Ok(report(frames, frames * b.tokens_per_frame, subtitle_tokens, b))
}

/// Packs an explicit frame count.
pub fn pack_frames(frame_count: u64, b: &TokenBudget) -> Result<PackingReport, BudgetError> {
    b.validate()?;
    Ok(report(
        frame_count,
        frame_count * b.tokens_per_frame,
        frame_count * b.subtitle_tokens_per_frame,
        b,
    ))
}

fn report(frame_count: u64, visual_tokens: u64, subtitle_tokens: u64, b: &TokenBudget) -> PackingReport {
    let total_tokens = visual_tokens + subtitle_tokens + b.prompt_overhead_tokens + b.answer_reserve_tokens;
    PackingReport {
        frame_count,
        visual_tokens,
        subtitle_tokens,
        total_tokens,
        fits: total_tokens <= b.context_window,
        max_duration_s: max_duration(b).unwrap_or(0.0),
        headroom_tokens: b.context_window as i64 - total_tokens as i64,
    }
}

/// Largest number of frames that fit.
pub fn max_frames(b: &TokenBudget) -> Result<u64, BudgetError> {
    b.validate()?;
    let cost = b.per_frame_cost();
    if cost == 0 {
        return Err(BudgetError::ZeroFrameCost);
    }
    Ok(b.frame_capacity_tokens() / cost)
}

/// Longest duration whose pack fits: `max_frames / fps`, nudged up by ulps
/// where needed so that flooring maps it back to exactly `max_frames`.
pub fn max_duration(b: &TokenBudget) -> Result<f64, BudgetError> {
    let frames = max_frames(b)?;
    let mut d = frames as f64 / b.fps;
    while b.frames_for(d) < frames {
        d = d.next_up();
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Compression {
    /// `n` is the largest admissible content count that still fits.
    Fits { n: usize, report: PackingReport },
    /// Even a single content token per frame overflows.
    Infeasible { report: PackingReport },
}

/// Picks the least aggressive admissible content count for a `grid_side`
/// patch grid such that `duration_s` of video fits the budget.
/// `b.tokens_per_frame` is ignored and replaced by `n + 1`.
pub fn required_compression(duration_s: f64, b: &TokenBudget, grid_side: usize) -> Result<Compression, BudgetError> {
    check_duration(duration_s)?;
    b.validate()?;
    let mut best = None;
    for n in admissible_counts(grid_side) {
        let r = pack(duration_s, &b.with_tokens_per_frame(n as u64 + 1))?;
        if r.fits {
            best = Some((n, r));
        } else {
            break;
        }
    }
    Ok(match best {
        Some((n, report)) => Compression::Fits { n, report },
        None => Compression::Infeasible {
            report: pack(duration_s, &b.with_tokens_per_frame(2))?,
        },
    })
}
