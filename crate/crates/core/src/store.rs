//! Binary tensor files and run configuration.
//!
//! Tensor file layout (all integers little-endian):
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `LVID`                   |
//! | 4      | 1         | version, `1`                   |
//! | 5      | 1         | dtype, `0` = f32               |
//! | 6      | 2         | reserved, zero                 |
//! | 8      | 4         | ndim (u32)                     |
//! | 12     | 8 × ndim  | dims (u64 each)                |
//! | …      | 4 × numel | payload, row-major f32         |

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{TokenBudget, TrainingStage};
use crate::tensor::{Tensor, TensorError};
use crate::token::admissible_counts;

pub const MAGIC: [u8; 4] = *b"LVID";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const FIXED_HEADER: usize = 12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected \"LVID\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("reserved bytes must be zero, found {0:?}")]
    Reserved([u8; 2]),
    #[error("truncated header while reading {field}")]
    TruncatedHeader { field: &'static str },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("dims {dims:?} overflow the addressable payload size")]
    DimOverflow { dims: Vec<u64> },
    #[error("invalid tensor payload: {0}")]
    Payload(#[from] TensorError),
    #[error("config {path}: {message}")]
    Schema { path: String, message: String },
    #[error("image side {image_side} is not a multiple of patch size {patch_size}")]
    ImageSide { image_side: usize, patch_size: usize },
    #[error("content count {n} is not admissible for grid side {grid_side}; admissible: {admissible:?}")]
    Inadmissible {
        n: usize,
        grid_side: usize,
        admissible: Vec<usize>,
    },
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_field<const N: usize>(r: &mut impl Read, field: &'static str) -> Result<[u8; N], StoreError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::TruncatedHeader { field },
        _ => StoreError::Io {
            path: PathBuf::new(),
            source: e,
        },
    })?;
    Ok(buf)
}

/// Decodes one tensor, validating every header field before the payload is
/// touched. Reads at most the number of bytes the header promises.
pub fn decode_tensor(mut r: impl Read) -> Result<Tensor, StoreError> {
    let magic = read_field::<4>(&mut r, "magic")?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let [version] = read_field::<1>(&mut r, "version")?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let [dtype] = read_field::<1>(&mut r, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(dtype));
    }
    let reserved = read_field::<2>(&mut r, "reserved")?;
    if reserved != [0, 0] {
        return Err(StoreError::Reserved(reserved));
    }
    let ndim = u32::from_le_bytes(read_field::<4>(&mut r, "ndim")?);
    let mut dims = Vec::new();
    for _ in 0..ndim {
        dims.push(u64::from_le_bytes(read_field::<8>(&mut r, "dims")?));
    }
    let expected = dims
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d))
        .filter(|&bytes| usize::try_from(bytes).is_ok())
        .ok_or_else(|| StoreError::DimOverflow { dims: dims.clone() })?;

    let mut payload = Vec::new();
    r.take(expected)
        .read_to_end(&mut payload)
        .map_err(|source| StoreError::Io {
            path: PathBuf::new(),
            source,
        })?;
    if payload.len() as u64 != expected {
        return Err(StoreError::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let shape = dims.iter().map(|&d| d as usize).collect::<Vec<_>>();
    Ok(Tensor::new(shape, data)?)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), StoreError> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, StoreError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensor(io::BufReader::new(file)).map_err(|e| match e {
        StoreError::Io { source, .. } => StoreError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    fps: Option<f64>,
    subtitle_tokens_per_frame: Option<u64>,
    prompt_overhead_tokens: Option<u64>,
    context_window: Option<u64>,
    answer_reserve_tokens: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    image_side: Option<usize>,
    p: Option<usize>,
    channels: Option<usize>,
    llm_width: Option<usize>,
    n: Option<usize>,
    stage: Option<TrainingStage>,
    #[serde(default)]
    budget: RawBudget,
    seed: Option<u64>,
}

/// Validated run configuration with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub image_side: usize,
    pub patch_size: usize,
    /// Patches per side, `image_side / patch_size`.
    pub grid_side: usize,
    /// Embedding channels; inferred from the data when absent.
    pub channels: Option<usize>,
    /// Output token width; defaults to `channels`.
    pub llm_width: Option<usize>,
    pub n: usize,
    pub stage: TrainingStage,
    /// `tokens_per_frame` is set to `n + 1`.
    pub budget: TokenBudget,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub const DEFAULT_IMAGE_SIDE: usize = 224;
    pub const DEFAULT_PATCH_SIZE: usize = 14;

    pub fn patches(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

fn positive(path: &str, v: Option<usize>, default: usize) -> Result<usize, StoreError> {
    match v {
        Some(0) => Err(StoreError::Schema {
            path: path.into(),
            message: "must be positive".into(),
        }),
        Some(v) => Ok(v),
        None => Ok(default),
    }
}

pub fn parse_config(json: &str) -> Result<RunConfig, StoreError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| StoreError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;

    let image_side = positive("image_side", raw.image_side, RunConfig::DEFAULT_IMAGE_SIDE)?;
    let patch_size = positive("p", raw.p, RunConfig::DEFAULT_PATCH_SIZE)?;
    if image_side % patch_size != 0 {
        return Err(StoreError::ImageSide { image_side, patch_size });
    }
    let grid_side = image_side / patch_size;
    let n = positive("n", raw.n, 1)?;
    let admissible = admissible_counts(grid_side);
    if !admissible.contains(&n) {
        return Err(StoreError::Inadmissible { n, grid_side, admissible });
    }
    if raw.channels == Some(0) || raw.llm_width == Some(0) {
        let path = if raw.channels == Some(0) { "channels" } else { "llm_width" };
        return Err(StoreError::Schema {
            path: path.into(),
            message: "must be positive".into(),
        });
    }

    let stage = raw.stage.unwrap_or(TrainingStage::LongVideo);
    let defaults = TokenBudget::default();
    let budget = TokenBudget {
        fps: raw.budget.fps.unwrap_or(defaults.fps),
        tokens_per_frame: n as u64 + 1,
        subtitle_tokens_per_frame: raw.budget.subtitle_tokens_per_frame.unwrap_or(0),
        prompt_overhead_tokens: raw.budget.prompt_overhead_tokens.unwrap_or(0),
        context_window: raw.budget.context_window.unwrap_or(stage.max_tokens()),
        answer_reserve_tokens: raw.budget.answer_reserve_tokens.unwrap_or(0),
    };
    budget.validate().map_err(|e| StoreError::Schema {
        path: "budget".into(),
        message: e.to_string(),
    })?;

    Ok(RunConfig {
        image_side,
        patch_size,
        grid_side,
        channels: raw.channels,
        llm_width: raw.llm_width.or(raw.channels),
        n,
        stage,
        budget,
        seed: raw.seed,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, StoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
