use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use lvid_core::budget::{self, TokenBudget, TrainingStage};
use lvid_core::decoder::{decode_queries, DecoderParams, InstructionTokens};
use lvid_core::gradcheck::{self, GradCheckOptions, Sizes};
use lvid_core::prompt::{self, Modality, Placement, StageTemplate, TemplateSet};
use lvid_core::store::{self, RunConfig};
use lvid_core::tensor::Tensor;
use lvid_core::token::{self, FrameInput, Projectors, TextQuery, VisualEmbedding};
use lvid_core::toy::{self, ToyConfig, ToyError};

#[derive(Parser)]
#[command(name = "lvid", version, about = "Dual-token video frame encoding and long-context budgeting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode frame embeddings into context + content tokens.
    Encode(EncodeArgs),
    /// Token packing report for a video duration.
    Plan(PlanArgs),
    /// Largest admissible content-token count that fits the window.
    CompressFor(CompressArgs),
    /// Top responding patches for one query.
    Heatmap(HeatmapArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train the toy retrieval task and print the loss curve.
    TrainToy(TrainToyArgs),
    /// Render an instruction template.
    Prompt(PromptArgs),
    /// Validate long-video QA records (JSON lines).
    ValidateData(ValidateArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Falls back to LVID_SEED, then the config seed (encode), then 0.
    #[arg(long, env = "LVID_SEED")]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self, config: Option<u64>) -> u64 {
        self.seed.or(config).unwrap_or(0)
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct QuerySource {
    /// TensorFile of queries, [M, C] shared or [F, M, C] per frame.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// JSON instruction `{"ids": [...], "vocab_size": V}` run through the text decoder.
    #[arg(long)]
    instr: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// TensorFile of embeddings, [F, N, C] or [N, C].
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    source: QuerySource,
    /// RunConfig JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output TensorFile [F, n+1, D]; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 1.0)]
    fps: f64,
    /// Subtitle tokens per frame.
    #[arg(long, default_value_t = 0)]
    subtitle: u64,
    /// Context window in tokens.
    #[arg(long, default_value_t = 65536)]
    window: u64,
    /// Prompt overhead tokens.
    #[arg(long, default_value_t = 0)]
    overhead: u64,
    /// Tokens reserved for the answer.
    #[arg(long, default_value_t = 0)]
    reserve: u64,
}

impl BudgetArgs {
    fn budget(&self, tokens_per_frame: u64) -> TokenBudget {
        TokenBudget {
            fps: self.fps,
            tokens_per_frame,
            subtitle_tokens_per_frame: self.subtitle,
            prompt_overhead_tokens: self.overhead,
            context_window: self.window,
            answer_reserve_tokens: self.reserve,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Seconds.
    #[arg(long)]
    duration: f64,
    /// Visual tokens per frame.
    #[arg(long, default_value_t = 2)]
    per_frame: u64,
    #[command(flatten)]
    budget: BudgetArgs,
    /// JSON array of per-frame subtitle token counts overriding --subtitle.
    #[arg(long)]
    subtitle_file: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    duration: f64,
    /// Patches per side of the grid.
    #[arg(long, default_value_t = 16)]
    grid_side: usize,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Args)]
struct HeatmapArgs {
    /// TensorFile of embeddings, [N, C] or [F, N, C].
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    source: QuerySource,
    /// Frame to inspect when the inputs hold several.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    query_index: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizesArg {
    Small,
    Large,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, value_enum, default_value = "small")]
    sizes: SizesArg,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Whether the text decoder trains alongside the projector.
    #[arg(long, value_enum, default_value = "on")]
    open_decoder: Switch,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Alignment,
    Instruction,
    LongVideo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Text,
    Image,
    Video,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Prepend,
    Append,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 1)]
    frames: usize,
    #[arg(long, value_enum, default_value = "prepend")]
    placement: PlacementArg,
    /// Template JSON overriding the builtin layouts.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// JSON-lines file of QA records.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Numerical(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Validation(m) | Self::Numerical(m) => m,
        }
    }
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

/// Non-finite values are numerical failures; everything else is bad input.
fn classify(e: impl Display, non_finite: bool) -> Failure {
    if non_finite {
        Failure::Numerical(e.to_string())
    } else {
        Failure::Validation(e.to_string())
    }
}

fn token_failure(e: token::TokenError) -> Failure {
    let nf = e.is_non_finite();
    classify(e, nf)
}

type Outcome = Result<serde_json::Value, Failure>;

fn to_json(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("json serializes");
    bytes.push(b'\n');
    store::write_atomic(path, &bytes).map_err(invalid)
}

/// Splits a [F, R, C] tensor into F rank-2 frames; rank 2 is one frame.
fn frames_of(t: &Tensor, what: &str) -> Result<Vec<Tensor>, Failure> {
    match t.shape() {
        [_, _] => Ok(vec![t.clone()]),
        &[f, r, c] => (0..f)
            .map(|i| {
                let data = t.data()[i * r * c..(i + 1) * r * c].to_vec();
                Tensor::new(vec![r, c], data).map_err(invalid)
            })
            .collect(),
        s => Err(Failure::Validation(format!("{what} must have rank 2 or 3, got shape {s:?}"))),
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct InstructionFile {
    ids: Vec<usize>,
    vocab_size: usize,
}

fn load_instruction(path: &Path) -> Result<InstructionTokens, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let f: InstructionFile = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    InstructionTokens::new(f.ids, f.vocab_size).map_err(invalid)
}

/// Queries for each embedding frame, from a file or from the text decoder.
fn queries_for(
    source: &QuerySource,
    embeddings: &[VisualEmbedding],
    seed: u64,
) -> Result<Vec<TextQuery>, Failure> {
    let channels = embeddings[0].channels();
    if let Some(path) = &source.queries {
        let t = store::read_tensor(path).map_err(invalid)?;
        let frames = frames_of(&t, "queries")?;
        let frames = match frames.len() {
            1 => vec![frames[0].clone(); embeddings.len()],
            f if f == embeddings.len() => frames,
            f => {
                return Err(Failure::Validation(format!(
                    "queries hold {f} frames but embeddings hold {}",
                    embeddings.len()
                )))
            }
        };
        frames
            .into_iter()
            .map(|q| {
                if q.shape()[1] != channels {
                    return Err(Failure::Validation(format!(
                        "query channels {} do not match embedding channels {channels}",
                        q.shape()[1]
                    )));
                }
                TextQuery::new(q).map_err(invalid)
            })
            .collect()
    } else {
        let path = source.instr.as_ref().expect("clap requires one query source");
        let instr = load_instruction(path)?;
        let params = DecoderParams::init(instr.vocab_size(), channels, seed).map_err(invalid)?;
        embeddings
            .iter()
            .map(|x| decode_queries(&instr, x, &params).map_err(|e| {
                let nf = e.is_non_finite();
                classify(e, nf)
            }))
            .collect()
    }
}

fn load_embeddings(path: &Path) -> Result<Vec<VisualEmbedding>, Failure> {
    let t = store::read_tensor(path).map_err(invalid)?;
    frames_of(&t, "embeddings")?
        .into_iter()
        .map(|x| VisualEmbedding::new(x).map_err(invalid))
        .collect()
}

fn encode(a: &EncodeArgs) -> Outcome {
    let cfg: RunConfig = store::load_config(&a.config).map_err(invalid)?;
    let seed = a.seed.resolve(cfg.seed);
    let embeddings = load_embeddings(&a.embeddings)?;
    let first = &embeddings[0];
    if first.patches() != cfg.patches() {
        return Err(Failure::Validation(format!(
            "embeddings have {} patches per frame, config expects {} ({}x{} grid)",
            first.patches(),
            cfg.patches(),
            cfg.grid_side,
            cfg.grid_side
        )));
    }
    if let Some(c) = cfg.channels.filter(|&c| c != first.channels()) {
        return Err(Failure::Validation(format!(
            "embeddings have {} channels, config expects {c}",
            first.channels()
        )));
    }
    let queries = queries_for(&a.source, &embeddings, seed)?;
    let width = cfg.llm_width.unwrap_or(first.channels());
    let projs = Projectors::init(first.channels(), width, seed).map_err(invalid)?;
    let frames: Vec<FrameInput> = embeddings
        .into_iter()
        .zip(queries)
        .enumerate()
        .map(|(i, (embedding, query))| FrameInput {
            query,
            embedding,
            timestamp_s: i as f64 / cfg.budget.fps,
        })
        .collect();
    let encoded = token::encode_sequence(&frames, cfg.n, &projs).map_err(token_failure)?;

    let per_frame = cfg.n + 1;
    let mut data = Vec::with_capacity(encoded.len() * per_frame * width);
    for f in &encoded {
        data.extend_from_slice(f.tokens().data());
    }
    let out = Tensor::new(vec![encoded.len(), per_frame, width], data).map_err(invalid)?;
    let manifest = json!({
        "frames": encoded.len(),
        "n": cfg.n,
        "tokens_total": encoded.len() * per_frame,
    });
    store::write_tensor(&out, &a.out).map_err(invalid)?;
    let mut manifest_path = a.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    write_json(Path::new(&manifest_path), &manifest)?;
    Ok(manifest)
}

fn plan(a: &PlanArgs) -> Outcome {
    let b = a.budget.budget(a.per_frame);
    let report = match &a.subtitle_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let overrides: Vec<u64> =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            budget::pack_with_subtitles(a.duration, &b, &overrides)
        }
        None => budget::pack(a.duration, &b),
    }
    .map_err(invalid)?;
    Ok(to_json(&report))
}

fn compress_for(a: &CompressArgs) -> Outcome {
    let c = budget::required_compression(a.duration, &a.budget.budget(2), a.grid_side).map_err(invalid)?;
    Ok(to_json(&c))
}

fn heatmap(a: &HeatmapArgs) -> Outcome {
    let embeddings = load_embeddings(&a.embeddings)?;
    if a.frame >= embeddings.len() {
        return Err(Failure::Validation(format!(
            "frame {} out of range for {} frames",
            a.frame,
            embeddings.len()
        )));
    }
    let queries = queries_for(&a.source, &embeddings, a.seed.resolve(None))?;
    let (_, rec) = token::context_embedding(&queries[a.frame], &embeddings[a.frame]).map_err(token_failure)?;
    let map = to_json(&token::heatmap(&rec, a.query_index, a.k).map_err(invalid)?);
    if let Some(out) = &a.out {
        write_json(out, &map)?;
    }
    Ok(map)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Outcome {
    let opts = GradCheckOptions {
        seed: a.seed.resolve(None),
        sizes: match a.sizes {
            SizesArg::Small => Sizes::Small,
            SizesArg::Large => Sizes::Large,
        },
        inject_fault: a.inject_fault,
    };
    let report = gradcheck::run(&opts).map_err(|e| {
        let nf = e.is_non_finite();
        classify(e, nf)
    })?;
    let value = to_json(&report);
    if report.passed {
        Ok(value)
    } else {
        println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
        Err(Failure::Numerical(format!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn train_toy(a: &TrainToyArgs) -> Outcome {
    if a.steps == 0 {
        return Err(Failure::Validation("--steps must be at least 1".into()));
    }
    let defaults = ToyConfig::default();
    let cfg = ToyConfig {
        steps: a.steps,
        seed: a.seed.resolve(None),
        open_decoder: a.open_decoder == Switch::On,
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        ..defaults
    };
    let outcome = toy::train_toy(&cfg).map_err(|e| match e {
        ToyError::Diverged { .. } => Failure::Numerical(e.to_string()),
        other => invalid(other),
    })?;
    let value = to_json(&outcome.report);
    if let Some(out) = &a.out {
        write_json(out, &value)?;
    }
    Ok(value)
}

fn prompt_cmd(a: &PromptArgs) -> Outcome {
    let stage = match a.stage {
        StageArg::Alignment => TrainingStage::Alignment,
        StageArg::Instruction => TrainingStage::Instruction,
        StageArg::LongVideo => TrainingStage::LongVideo,
    };
    let modality = match a.modality {
        ModalityArg::Text => Modality::Text,
        ModalityArg::Image => Modality::Image,
        ModalityArg::Video => Modality::Video,
    };
    let placement = match a.placement {
        PlacementArg::Prepend => Placement::Prepend,
        PlacementArg::Append => Placement::Append,
    };
    let template = match &a.templates {
        Some(path) => TemplateSet::load(path).map_err(invalid)?.get(stage, modality),
        None => StageTemplate::builtin(stage, modality),
    };
    let text = prompt::render(&template, &a.prompt, a.frames, placement).map_err(invalid)?;
    Ok(json!({
        "stage": stage,
        "modality": modality,
        "frames": a.frames,
        "text": text,
    }))
}

fn validate_data(a: &ValidateArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.input).map_err(|e| invalid(format!("{}: {e}", a.input.display())))?;
    let lines = prompt::parse_jsonl(&text);
    let records: Vec<_> = lines
        .iter()
        .filter(|l| l.validation.accepted)
        .filter_map(|l| l.record.clone())
        .collect();
    let rejected: Vec<_> = lines.iter().filter(|l| !l.validation.accepted).collect();
    let summary = prompt::dataset_summary(&records);
    let value = json!({
        "lines": lines.len(),
        "accepted": records.len(),
        "rejected": rejected,
        "summary": summary,
        "recipe_issues": prompt::check_recipe(&summary),
    });
    if rejected.is_empty() {
        Ok(value)
    } else {
        println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
        Err(Failure::Validation(format!("{} of {} records rejected", rejected.len(), lines.len())))
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Encode(a) => encode(a),
        Command::Plan(a) => plan(a),
        Command::CompressFor(a) => compress_for(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Prompt(a) => prompt_cmd(a),
        Command::ValidateData(a) => validate_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
