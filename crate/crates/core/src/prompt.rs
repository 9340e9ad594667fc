//! Instruction templates per training stage and modality, and the long-video
//! QA record schema.
//!
//! A template has a conversation `format` containing `<prompt>` and
//! `<answer>`, plus a per-frame `visual` unit. Rendering expands the unit once
//! per frame (`<image-i>` → `<image-1>`, `<image-2>`, …), places the visual
//! block before or after the user prompt, and substitutes the prompt.
//! `<answer>` and `<subtitle-i>` expansions stay in the output as slots.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::budget::TrainingStage as Stage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("unknown placeholder <{0}>")]
    UnknownPlaceholder(String),
    #[error("placeholder <{name}> must appear exactly once in the {part}, found {count}")]
    PlaceholderCount {
        name: &'static str,
        part: &'static str,
        count: usize,
    },
    #[error("placeholder <{name}> is not allowed in a {stage:?}/{modality:?} template")]
    Misplaced {
        name: String,
        stage: Stage,
        modality: Modality,
    },
    #[error("{0:?} modality needs at least one frame")]
    ZeroFrames(Modality),
    #[error("image modality takes exactly one frame, got {0}")]
    ImageFrames(usize),
    #[error("template file: {0}")]
    File(String),
    #[error("duplicate template for {0:?}/{1:?}")]
    DuplicateTemplate(Stage, Modality),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Prepend,
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTemplate {
    pub stage: Stage,
    pub modality: Modality,
    /// Conversation layout with `<prompt>` and `<answer>`.
    pub format: String,
    /// Per-frame unit: `<image>`, `<image-i>` or `<image-i><subtitle-i>`.
    #[serde(default)]
    pub visual: String,
    /// Between the visual block and the prompt.
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_separator() -> String {
    "\n".into()
}

#[derive(Debug, Clone, PartialEq)]
enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_placeholder_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

/// Splits text into literal runs and `<name>` slots. Angle-bracket runs that
/// are not identifiers (such as `</s>`) stay literal.
fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    let mut literal_start = 0;
    let mut offset = 0;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        match after.find('>') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let abs_open = offset + open;
                if abs_open > literal_start {
                    out.push(Segment::Text(&text[literal_start..abs_open]));
                }
                out.push(Segment::Slot(&after[..close]));
                let consumed = open + 1 + close + 1;
                offset += consumed;
                literal_start = offset;
                rest = &rest[consumed..];
            }
            _ => {
                offset += open + 1;
                rest = &rest[open + 1..];
            }
        }
    }
    if literal_start < text.len() {
        out.push(Segment::Text(&text[literal_start..]));
    }
    out
}

fn count_slot(segs: &[Segment<'_>], name: &str) -> usize {
    segs.iter().filter(|s| **s == Segment::Slot(name)).count()
}

impl StageTemplate {
    /// Default layout; the prompt wording varies with the dataset and is
    /// supplied at render time.
    pub fn builtin(stage: Stage, modality: Modality) -> Self {
        let visual = match (stage, modality) {
            (_, Modality::Text) => "",
            (_, Modality::Image) => "<image>",
            (Stage::LongVideo, Modality::Video) => "<image-i><subtitle-i>",
            (_, Modality::Video) => "<image-i>",
        };
        Self {
            stage,
            modality,
            format: "USER: <prompt> ASSISTANT: <answer>".into(),
            visual: visual.into(),
            separator: default_separator(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let fmt = segments(&self.format);
        for s in &fmt {
            if let Segment::Slot(name) = s {
                if !matches!(*name, "prompt" | "answer") {
                    return Err(self.unknown_or_misplaced(name));
                }
            }
        }
        for name in ["prompt", "answer"] {
            let count = count_slot(&fmt, name);
            if count != 1 {
                return Err(PromptError::PlaceholderCount {
                    name,
                    part: "format",
                    count,
                });
            }
        }

        let vis = segments(&self.visual);
        for s in &vis {
            if let Segment::Slot(name) = s {
                if !matches!(*name, "image" | "image-i" | "subtitle-i") {
                    return Err(self.unknown_or_misplaced(name));
                }
            }
        }
        let required: &[&'static str] = match (self.stage, self.modality) {
            (_, Modality::Text) => &[],
            (_, Modality::Image) => &["image"],
            (Stage::LongVideo, Modality::Video) => &["image-i", "subtitle-i"],
            (_, Modality::Video) => &["image-i"],
        };
        for s in &vis {
            if let Segment::Slot(name) = s {
                if !required.contains(name) {
                    return Err(PromptError::Misplaced {
                        name: name.to_string(),
                        stage: self.stage,
                        modality: self.modality,
                    });
                }
            }
        }
        for &name in required {
            let count = count_slot(&vis, name);
            if count != 1 {
                return Err(PromptError::PlaceholderCount {
                    name,
                    part: "visual unit",
                    count,
                });
            }
        }
        Ok(())
    }

    fn unknown_or_misplaced(&self, name: &str) -> PromptError {
        if matches!(name, "prompt" | "answer" | "image" | "image-i" | "subtitle-i") {
            PromptError::Misplaced {
                name: name.to_string(),
                stage: self.stage,
                modality: self.modality,
            }
        } else {
            PromptError::UnknownPlaceholder(name.to_string())
        }
    }
}

fn expand_unit(unit: &str, index: usize, out: &mut String) {
    for s in segments(unit) {
        match s {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot("image") => out.push_str("<image>"),
            Segment::Slot("image-i") => out.push_str(&format!("<image-{index}>")),
            Segment::Slot("subtitle-i") => out.push_str(&format!("<subtitle-{index}>")),
            Segment::Slot(other) => unreachable!("validated template contains <{other}>"),
        }
    }
}

pub fn render(t: &StageTemplate, prompt: &str, frame_count: usize, placement: Placement) -> Result<String, PromptError> {
    t.validate()?;
    let mut visual = String::new();
    match t.modality {
        Modality::Text => {}
        Modality::Image => match frame_count {
            0 => return Err(PromptError::ZeroFrames(Modality::Image)),
            1 => expand_unit(&t.visual, 1, &mut visual),
            n => return Err(PromptError::ImageFrames(n)),
        },
        Modality::Video => {
            if frame_count == 0 {
                return Err(PromptError::ZeroFrames(Modality::Video));
            }
            for i in 1..=frame_count {
                expand_unit(&t.visual, i, &mut visual);
            }
        }
    }
    let user = match (visual.is_empty(), placement) {
        (true, _) => prompt.to_string(),
        (false, Placement::Prepend) => format!("{visual}{}{prompt}", t.separator),
        (false, Placement::Append) => format!("{prompt}{}{visual}", t.separator),
    };
    let mut out = String::new();
    for s in segments(&t.format) {
        match s {
            Segment::Text(text) => out.push_str(text),
            Segment::Slot("prompt") => out.push_str(&user),
            Segment::Slot(other) => {
                out.push('<');
                out.push_str(other);
                out.push('>');
            }
        }
    }
    Ok(out)
}

/// Templates keyed by (stage, modality), falling back to the builtin layout.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: HashMap<(Stage, Modality), StageTemplate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    templates: Vec<StageTemplate>,
}

impl TemplateSet {
    /// Parses `{"templates": [{stage, modality, format, visual, separator}, …]}`.
    pub fn from_json(json: &str) -> Result<Self, PromptError> {
        let file: TemplateFile = serde_json::from_str(json).map_err(|e| PromptError::File(e.to_string()))?;
        let mut templates = HashMap::new();
        for t in file.templates {
            t.validate()?;
            let key = (t.stage, t.modality);
            if templates.insert(key, t).is_some() {
                return Err(PromptError::DuplicateTemplate(key.0, key.1));
            }
        }
        Ok(Self { templates })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PromptError::File(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, stage: Stage, modality: Modality) -> StageTemplate {
        self.templates
            .get(&(stage, modality))
            .cloned()
            .unwrap_or_else(|| StageTemplate::builtin(stage, modality))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    BriefSummary,
    DetailedSummary,
    PlotQa,
    CharacterQa,
    PlotReasoning,
    DetailDescription,
}

impl QaKind {
    pub const ALL: [QaKind; 6] = [
        Self::BriefSummary,
        Self::DetailedSummary,
        Self::PlotQa,
        Self::CharacterQa,
        Self::PlotReasoning,
        Self::DetailDescription,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
    pub movie_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    EmptyQuestion,
    EmptyAnswer,
    EmptyMovieId,
    UnknownKind,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validation {
    pub accepted: bool,
    pub reasons: Vec<Reason>,
}

impl Validation {
    fn from_reasons(reasons: Vec<Reason>) -> Self {
        Self {
            accepted: reasons.is_empty(),
            reasons,
        }
    }
}

pub fn validate_record(r: &QaRecord) -> Validation {
    let mut reasons = Vec::new();
    if r.question.trim().is_empty() {
        reasons.push(Reason::EmptyQuestion);
    }
    if r.answer.trim().is_empty() {
        reasons.push(Reason::EmptyAnswer);
    }
    if r.movie_id.trim().is_empty() {
        reasons.push(Reason::EmptyMovieId);
    }
    Validation::from_reasons(reasons)
}

/// Parses and validates one JSON line.
pub fn validate_line(line: &str) -> (Option<QaRecord>, Validation) {
    match serde_json::from_str::<QaRecord>(line) {
        Ok(r) => {
            let v = validate_record(&r);
            (Some(r), v)
        }
        Err(e) => {
            let reason = if e.to_string().contains("unknown variant") {
                Reason::UnknownKind
            } else {
                Reason::Malformed
            };
            (None, Validation::from_reasons(vec![reason]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineResult {
    /// 1-based line number.
    pub line: usize,
    #[serde(skip)]
    pub record: Option<QaRecord>,
    pub validation: Validation,
}

/// Reads line-delimited records, skipping blank lines.
pub fn parse_jsonl(text: &str) -> Vec<LineResult> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (record, validation) = validate_line(l);
            LineResult {
                line: i + 1,
                record,
                validation,
            }
        })
        .collect()
}

pub fn to_jsonl(records: &[QaRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Duplicate {
    pub movie_id: String,
    pub question: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub total: usize,
    pub by_kind: BTreeMap<QaKind, usize>,
    pub by_movie: BTreeMap<String, BTreeMap<QaKind, usize>>,
    pub duplicates: Vec<Duplicate>,
}

pub fn dataset_summary(records: &[QaRecord]) -> DatasetSummary {
    let mut by_kind: BTreeMap<QaKind, usize> = QaKind::ALL.iter().map(|&k| (k, 0)).collect();
    let mut by_movie: BTreeMap<String, BTreeMap<QaKind, usize>> = BTreeMap::new();
    let mut seen: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in records {
        *by_kind.entry(r.kind).or_default() += 1;
        *by_movie.entry(r.movie_id.clone()).or_default().entry(r.kind).or_default() += 1;
        *seen.entry((&r.movie_id, &r.question)).or_default() += 1;
    }
    let duplicates = seen
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|((m, q), count)| Duplicate {
            movie_id: m.to_string(),
            question: q.to_string(),
            count,
        })
        .collect();
    DatasetSummary {
        total: records.len(),
        by_kind,
        by_movie,
        duplicates,
    }
}

/// Per-movie generation recipe: one brief and one detailed summary, five
/// plot and five character pairs from synopses, five reasoning pairs and five
/// detail descriptions from scripts.
pub const RECIPE: [(&str, &[(QaKind, usize)]); 3] = [
    ("summary", &[(QaKind::BriefSummary, 1), (QaKind::DetailedSummary, 1)]),
    ("plot", &[(QaKind::PlotQa, 5), (QaKind::CharacterQa, 5)]),
    ("detail", &[(QaKind::PlotReasoning, 5), (QaKind::DetailDescription, 5)]),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecipeIssue {
    pub movie_id: String,
    pub kind: QaKind,
    pub expected: usize,
    pub found: usize,
}

/// Checks every recipe group a movie has started: once any kind of a group is
/// present, each kind in that group must have its exact count.
pub fn check_recipe(summary: &DatasetSummary) -> Vec<RecipeIssue> {
    let mut issues = Vec::new();
    for (movie, counts) in &summary.by_movie {
        for (_, group) in RECIPE {
            let started = group.iter().any(|(k, _)| counts.get(k).copied().unwrap_or(0) > 0);
            if !started {
                continue;
            }
            for &(kind, expected) in group {
                let found = counts.get(&kind).copied().unwrap_or(0);
                if found != expected {
                    issues.push(RecipeIssue {
                        movie_id: movie.clone(),
                        kind,
                        expected,
                        found,
                    });
                }
            }
        }
    }
    issues
}
