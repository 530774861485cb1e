//! The interleaved tool-call protocol.
//!
//! Every assistant emission is an optional `<think>…</think>` block followed
//! by exactly one JSON action enclosed between `<|begin_of_box|>` and
//! `<|end_of_box|>`. Two actions exist: a `zoom_in` tool call and a final
//! answer. Transcripts record the full dialogue, including tool responses
//! carrying the metadata of each returned view.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{iou, NormBox, PixelRect, GRID};

pub const BEGIN_BOX: &str = "<|begin_of_box|>";
pub const END_BOX: &str = "<|end_of_box|>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const TOOL_NAME: &str = "zoom_in";
pub const ROOT_IMAGE: &str = "image_0";

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// Default IoU above which a re-crop of an ancestor counts as a revisit.
pub const DEFAULT_REDUNDANCY_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValidationKind {
    FormatError,
    ExecutionError,
    InteractionError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {detail}")]
pub struct ValidationError {
    pub kind: ValidationKind,
    pub detail: String,
}

impl ValidationError {
    pub fn format(detail: impl Into<String>) -> Self {
        Self {
            kind: ValidationKind::FormatError,
            detail: detail.into(),
        }
    }
    pub fn execution(detail: impl Into<String>) -> Self {
        Self {
            kind: ValidationKind::ExecutionError,
            detail: detail.into(),
        }
    }
    pub fn interaction(detail: impl Into<String>) -> Self {
        Self {
            kind: ValidationKind::InteractionError,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ToolCall {
    pub source_image_id: String,
    pub reason: String,
    pub bbox: NormBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    ToolCall(ToolCall),
    Answer { content: String },
}

impl Action {
    pub fn as_tool_call(&self) -> Option<&ToolCall> {
        match self {
            Action::ToolCall(c) => Some(c),
            Action::Answer { .. } => None,
        }
    }
}

/// A tool call as it arrives off the wire, before range checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToolCall {
    pub source_image_id: String,
    pub reason: String,
    pub bbox: [f64; 4],
}

impl From<&ToolCall> for RawToolCall {
    fn from(c: &ToolCall) -> Self {
        let b = c.bbox.to_array();
        Self {
            source_image_id: c.source_image_id.clone(),
            reason: c.reason.clone(),
            bbox: [b[0].into(), b[1].into(), b[2].into(), b[3].into()],
        }
    }
}

// Wire structs fix the canonical field order used by `render_action`.
#[derive(Serialize)]
struct WireToolCall<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    tool_name: &'static str,
    arguments: WireArguments<'a>,
}

#[derive(Serialize)]
struct WireArguments<'a> {
    source_image_id: &'a str,
    reason: &'a str,
    bbox: [u32; 4],
}

#[derive(Serialize)]
struct WireAnswer<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    content: &'a str,
}

/// Canonical single-line JSON for an action, without delimiters.
///
/// `<` is written as `<` so string payloads can never forge a delimiter.
pub fn action_json(a: &Action) -> String {
    let raw = match a {
        Action::ToolCall(c) => serde_json::to_string(&WireToolCall {
            kind: "tool_call",
            tool_name: TOOL_NAME,
            arguments: WireArguments {
                source_image_id: &c.source_image_id,
                reason: &c.reason,
                bbox: c.bbox.to_array(),
            },
        }),
        Action::Answer { content } => serde_json::to_string(&WireAnswer {
            kind: "answer",
            content,
        }),
    }
    .expect("action serialization cannot fail");
    raw.replace('<', "\\u003c")
}

pub fn render_action(a: &Action) -> String {
    format!("{BEGIN_BOX}{}{END_BOX}", action_json(a))
}

/// Full assistant emission: think block plus delimited action.
pub fn render_emission(think: &str, a: &Action) -> String {
    if think.is_empty() {
        render_action(a)
    } else {
        format!("{THINK_OPEN}{think}{THINK_CLOSE}\n{}", render_action(a))
    }
}

/// Split an emission into its optional think text and the boxed JSON payload.
fn split_emission(text: &str) -> Result<(Option<&str>, &str), ValidationError> {
    let mut rest = text.trim_start();
    let mut think = None;
    if let Some(after_open) = rest.strip_prefix(THINK_OPEN) {
        let close = after_open
            .find(THINK_CLOSE)
            .ok_or_else(|| ValidationError::format("unterminated <think> block"))?;
        think = Some(&after_open[..close]);
        rest = &after_open[close + THINK_CLOSE.len()..];
    }
    let begins = rest.matches(BEGIN_BOX).count();
    let ends = rest.matches(END_BOX).count();
    if begins == 0 || ends == 0 {
        return Err(ValidationError::format(
            "action must be enclosed between <|begin_of_box|> and <|end_of_box|>",
        ));
    }
    if begins > 1 || ends > 1 {
        return Err(ValidationError::format("multiple delimited action blocks"));
    }
    let b = rest.find(BEGIN_BOX).unwrap();
    let e = rest.find(END_BOX).unwrap();
    if e < b {
        return Err(ValidationError::format("<|end_of_box|> precedes <|begin_of_box|>"));
    }
    if !rest[..b].trim().is_empty() {
        return Err(ValidationError::format("text outside the think block and action box"));
    }
    if !rest[e + END_BOX.len()..].trim().is_empty() {
        return Err(ValidationError::format("text after <|end_of_box|>"));
    }
    Ok((think, &rest[b + BEGIN_BOX.len()..e]))
}

fn expect_keys(obj: &Map<String, Value>, allowed: &[&str], what: &str) -> Result<(), ValidationError> {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(ValidationError::format(format!("unknown field `{k}` in {what}")));
        }
    }
    for k in allowed {
        if !obj.contains_key(*k) {
            return Err(ValidationError::format(format!("missing field `{k}` in {what}")));
        }
    }
    Ok(())
}

fn string_field(obj: &Map<String, Value>, key: &str) -> Result<String, ValidationError> {
    obj[key]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| ValidationError::format(format!("`{key}` must be a string")))
}

/// Parsed payload: either a final answer or a tool call awaiting range checks.
enum Payload {
    Answer(String),
    Call(RawToolCall),
}

fn parse_payload(json: &str) -> Result<Payload, ValidationError> {
    let value: Value = serde_json::from_str(json.trim())
        .map_err(|e| ValidationError::format(format!("malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ValidationError::format("action must be a JSON object"))?;
    match obj.get("type").and_then(Value::as_str) {
        Some("answer") => {
            expect_keys(obj, &["type", "content"], "answer")?;
            Ok(Payload::Answer(string_field(obj, "content")?))
        }
        Some("tool_call") => {
            expect_keys(obj, &["type", "tool_name", "arguments"], "tool_call")?;
            if obj["tool_name"].as_str() != Some(TOOL_NAME) {
                return Err(ValidationError::format("tool_name must be \"zoom_in\""));
            }
            let args = obj["arguments"]
                .as_object()
                .ok_or_else(|| ValidationError::format("`arguments` must be an object"))?;
            expect_keys(args, &["source_image_id", "reason", "bbox"], "arguments")?;
            let items = args["bbox"]
                .as_array()
                .filter(|a| a.len() == 4)
                .ok_or_else(|| ValidationError::format("`bbox` must be an array of 4 numbers"))?;
            let mut bbox = [0.0; 4];
            for (slot, v) in bbox.iter_mut().zip(items) {
                *slot = v
                    .as_f64()
                    .ok_or_else(|| ValidationError::format("`bbox` entries must be numbers"))?;
            }
            Ok(Payload::Call(RawToolCall {
                source_image_id: string_field(args, "source_image_id")?,
                reason: string_field(args, "reason")?,
                bbox,
            }))
        }
        _ => Err(ValidationError::format(
            "`type` must be \"tool_call\" or \"answer\"",
        )),
    }
}

/// Range checks on a raw bbox: integers on the grid with min < max.
pub fn check_bbox(bbox: &[f64; 4]) -> Result<NormBox, ValidationError> {
    if bbox.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > f64::from(GRID)) {
        return Err(ValidationError::format(format!(
            "bbox {bbox:?} has coordinates outside [0, 1000]"
        )));
    }
    if bbox.iter().any(|v| v.fract() != 0.0) {
        return Err(ValidationError::format(format!(
            "bbox {bbox:?} must use integer coordinates"
        )));
    }
    NormBox::new(bbox[0] as i64, bbox[1] as i64, bbox[2] as i64, bbox[3] as i64)
        .map_err(|e| ValidationError::format(e.to_string()))
}

/// Parse one assistant emission. The think block is accepted and ignored.
pub fn parse_action(text: &str) -> Result<Action, ValidationError> {
    let (_, json) = split_emission(text)?;
    match parse_payload(json)? {
        Payload::Answer(content) => Ok(Action::Answer { content }),
        Payload::Call(raw) => Ok(Action::ToolCall(ToolCall {
            bbox: check_bbox(&raw.bbox)?,
            source_image_id: raw.source_image_id,
            reason: raw.reason,
        })),
    }
}

/// Parse an emission and also return its think text.
pub fn parse_emission(text: &str) -> Result<(Option<String>, Action), ValidationError> {
    let (think, _) = split_emission(text)?;
    let action = parse_action(text)?;
    Ok((think.map(str::to_owned), action))
}

/// Parse only as far as a raw tool call, leaving range checks to
/// [`validate_tool_call`]. Answers come back as `Ok(None)`.
pub fn parse_raw_tool_call(text: &str) -> Result<Option<RawToolCall>, ValidationError> {
    let (_, json) = split_emission(text)?;
    match parse_payload(json)? {
        Payload::Answer(_) => Ok(None),
        Payload::Call(raw) => Ok(Some(raw)),
    }
}

// ---------------------------------------------------------------------------
// Transcripts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    ToolResponse,
}

/// Where a returned view came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginContext {
    pub source_image_id: String,
    /// Requested box in the source view's frame.
    pub bbox: NormBox,
    /// The same window composed into the `image_0` frame.
    pub global_bbox: NormBox,
    /// Crop rectangle in scene pixels.
    pub pixel_rect: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_context: Option<OriginContext>,
    /// Evidence indices that became legible for the first time in this view.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub newly_legible: Vec<usize>,
}

impl ImageRef {
    pub fn pixel_rect(&self) -> PixelRect {
        self.origin_context
            .as_ref()
            .map(|o| o.pixel_rect)
            .unwrap_or_else(|| PixelRect::full(self.width, self.height))
    }

    pub fn global_bbox(&self) -> NormBox {
        self.origin_context
            .as_ref()
            .map(|o| o.global_bbox)
            .unwrap_or(NormBox::FULL)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    /// Raw text: the question prompt, the assistant emission, or the tool
    /// response banner.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub think: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl Turn {
    pub fn assistant(text: impl Into<String>) -> Self {
        let text = text.into();
        let think = split_emission(&text)
            .ok()
            .and_then(|(t, _)| t.map(str::to_owned));
        Self {
            role: Role::Assistant,
            text,
            think,
            image: None,
        }
    }

    /// The parsed action of an assistant turn, if it parses.
    pub fn action(&self) -> Option<Action> {
        match self.role {
            Role::Assistant => parse_action(&self.text).ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grade {
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub question_id: String,
    pub question: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<Grade>,
}

/// Banner for a user turn presenting `image_0`.
pub fn user_prompt(question: &str, width: u32, height: u32) -> String {
    format!(
        "[IMAGE_0] <metadata>{{\"image_id\": \"{ROOT_IMAGE}\", \"width\": {width}, \"height\": {height}}}</metadata>\nQuestion: \"{question}\""
    )
}

fn tool_response_banner(img: &ImageRef) -> String {
    let index = img.image_id.trim_start_matches("image_");
    let origin = img
        .origin_context
        .as_ref()
        .map(|o| {
            let b = o.bbox.to_array();
            format!(
                ", \"origin_context\": {{\"source_image_id\": \"{}\", \"bbox\": [{}, {}, {}, {}]}}",
                o.source_image_id, b[0], b[1], b[2], b[3]
            )
        })
        .unwrap_or_default();
    format!(
        "[IMAGE_{index}] <metadata>{{\"image_id\": \"{}\"{origin}}}</metadata>",
        img.image_id
    )
}

impl Transcript {
    pub fn new(question_id: impl Into<String>, question: impl Into<String>, width: u32, height: u32) -> Self {
        let question = question.into();
        Self {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            question_id: question_id.into(),
            turns: vec![Turn {
                role: Role::User,
                text: user_prompt(&question, width, height),
                think: None,
                image: Some(ImageRef {
                    image_id: ROOT_IMAGE.to_owned(),
                    width,
                    height,
                    origin_context: None,
                    newly_legible: Vec::new(),
                }),
            }],
            question,
            grade: None,
        }
    }

    pub fn push_assistant(&mut self, emission: impl Into<String>) {
        self.turns.push(Turn::assistant(emission));
    }

    pub fn push_tool_response(&mut self, image: ImageRef) {
        self.turns.push(Turn {
            role: Role::ToolResponse,
            text: tool_response_banner(&image),
            think: None,
            image: Some(image),
        });
    }

    /// All images in presentation order, `image_0` first.
    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.turns.iter().filter_map(|t| t.image.as_ref())
    }

    /// Executed tool calls: assistant tool-call turns answered by a tool response.
    pub fn executed_calls(&self) -> Vec<(ToolCall, &ImageRef)> {
        let mut out = Vec::new();
        for pair in self.turns.windows(2) {
            if pair[0].role != Role::Assistant || pair[1].role != Role::ToolResponse {
                continue;
            }
            if let (Some(Action::ToolCall(call)), Some(img)) = (pair[0].action(), pair[1].image.as_ref()) {
                out.push((call, img));
            }
        }
        out
    }

    /// `N_step`: the number of executed tool calls.
    pub fn n_step(&self) -> usize {
        self.executed_calls().len()
    }

    /// Windows of every executed call, composed into the `image_0` frame.
    pub fn executed_global_boxes(&self) -> Vec<NormBox> {
        self.executed_calls()
            .into_iter()
            .map(|(_, img)| img.global_bbox())
            .collect()
    }

    /// Final answer, when the last turn is an assistant answer.
    pub fn final_answer(&self) -> Option<String> {
        let last = self.turns.last()?;
        match last.action() {
            Some(Action::Answer { content }) => Some(content),
            _ => None,
        }
    }
}

/// 1 iff the transcript follows the conversation protocol end to end.
pub fn format_gate(t: &Transcript) -> u8 {
    u8::from(check_structure(t).is_ok())
}

/// The structural checks behind [`format_gate`], with the first violation.
pub fn check_structure(t: &Transcript) -> Result<(), ValidationError> {
    let first = t
        .turns
        .first()
        .ok_or_else(|| ValidationError::format("empty transcript"))?;
    if first.role != Role::User || first.image.as_ref().map(|i| i.image_id.as_str()) != Some(ROOT_IMAGE) {
        return Err(ValidationError::format("transcript must open with a user turn presenting image_0"));
    }
    let mut next_image = 1usize;
    let mut answered = false;
    for (i, turn) in t.turns.iter().enumerate().skip(1) {
        if answered {
            return Err(ValidationError::format("turns after the final answer"));
        }
        match turn.role {
            Role::User => {
                if turn.image.is_some() {
                    return Err(ValidationError::format("only the first user turn may present an image"));
                }
            }
            Role::Assistant => {
                let action = parse_action(&turn.text)?;
                let followed = t.turns.get(i + 1).map(|n| n.role) == Some(Role::ToolResponse);
                match action {
                    Action::ToolCall(_) if !followed => {
                        return Err(ValidationError::format(format!(
                            "tool call at turn {i} has no tool response"
                        )))
                    }
                    Action::Answer { .. } => answered = true,
                    Action::ToolCall(_) => {}
                }
            }
            Role::ToolResponse => {
                let prev_is_call = matches!(t.turns[i - 1].action(), Some(Action::ToolCall(_)));
                let img = turn
                    .image
                    .as_ref()
                    .ok_or_else(|| ValidationError::format("tool response without an image"))?;
                if !prev_is_call {
                    return Err(ValidationError::format("tool response not preceded by a tool call"));
                }
                if img.image_id != format!("image_{next_image}") {
                    return Err(ValidationError::format(format!(
                        "expected image_{next_image}, found {}",
                        img.image_id
                    )));
                }
                next_image += 1;
            }
        }
    }
    if !answered {
        return Err(ValidationError::format("transcript does not end in an answer"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-round validation
// ---------------------------------------------------------------------------

/// Views known to a transcript: ids, sizes, parentage and explored children.
#[derive(Debug, Clone)]
pub struct ViewHistory {
    views: Vec<ImageRef>,
    index: HashMap<String, usize>,
}

impl ViewHistory {
    pub fn from_transcript(t: &Transcript) -> Self {
        let views: Vec<ImageRef> = t.images().cloned().collect();
        let index = views
            .iter()
            .enumerate()
            .map(|(i, v)| (v.image_id.clone(), i))
            .collect();
        Self { views, index }
    }

    pub fn get(&self, id: &str) -> Option<&ImageRef> {
        self.index.get(id).map(|&i| &self.views[i])
    }

    pub fn most_recent(&self) -> &ImageRef {
        self.views.last().expect("history always holds image_0")
    }

    pub fn parent_of(&self, id: &str) -> Option<&ImageRef> {
        let origin = self.get(id)?.origin_context.as_ref()?;
        self.get(&origin.source_image_id)
    }

    /// Ancestors of `id`, nearest first, excluding `id` itself.
    pub fn ancestors(&self, id: &str) -> Vec<&ImageRef> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent_of(cur) {
            out.push(p);
            cur = &p.image_id;
        }
        out
    }

    /// Boxes already cropped out of `id`, in its own frame.
    pub fn explored_children(&self, id: &str) -> Vec<NormBox> {
        self.views
            .iter()
            .filter_map(|v| v.origin_context.as_ref())
            .filter(|o| o.source_image_id == id)
            .map(|o| o.bbox)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Appendix-A checks for one proposed zoom against the dialogue so far.
pub fn validate_tool_call(
    t: &Transcript,
    call: &RawToolCall,
    redundancy_iou: f64,
) -> Result<NormBox, ValidationError> {
    validate_against(&ViewHistory::from_transcript(t), call, redundancy_iou)
}

pub fn validate_against(
    history: &ViewHistory,
    call: &RawToolCall,
    redundancy_iou: f64,
) -> Result<NormBox, ValidationError> {
    let bbox = check_bbox(&call.bbox)?;

    let source = history.get(&call.source_image_id).ok_or_else(|| {
        ValidationError::execution(format!(
            "source image `{}` is not in the dialogue history",
            call.source_image_id
        ))
    })?;
    let px_w = f64::from(bbox.width()) * f64::from(source.width) / f64::from(GRID);
    let px_h = f64::from(bbox.height()) * f64::from(source.height) / f64::from(GRID);
    if px_w < 1.0 || px_h < 1.0 {
        return Err(ValidationError::execution(format!(
            "crop of {px_w:.2}x{px_h:.2} px on `{}` is below one pixel",
            source.image_id
        )));
    }

    let recent = history.most_recent();
    if source.image_id == recent.image_id {
        if bbox == NormBox::FULL {
            return Err(ValidationError::interaction(
                "re-cropping the full frame of the current view explores nothing new",
            ));
        }
        return Ok(bbox);
    }
    let is_ancestor = history
        .ancestors(&recent.image_id)
        .iter()
        .any(|a| a.image_id == source.image_id);
    if !is_ancestor {
        return Err(ValidationError::interaction(format!(
            "`{}` is neither the current view nor one of its ancestors",
            source.image_id
        )));
    }
    for sibling in history.explored_children(&source.image_id) {
        let overlap = iou(&bbox, &sibling);
        if overlap >= redundancy_iou {
            return Err(ValidationError::interaction(format!(
                "box overlaps an explored region of `{}` (IoU {overlap:.3})",
                source.image_id
            )));
        }
    }
    Ok(bbox)
}
