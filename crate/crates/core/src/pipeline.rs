//! Trajectory generation and quality control.
//!
//! An annotator proposes one emission per round; the pipeline parses and
//! validates it, re-prompts on failure (up to `retry_limit` times per round)
//! and executes valid zooms. Finished trajectories are scored against the
//! reference answer, deduplicated per question, and cleaned of rejected or
//! non-informative rounds before being written as demonstrations.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::geometry::NormBox;
use crate::policy::{catalog_index_of, featurize, Demo};
use crate::protocol::{
    parse_emission, render_emission, validate_tool_call, Action, RawToolCall, Role, ToolCall,
    Transcript, ValidationError, BEGIN_BOX, DEFAULT_REDUNDANCY_IOU,
};
use crate::rewards::cell_tag;
use crate::scenes::{
    is_legible, Category, EpisodeConfig, EpisodeState, Question, SceneRecord, SceneSpec, StepOutcome,
};

pub const SFT_SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the external annotator endpoint.
pub const ANNOTATOR_URL_ENV: &str = "ADAZOOM_ANNOTATOR_URL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotatorError {
    #[error("annotator unreachable: {0}")]
    Unreachable(String),
    #[error("annotator returned an invalid response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("trajectory for {0} has no final answer")]
    NoAnswer(String),
    #[error("replay of {question_id} failed at turn {turn}: {detail}")]
    Replay {
        question_id: String,
        turn: usize,
        detail: String,
    },
    #[error("question {0} is missing from the scene corpus")]
    UnknownQuestion(String),
}

/// What an annotator sees when asked for the next emission.
pub struct AnnotatorContext<'a> {
    pub state: &'a EpisodeState,
    /// 0 for the first attempt of a round, then 1, 2, … on re-prompts.
    pub attempt: usize,
    pub last_error: Option<&'a ValidationError>,
}

/// Produces assistant emissions; validity is enforced by the pipeline.
pub trait Annotator: Send + Sync {
    fn name(&self) -> &'static str;
    fn emit(&self, ctx: &AnnotatorContext<'_>, rng: &mut ChaCha8Rng) -> Result<String, AnnotatorError>;
}

/// Privileged annotator that navigates the grid toward unread evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedOracle {
    /// Probability of spending a round on a crop away from the evidence.
    pub noise: f64,
    /// Probability of emitting text that violates the protocol.
    pub malformed_rate: f64,
}

impl Default for ScriptedOracle {
    fn default() -> Self {
        Self {
            noise: 0.0,
            malformed_rate: 0.0,
        }
    }
}

fn point_cell(view: &crate::geometry::PixelRect, (cx, cy): (f64, f64)) -> Option<usize> {
    let inside = cx >= f64::from(view.left)
        && cx < f64::from(view.right())
        && cy >= f64::from(view.top)
        && cy < f64::from(view.bottom());
    inside.then(|| {
        let nx = (cx - f64::from(view.left)) / f64::from(view.width) * 1000.0;
        let ny = (cy - f64::from(view.top)) / f64::from(view.height) * 1000.0;
        NormBox::cell_of_point(nx, ny)
    })
}

fn zoom_emission(think: String, source: &str, cell: usize, why: &str) -> String {
    let action = Action::ToolCall(ToolCall {
        source_image_id: source.to_owned(),
        reason: format!("Zoom into the {} region of {source} {why}.", cell_tag(cell)),
        bbox: NormBox::grid_cell(cell),
    });
    render_emission(&think, &action)
}

impl ScriptedOracle {
    fn malformed(rng: &mut ChaCha8Rng) -> String {
        let variants = [
            format!("{BEGIN_BOX}{{\"type\": \"answer\", \"content\": \"A\"}}"),
            format!("I think the answer is A. {BEGIN_BOX}{{\"type\": \"answer\", \"content\": \"A\"}}<|end_of_box|>"),
            format!("{BEGIN_BOX}{{\"type\": \"tool_call\", \"tool_name\": \"zoom_in\"}}<|end_of_box|>"),
        ];
        variants.choose(rng).unwrap().clone()
    }

    fn answer(state: &EpisodeState) -> String {
        let q = &state.question;
        let seen: Vec<&str> = q
            .targets
            .iter()
            .map(|&t| state.scene.evidence[t].label.as_str())
            .collect();
        let read = seen.join("+");
        let letter = q
            .choices
            .iter()
            .position(|c| *c == read)
            .map(|i| q.options[i].clone())
            .unwrap_or_else(|| q.options[0].clone());
        render_emission(
            &format!("All required evidence is legible; it reads \"{read}\", which is option {letter}."),
            &Action::Answer { content: letter },
        )
    }

    fn next_zoom(&self, state: &EpisodeState, rng: &mut ChaCha8Rng) -> String {
        let target = *state
            .question
            .targets
            .iter()
            .find(|&&t| !state.read[t])
            .expect("called with unread evidence");
        let region = state.scene.evidence[target].region;
        let center = region.center();
        let current = state.current_view();

        if let Some(cell) = point_cell(&current.pixel_rect, center) {
            if rng.random::<f64>() < self.noise {
                let decoys: Vec<usize> = (0..9)
                    .filter(|&c| {
                        let rect = crate::scenes::child_rect(&current.pixel_rect, &NormBox::grid_cell(c));
                        !rect.intersects(&region)
                    })
                    .collect();
                if let Some(&d) = decoys.choose(rng) {
                    return zoom_emission(
                        format!("Evidence is not legible in {}; trying its {} region.", current.image_id, cell_tag(d)),
                        &current.image_id,
                        d,
                        "to search for the evidence",
                    );
                }
            }
            return zoom_emission(
                format!(
                    "The evidence is not yet legible in {}; it lies in the {} region.",
                    current.image_id,
                    cell_tag(cell)
                ),
                &current.image_id,
                cell,
                "to read the evidence",
            );
        }

        // Switch: the deepest ancestor containing the evidence with an
        // unexplored cell over it.
        let history = state.history();
        for anc in history.ancestors(&current.image_id) {
            let view = state.view(&anc.image_id).expect("ancestor is a view");
            let Some(cell) = point_cell(&view.pixel_rect, center) else {
                continue;
            };
            let raw = RawToolCall {
                source_image_id: view.image_id.clone(),
                reason: "probe".into(),
                bbox: NormBox::grid_cell(cell).to_array().map(f64::from),
            };
            if crate::protocol::validate_against(history, &raw, state.config.redundancy_iou).is_ok() {
                return zoom_emission(
                    format!(
                        "The remaining evidence lies outside {}; returning to {} to inspect its {} region.",
                        current.image_id,
                        view.image_id,
                        cell_tag(cell)
                    ),
                    &view.image_id,
                    cell,
                    "to read the remaining evidence",
                );
            }
        }
        // Nothing reachable: answer with what is known.
        Self::answer(state)
    }
}

impl Annotator for ScriptedOracle {
    fn name(&self) -> &'static str {
        "scripted_oracle"
    }

    fn emit(&self, ctx: &AnnotatorContext<'_>, rng: &mut ChaCha8Rng) -> Result<String, AnnotatorError> {
        if rng.random::<f64>() < self.malformed_rate {
            return Ok(Self::malformed(rng));
        }
        let state = ctx.state;
        if state.targets_read() {
            Ok(Self::answer(state))
        } else {
            Ok(self.next_zoom(state, rng))
        }
    }
}

#[derive(Debug, Serialize)]
struct ExternalTurn<'a> {
    role: Role,
    text: &'a str,
}

/// Request body sent to an external annotator.
#[derive(Debug, Serialize)]
struct ExternalRequest<'a> {
    question_id: &'a str,
    question: &'a str,
    turns: Vec<ExternalTurn<'a>>,
    attempt: usize,
    last_error: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExternalResponse {
    emission: String,
}

/// Annotator served over HTTP: POSTs the dialogue so far as JSON and expects
/// `{"emission": "..."}` back.
pub struct ExternalClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl ExternalClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    /// Client for the endpoint named by [`ANNOTATOR_URL_ENV`], if set.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var(ANNOTATOR_URL_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .map(|url| Self::new(url, timeout))
    }
}

impl Annotator for ExternalClient {
    fn name(&self) -> &'static str {
        "external"
    }

    fn emit(&self, ctx: &AnnotatorContext<'_>, _rng: &mut ChaCha8Rng) -> Result<String, AnnotatorError> {
        let t = &ctx.state.transcript;
        let body = ExternalRequest {
            question_id: &t.question_id,
            question: &t.question,
            turns: t
                .turns
                .iter()
                .map(|turn| ExternalTurn {
                    role: turn.role,
                    text: &turn.text,
                })
                .collect(),
            attempt: ctx.attempt,
            last_error: ctx.last_error.map(ToString::to_string),
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| AnnotatorError::Unreachable(e.to_string()))?;
        let parsed: ExternalResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| AnnotatorError::BadResponse(e.to_string()))?;
        Ok(parsed.emission)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub max_rounds: usize,
    pub retry_limit: usize,
    pub redundancy_iou: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            retry_limit: 2,
            redundancy_iou: DEFAULT_REDUNDANCY_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub round: usize,
    pub attempt: usize,
    /// Index of the rejected assistant turn in the raw transcript.
    pub turn: usize,
    pub error: ValidationError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub question_id: String,
    pub generation: usize,
    pub transcript: Transcript,
    pub rejections: Vec<Rejection>,
    /// Re-prompts spent in each executed round, answer round included.
    pub retries: Vec<usize>,
    pub status: TrajectoryStatus,
}

impl RawTrajectory {
    pub fn is_completed(&self) -> bool {
        self.status == TrajectoryStatus::Completed
    }

    pub fn n_calls(&self) -> usize {
        self.transcript.n_step()
    }
}

/// Run the annotate → parse → validate → execute loop for one question.
pub fn generate_trajectory(
    annotator: &dyn Annotator,
    scene: &SceneSpec,
    question: &Question,
    cfg: &GenerationConfig,
    generation: usize,
    rng: &mut ChaCha8Rng,
) -> RawTrajectory {
    let episode = EpisodeConfig {
        round_limit: cfg.max_rounds.max(1),
        redundancy_iou: cfg.redundancy_iou,
        max_rejections: usize::MAX,
    };
    let mut state = EpisodeState::new(scene.clone(), question.clone(), episode);
    let mut rejections = Vec::new();
    let mut retries = Vec::new();
    let mut status = TrajectoryStatus::Completed;

    'rounds: while !state.terminal {
        let mut last_error: Option<ValidationError> = None;
        for attempt in 0..=cfg.retry_limit {
            let ctx = AnnotatorContext {
                state: &state,
                attempt,
                last_error: last_error.as_ref(),
            };
            let text = match annotator.emit(&ctx, rng) {
                Ok(t) => t,
                Err(e) => {
                    status = TrajectoryStatus::Failed { reason: e.to_string() };
                    break 'rounds;
                }
            };
            let turn = state.transcript.turns.len();
            let outcome = match parse_emission(&text) {
                Ok((_, action)) => state.step_with_text(text, &action),
                Err(e) => state.record_unparsable(text, e),
            }
            .expect("state is live inside the loop");
            match outcome {
                StepOutcome::Rejected(error) => {
                    rejections.push(Rejection {
                        round: state.round,
                        attempt,
                        turn,
                        error: error.clone(),
                    });
                    last_error = Some(error);
                }
                StepOutcome::Observed(_) | StepOutcome::Terminal { .. } => {
                    retries.push(attempt);
                    continue 'rounds;
                }
            }
        }
        status = TrajectoryStatus::Failed {
            reason: format!(
                "round {} abandoned after {} rejected emissions",
                state.round,
                cfg.retry_limit + 1
            ),
        };
        break;
    }
    if status == TrajectoryStatus::Completed && state.transcript.final_answer().is_none() {
        status = TrajectoryStatus::Failed {
            reason: format!("no answer within {} rounds", cfg.max_rounds),
        };
    }
    RawTrajectory {
        question_id: question.question_id.clone(),
        generation,
        transcript: state.transcript,
        rejections,
        retries,
        status,
    }
}

/// Grades a predicted answer against the reference on 0–5.
pub trait AnswerScorer: Send + Sync {
    fn score(&self, prediction: &str, reference: &str) -> u8;
}

/// Multiple-choice scorer: 5 when the normalized letters match, else 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChoiceScorer;

impl AnswerScorer for ChoiceScorer {
    fn score(&self, prediction: &str, reference: &str) -> u8 {
        score_answer(prediction, reference)
    }
}

pub fn score_answer(prediction: &str, reference: &str) -> u8 {
    let norm = |s: &str| s.trim().to_uppercase();
    if norm(prediction) == norm(reference) {
        5
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub raw: RawTrajectory,
    pub prediction: String,
    pub reference: String,
    pub score: u8,
}

impl ScoredSample {
    pub fn question_id(&self) -> &str {
        &self.raw.question_id
    }
}

pub fn score_trajectory(raw: RawTrajectory, question: &Question, scorer: &dyn AnswerScorer) -> Option<ScoredSample> {
    let prediction = raw.transcript.final_answer()?;
    let score = scorer.score(&prediction, &question.ground_truth).min(5);
    Some(ScoredSample {
        raw,
        prediction,
        reference: question.ground_truth.clone(),
        score,
    })
}

/// Best sample per question (score, then fewest calls, then earliest
/// generation), keeping only scores at or above `threshold`. Output is
/// ordered by question id.
pub fn quality_filter(samples: &[ScoredSample], threshold: u8) -> Vec<ScoredSample> {
    let mut best: BTreeMap<&str, &ScoredSample> = BTreeMap::new();
    let key = |s: &ScoredSample| (std::cmp::Reverse(s.score), s.raw.n_calls(), s.raw.generation);
    for s in samples {
        best.entry(s.question_id())
            .and_modify(|cur| {
                if key(s) < key(cur) {
                    *cur = s;
                }
            })
            .or_insert(s);
    }
    best.into_values()
        .filter(|s| s.score >= threshold)
        .cloned()
        .collect()
}

/// Drop rejected emissions and rounds that revealed no new target evidence
/// and have no retained descendants, then replay the rest so image ids are
/// dense and every call is re-validated.
pub fn clean_transcript(t: &Transcript, scene: &SceneSpec, question: &Question, redundancy_iou: f64) -> Result<Transcript, PipelineError> {
    if t.final_answer().is_none() {
        return Err(PipelineError::NoAnswer(t.question_id.clone()));
    }
    struct Executed {
        think: String,
        call: ToolCall,
        image_id: String,
    }
    let mut executed: Vec<Executed> = Vec::new();
    for pair in t.turns.windows(2) {
        if pair[0].role != Role::Assistant || pair[1].role != Role::ToolResponse {
            continue;
        }
        if let (Some(Action::ToolCall(call)), Some(img)) = (pair[0].action(), &pair[1].image) {
            executed.push(Executed {
                think: pair[0].think.clone().unwrap_or_default(),
                call,
                image_id: img.image_id.clone(),
            });
        }
    }

    // Which executed views first make some target legible.
    let images: HashMap<&str, _> = t.images().map(|i| (i.image_id.as_str(), i)).collect();
    let mut read: Vec<bool> = question
        .targets
        .iter()
        .map(|&i| is_legible(&scene.evidence[i], &scene.frame(), scene.width, scene.height))
        .collect();
    let mut informative = vec![false; executed.len()];
    for (k, e) in executed.iter().enumerate() {
        let rect = images[e.image_id.as_str()].pixel_rect();
        for (j, &ti) in question.targets.iter().enumerate() {
            if !read[j] && is_legible(&scene.evidence[ti], &rect, scene.width, scene.height) {
                read[j] = true;
                informative[k] = true;
            }
        }
    }
    let mut keep = informative.clone();
    for k in (0..executed.len()).rev() {
        if keep[k] {
            let parent = &executed[k].call.source_image_id;
            if let Some(p) = executed.iter().position(|e| &e.image_id == parent) {
                keep[p] = true;
            }
        }
    }

    let episode = EpisodeConfig {
        round_limit: usize::MAX,
        redundancy_iou,
        max_rejections: 0,
    };
    let mut state = EpisodeState::new(scene.clone(), question.clone(), episode);
    let mut ids: HashMap<String, String> = HashMap::from([("image_0".to_owned(), "image_0".to_owned())]);
    let replay_err = |turn: usize, detail: String| PipelineError::Replay {
        question_id: t.question_id.clone(),
        turn,
        detail,
    };
    for (k, e) in executed.iter().enumerate().filter(|(k, _)| keep[*k]) {
        let source = ids
            .get(&e.call.source_image_id)
            .cloned()
            .ok_or_else(|| replay_err(k, format!("source {} was dropped", e.call.source_image_id)))?;
        let action = Action::ToolCall(ToolCall {
            source_image_id: source,
            ..e.call.clone()
        });
        match state.step(&e.think, &action).map_err(|x| replay_err(k, x.to_string()))? {
            StepOutcome::Observed(_) => {}
            other => return Err(replay_err(k, format!("{other:?}"))),
        }
        ids.insert(e.image_id.clone(), state.current_view().image_id.clone());
    }
    let last = t.turns.last().expect("answered transcripts are non-empty");
    let answer = last.action().expect("final answer parses");
    state
        .step(last.think.as_deref().unwrap_or_default(), &answer)
        .map_err(|x| replay_err(executed.len(), x.to_string()))?;
    Ok(state.transcript)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub schema_version: u32,
    pub question_id: String,
    pub scene_id: String,
    pub category: Category,
    pub ground_truth: String,
    pub generation: usize,
    pub score: u8,
    pub depth: usize,
    pub transcript: Transcript,
}

impl SftRecord {
    pub fn n_calls(&self) -> usize {
        self.transcript.n_step()
    }
}

pub fn clean_trajectory(sample: &ScoredSample, scene: &SceneSpec, question: &Question, redundancy_iou: f64) -> Result<SftRecord, PipelineError> {
    let transcript = clean_transcript(&sample.raw.transcript, scene, question, redundancy_iou)?;
    let depth = 1 + transcript.n_step();
    Ok(SftRecord {
        schema_version: SFT_SCHEMA_VERSION,
        question_id: question.question_id.clone(),
        scene_id: scene.scene_id.clone(),
        category: question.category,
        ground_truth: question.ground_truth.clone(),
        generation: sample.raw.generation,
        score: sample.score,
        depth,
        transcript,
    })
}

/// Zoom-chain depth: one plus the number of executed calls.
pub fn zoom_chain_depth(record: &SftRecord) -> usize {
    1 + record.n_calls()
}

/// Re-check every executed call against its own prefix, plus the format gate.
pub fn replay_check(t: &Transcript, redundancy_iou: f64) -> Result<(), ValidationError> {
    for (i, pair) in t.turns.windows(2).enumerate() {
        if pair[0].role == Role::Assistant && pair[1].role == Role::ToolResponse {
            let prefix = Transcript {
                turns: t.turns[..=i].to_vec(),
                ..t.clone()
            };
            let call = pair[0]
                .action()
                .and_then(|a| a.as_tool_call().cloned())
                .ok_or_else(|| ValidationError::format(format!("turn {i} is not a tool call")))?;
            validate_tool_call(&prefix, &RawToolCall::from(&call), redundancy_iou)?;
        }
    }
    crate::protocol::check_structure(t)
}

/// Catalog indices of a record's assistant actions; `None` where an action
/// has no catalog equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionIndexRecord {
    pub question_id: String,
    pub actions: Vec<Option<usize>>,
}

/// Replay a clean transcript, yielding each decision's features and catalog index.
pub fn replay_decisions(t: &Transcript, scene: &SceneSpec, question: &Question, episode: EpisodeConfig) -> Result<Vec<(crate::policy::FeatureVector, Option<usize>)>, PipelineError> {
    let mut state = EpisodeState::new(scene.clone(), question.clone(), EpisodeConfig { max_rejections: 0, ..episode });
    let mut out = Vec::new();
    for (i, turn) in t.turns.iter().enumerate() {
        if turn.role != Role::Assistant {
            continue;
        }
        let action = turn.action().ok_or_else(|| PipelineError::Replay {
            question_id: t.question_id.clone(),
            turn: i,
            detail: "assistant turn does not parse".into(),
        })?;
        out.push((featurize(&state), catalog_index_of(&state, &action)));
        if state.terminal {
            break;
        }
        let step = state.step("", &action).map_err(|e| PipelineError::Replay {
            question_id: t.question_id.clone(),
            turn: i,
            detail: e.to_string(),
        })?;
        if let StepOutcome::Rejected(e) = step {
            return Err(PipelineError::Replay {
                question_id: t.question_id.clone(),
                turn: i,
                detail: e.to_string(),
            });
        }
    }
    Ok(out)
}

/// Demonstrations for cloning: representable decisions of each record.
pub fn demos_from_records(records: &[SftRecord], corpus: &HashMap<String, &SceneRecord>, episode: EpisodeConfig) -> Result<Vec<Demo>, PipelineError> {
    let mut demos = Vec::new();
    for r in records {
        let sr = corpus
            .get(&r.question_id)
            .ok_or_else(|| PipelineError::UnknownQuestion(r.question_id.clone()))?;
        for (x, a) in replay_decisions(&r.transcript, &sr.scene, &sr.question, episode)? {
            if let Some(a) = a {
                demos.push((x, a));
            }
        }
    }
    Ok(demos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub generation: GenerationConfig,
    pub qc_threshold: u8,
    pub generations_per_question: usize,
    pub oracle: ScriptedOracle,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            qc_threshold: 4,
            generations_per_question: 2,
            oracle: ScriptedOracle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcReport {
    pub questions: usize,
    pub generated: usize,
    pub failed: usize,
    pub scored: usize,
    pub retained: usize,
    pub dropped_below_threshold: usize,
    pub duplicates_removed: usize,
    pub rejected_emissions: usize,
    /// Count of samples per score 0..=5.
    pub score_histogram: [usize; 6],
    /// Retained records at depth 1, 2 and 3 or more.
    pub depth_histogram: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataOutput {
    pub records: Vec<SftRecord>,
    pub action_indices: Vec<ActionIndexRecord>,
    pub report: QcReport,
}

/// Generate, score, filter and clean demonstrations for a corpus.
pub fn run_pipeline(
    corpus: &[SceneRecord],
    annotator: &dyn Annotator,
    scorer: &dyn AnswerScorer,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<DataOutput, PipelineError> {
    let gens = cfg.generations_per_question.max(1);
    let raws: Vec<RawTrajectory> = (0..corpus.len() * gens)
        .into_par_iter()
        .map(|k| {
            let (qi, g) = (k / gens, k % gens);
            let rec = &corpus[qi];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[qi as u64, g as u64]));
            generate_trajectory(annotator, &rec.scene, &rec.question, &cfg.generation, g, &mut rng)
        })
        .collect();

    let by_id: HashMap<&str, &SceneRecord> = corpus.iter().map(|r| (r.question.question_id.as_str(), r)).collect();
    let mut report = QcReport {
        questions: corpus.len(),
        generated: raws.len(),
        rejected_emissions: raws.iter().map(|r| r.rejections.len()).sum(),
        ..QcReport::default()
    };
    let mut scored = Vec::new();
    for raw in raws {
        if !raw.is_completed() {
            report.failed += 1;
            continue;
        }
        let q = &by_id[raw.question_id.as_str()].question;
        if let Some(s) = score_trajectory(raw, q, scorer) {
            report.score_histogram[usize::from(s.score)] += 1;
            scored.push(s);
        } else {
            report.failed += 1;
        }
    }
    report.scored = scored.len();
    let unique = scored
        .iter()
        .map(ScoredSample::question_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    report.duplicates_removed = scored.len() - unique;
    let kept = quality_filter(&scored, cfg.qc_threshold);
    report.dropped_below_threshold = unique - kept.len();

    let records = kept
        .par_iter()
        .map(|s| {
            let r = by_id[s.question_id()];
            clean_trajectory(s, &r.scene, &r.question, cfg.generation.redundancy_iou)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let episode = EpisodeConfig {
        round_limit: cfg.generation.max_rounds,
        redundancy_iou: cfg.generation.redundancy_iou,
        max_rejections: 0,
    };
    let action_indices = records
        .iter()
        .map(|r| {
            let sr = by_id[r.question_id.as_str()];
            let decisions = replay_decisions(&r.transcript, &sr.scene, &sr.question, episode)?;
            Ok(ActionIndexRecord {
                question_id: r.question_id.clone(),
                actions: decisions.into_iter().map(|(_, a)| a).collect(),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    report.retained = records.len();
    for r in &records {
        report.depth_histogram[(r.depth - 1).min(2)] += 1;
    }
    Ok(DataOutput {
        records,
        action_indices,
        report,
    })
}
