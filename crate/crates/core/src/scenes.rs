//! Synthetic ultra-high-resolution scenes and the zoom episode state machine.
//!
//! Scenes are symbolic: a large virtual canvas holding a handful of labelled
//! evidence rectangles. A label can be read only from a view that overlaps
//! its rectangle at a magnification of at least its legibility scale, so
//! small evidence on a large canvas forces the agent to zoom.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{from_pixels, to_pixels, NormBox, PixelRect, TransitionKind};
use crate::geometry::classify_transition;
use crate::protocol::{
    render_emission, validate_against, Action, Grade, ImageRef, OriginContext, RawToolCall,
    Transcript, ValidationError, ViewHistory, DEFAULT_REDUNDANCY_IOU, ROOT_IMAGE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Global,
    Regional,
    Tiny,
    MultiHop,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Global,
        Category::Regional,
        Category::Tiny,
        Category::MultiHop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Global => "Global",
            Category::Regional => "Regional",
            Category::Tiny => "Tiny",
            Category::MultiHop => "MultiHop",
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub region: PixelRect,
    pub label: String,
    pub legibility_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub width: u32,
    pub height: u32,
    pub evidence: Vec<EvidenceItem>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn frame(&self) -> PixelRect {
        PixelRect::full(self.width, self.height)
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// Answer letters in option order.
pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub category: Category,
    pub prompt: String,
    /// Indices into the scene's evidence list.
    pub targets: Vec<usize>,
    /// Option letters, `A` first.
    pub options: Vec<String>,
    /// The label text behind each option letter.
    pub choices: Vec<String>,
    /// Correct option letter.
    pub ground_truth: String,
}

/// One record of a scene corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: SceneSpec,
    pub question: Question,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryMix {
    pub global: f64,
    pub regional: f64,
    pub tiny: f64,
    pub multihop: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self {
            global: 0.25,
            regional: 0.25,
            tiny: 0.25,
            multihop: 0.25,
        }
    }
}

impl CategoryMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.global, self.regional, self.tiny, self.multihop]
    }

    pub fn only(category: Category) -> Self {
        let mut w = [0.0; 4];
        w[category.index()] = 1.0;
        Self {
            global: w[0],
            regional: w[1],
            tiny: w[2],
            multihop: w[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub mix: CategoryMix,
    /// Upper bound on tiny evidence area as a fraction of the scene area.
    pub sparsity: f64,
    pub tiny_scale: f64,
    pub regional_scale: f64,
    /// Distractor items per scene.
    pub clutter: usize,
    pub option_count: usize,
    /// Probability that the two MultiHop items share a top-level grid cell.
    pub multihop_same_cell: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 8192,
            height: 8192,
            mix: CategoryMix::default(),
            sparsity: 1e-4,
            tiny_scale: 8.0,
            regional_scale: 2.5,
            clutter: 6,
            option_count: 4,
            multihop_same_cell: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable scene config: {0}")]
    Unsatisfiable(String),
}

const MIN_TINY_SIDE: u32 = 16;

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("scene size {}x{} is empty", self.width, self.height));
        }
        let w = self.mix.weights();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("category mix weights must be non-negative".into());
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("category mix sums to {total}, expected 1"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad(format!("sparsity {} must lie in (0, 1]", self.sparsity));
        }
        if !(self.tiny_scale >= 1.0 && self.regional_scale >= 1.0) {
            return bad("legibility scales must be >= 1".into());
        }
        if !(2..=OPTION_LETTERS.len()).contains(&self.option_count) {
            return bad(format!("option_count {} must be in 2..=4", self.option_count));
        }
        if !(0.0..=1.0).contains(&self.multihop_same_cell) {
            return bad("multihop_same_cell must be a probability".into());
        }
        Ok(())
    }

    /// Largest tiny side length allowed by the sparsity bound.
    pub fn max_tiny_side(&self) -> u32 {
        (self.sparsity * f64::from(self.width) * f64::from(self.height))
            .sqrt()
            .floor() as u32
    }
}

const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "orange", "gray"];
const OBJECTS: [&str; 8] = ["car", "boat", "plane", "tank", "truck", "crane", "drone", "bus"];
const LANDCOVER: [&str; 8] = [
    "forest", "farmland", "harbor", "desert", "urban", "wetland", "airport", "quarry",
];
const DISTRICTS: [&str; 8] = [
    "stadium", "rail-yard", "solar-farm", "campus", "parking-lot", "dock", "reservoir", "depot",
];

/// Ways to walk the 3×3 grid: row-major cell indices from the root down.
type CellPath = Vec<usize>;

/// Pixel rectangle reached by following `path` from the full frame.
pub fn path_rect(path: &[usize], width: u32, height: u32) -> PixelRect {
    let mut rect = PixelRect::full(width, height);
    for &cell in path {
        rect = child_rect(&rect, &NormBox::grid_cell(cell));
    }
    rect
}

/// Crop `local` out of a view occupying `parent` in scene pixels.
pub fn child_rect(parent: &PixelRect, local: &NormBox) -> PixelRect {
    to_pixels(local, parent.width, parent.height)
        .expect("views are never empty")
        .offset(parent.left, parent.top)
}

pub fn magnification(view: &PixelRect, width: u32, height: u32) -> f64 {
    (f64::from(width) / f64::from(view.width)).min(f64::from(height) / f64::from(view.height))
}

/// Draw a grid path just deep enough to magnify by `scale`.
fn path_for_scale(rng: &mut ChaCha8Rng, scale: f64, cfg: &SceneConfig, first: Option<usize>) -> (CellPath, PixelRect) {
    let mut path = Vec::new();
    let mut rect = PixelRect::full(cfg.width, cfg.height);
    loop {
        if (!path.is_empty() || scale <= 1.0) && magnification(&rect, cfg.width, cfg.height) >= scale {
            return (path, rect);
        }
        let cell = match (path.is_empty(), first) {
            (true, Some(c)) => c,
            _ => rng.random_range(0..9),
        };
        path.push(cell);
        rect = child_rect(&rect, &NormBox::grid_cell(cell));
    }
}

/// A square-ish item inside `cell`, kept one pixel clear of its edges.
fn place_inside(rng: &mut ChaCha8Rng, cell: &PixelRect, min_side: u32, max_side: u32) -> Result<PixelRect, SceneError> {
    let room_w = cell.width.saturating_sub(2);
    let room_h = cell.height.saturating_sub(2);
    let hi = max_side.min(room_w).min(room_h);
    if hi < min_side.max(1) {
        return Err(SceneError::Unsatisfiable(format!(
            "evidence of side >= {min_side} px does not fit a {}x{} px view",
            cell.width, cell.height
        )));
    }
    let w = rng.random_range(min_side.max(1)..=hi);
    let h = rng.random_range(min_side.max(1)..=hi);
    let left = cell.left + 1 + rng.random_range(0..=room_w - w);
    let top = cell.top + 1 + rng.random_range(0..=room_h - h);
    Ok(PixelRect::new(left, top, w, h))
}

fn tiny_item(rng: &mut ChaCha8Rng, cfg: &SceneConfig, first: Option<usize>, avoid: Option<&[usize]>) -> Result<(EvidenceItem, CellPath), SceneError> {
    let max_side = cfg.max_tiny_side();
    if max_side < MIN_TINY_SIDE {
        return Err(SceneError::Unsatisfiable(format!(
            "sparsity bound allows at most {max_side} px tiny items, below the {MIN_TINY_SIDE} px minimum"
        )));
    }
    // Re-draw until the path differs from `avoid`; distinct paths keep the
    // two MultiHop items disjoint.
    for _ in 0..64 {
        let (path, cell) = path_for_scale(rng, cfg.tiny_scale, cfg, first);
        if avoid.is_some_and(|a| a.len() >= 2 && path.len() >= 2 && a[..2] == path[..2]) {
            continue;
        }
        let region = place_inside(rng, &cell, MIN_TINY_SIDE, max_side)?;
        let label = format!("{}-{}", COLORS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap());
        return Ok((
            EvidenceItem {
                region,
                label,
                legibility_scale: cfg.tiny_scale,
            },
            path,
        ));
    }
    Err(SceneError::Unsatisfiable("could not separate MultiHop evidence".into()))
}

fn distinct_choices(rng: &mut ChaCha8Rng, truth: &str, n: usize, mut draw: impl FnMut(&mut ChaCha8Rng) -> String) -> Vec<String> {
    let mut out = vec![truth.to_owned()];
    while out.len() < n {
        let c = draw(rng);
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.shuffle(rng);
    out
}

fn random_label(rng: &mut ChaCha8Rng) -> String {
    format!("{}-{}", COLORS.choose(rng).unwrap(), OBJECTS.choose(rng).unwrap())
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(SceneSpec, Question), SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = cfg.mix.weights();
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    let mut category = *Category::ALL
        .iter()
        .rev()
        .find(|c| weights[c.index()] > 0.0)
        .expect("mix has positive mass");
    for c in Category::ALL {
        acc += weights[c.index()];
        if draw < acc {
            category = c;
            break;
        }
    }
    build(seed, cfg, category, &mut rng)
}

/// Generate a question of a fixed category, ignoring the configured mix.
pub fn generate_for(seed: u64, cfg: &SceneConfig, category: Category) -> Result<(SceneSpec, Question), SceneError> {
    let mut cfg = cfg.clone();
    cfg.mix = CategoryMix::only(category);
    generate_scene(seed, &cfg)
}

fn build(seed: u64, cfg: &SceneConfig, category: Category, rng: &mut ChaCha8Rng) -> Result<(SceneSpec, Question), SceneError> {
    let (w, h) = (cfg.width, cfg.height);
    let n = cfg.option_count;
    let mut evidence = Vec::new();
    let (prompt, truth, choices): (String, String, Vec<String>);
    match category {
        Category::Global => {
            let label = LANDCOVER.choose(rng).unwrap().to_string();
            evidence.push(EvidenceItem {
                region: PixelRect::full(w, h),
                label: label.clone(),
                legibility_scale: 1.0,
            });
            prompt = "What is the dominant land cover of this scene?".into();
            choices = distinct_choices(rng, &label, n, |r| LANDCOVER.choose(r).unwrap().to_string());
            truth = label;
        }
        Category::Regional => {
            let (_, cell) = path_for_scale(rng, cfg.regional_scale, cfg, None);
            let min_side = (cell.width.min(cell.height) / 8).max(1);
            let max_side = cell.width.min(cell.height) / 2;
            let region = place_inside(rng, &cell, min_side, max_side)?;
            let label = DISTRICTS.choose(rng).unwrap().to_string();
            evidence.push(EvidenceItem {
                region,
                label: label.clone(),
                legibility_scale: cfg.regional_scale,
            });
            prompt = "Which facility occupies the district shown in this scene?".into();
            choices = distinct_choices(rng, &label, n, |r| DISTRICTS.choose(r).unwrap().to_string());
            truth = label;
        }
        Category::Tiny => {
            let (item, _) = tiny_item(rng, cfg, None, None)?;
            let label = item.label.clone();
            evidence.push(item);
            prompt = "What is the small object visible in this scene?".into();
            choices = distinct_choices(rng, &label, n, random_label);
            truth = label;
        }
        Category::MultiHop => {
            let same = rng.random_bool(cfg.multihop_same_cell);
            let first_cell = rng.random_range(0..9);
            let (a, path_a) = tiny_item(rng, cfg, Some(first_cell), None)?;
            let second_cell = if same {
                first_cell
            } else {
                let mut c = rng.random_range(0..8);
                if c >= first_cell {
                    c += 1;
                }
                c
            };
            let (b, _) = tiny_item(rng, cfg, Some(second_cell), Some(&path_a))?;
            let label = format!("{}+{}", a.label, b.label);
            let (la, lb) = (a.label.clone(), b.label.clone());
            evidence.push(a);
            evidence.push(b);
            prompt = "Which two small objects appear in this scene?".into();
            // Distractors share one half of the answer, so both items must be read.
            let mut opts = vec![label.clone()];
            while opts.len() < n {
                let c = match opts.len() % 3 {
                    1 => format!("{la}+{}", random_label(rng)),
                    2 => format!("{}+{lb}", random_label(rng)),
                    _ => format!("{}+{}", random_label(rng), random_label(rng)),
                };
                if !opts.contains(&c) {
                    opts.push(c);
                }
            }
            opts.shuffle(rng);
            choices = opts;
            truth = label;
        }
    }
    let targets: Vec<usize> = (0..evidence.len()).collect();
    let max_side = cfg.max_tiny_side().max(MIN_TINY_SIDE);
    for _ in 0..cfg.clutter {
        let side_w = rng.random_range(1..=max_side.min(w));
        let side_h = rng.random_range(1..=max_side.min(h));
        let region = PixelRect::new(
            rng.random_range(0..=w - side_w),
            rng.random_range(0..=h - side_h),
            side_w,
            side_h,
        );
        evidence.push(EvidenceItem {
            region,
            label: format!("clutter-{}", OBJECTS.choose(rng).unwrap()),
            legibility_scale: cfg.tiny_scale,
        });
    }
    let letter = choices.iter().position(|c| *c == truth).expect("truth among choices");
    let scene = SceneSpec {
        scene_id: format!("scene-{seed:016x}"),
        width: w,
        height: h,
        evidence,
        seed,
    };
    let question = Question {
        question_id: format!("q-{seed:016x}"),
        category,
        prompt,
        targets,
        options: OPTION_LETTERS[..n].iter().map(|s| s.to_string()).collect(),
        choices,
        ground_truth: OPTION_LETTERS[letter].to_owned(),
    };
    Ok((scene, question))
}

/// Whether `item` can be read from a view occupying `view` in scene pixels.
pub fn is_legible(item: &EvidenceItem, view: &PixelRect, width: u32, height: u32) -> bool {
    item.region.intersects(view) && magnification(view, width, height) >= item.legibility_scale
}

/// Probability that the tool-free reference policy answers correctly.
pub fn base_solve_probability(scene: &SceneSpec, question: &Question) -> f64 {
    let frame = scene.frame();
    let all_legible = question
        .targets
        .iter()
        .all(|&i| is_legible(&scene.evidence[i], &frame, scene.width, scene.height));
    if all_legible {
        1.0
    } else {
        1.0 / question.options.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub round_limit: usize,
    pub redundancy_iou: f64,
    /// Rejected calls tolerated before the episode is terminated.
    pub max_rejections: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            round_limit: 5,
            redundancy_iou: DEFAULT_REDUNDANCY_IOU,
            max_rejections: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub image_id: String,
    pub source_image_id: Option<String>,
    /// Box in the parent's frame.
    pub local_box: NormBox,
    /// Box in the `image_0` frame.
    pub global_box: NormBox,
    pub pixel_rect: PixelRect,
}

impl View {
    pub fn width(&self) -> u32 {
        self.pixel_rect.width
    }
    pub fn height(&self) -> u32 {
        self.pixel_rect.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visibility {
    pub index: usize,
    pub legible: bool,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: String,
    pub global_box: NormBox,
    pub pixel_rect: PixelRect,
    pub magnification: f64,
    pub visibility: Vec<Visibility>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Observed(Observation),
    Rejected(ValidationError),
    Terminal { correct: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EpisodeError {
    #[error("episode is already terminal")]
    Terminal,
}

#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub scene: SceneSpec,
    pub question: Question,
    pub config: EpisodeConfig,
    pub views: Vec<View>,
    /// Index of the most recent view.
    pub current: usize,
    pub round: usize,
    pub rejections: usize,
    pub terminal: bool,
    pub answer: Option<String>,
    /// Evidence items read in some executed view so far.
    pub read: Vec<bool>,
    pub last_transition: Option<TransitionKind>,
    pub transcript: Transcript,
    history: ViewHistory,
}

impl EpisodeState {
    pub fn new(scene: SceneSpec, question: Question, config: EpisodeConfig) -> Self {
        let root = View {
            image_id: ROOT_IMAGE.to_owned(),
            source_image_id: None,
            local_box: NormBox::FULL,
            global_box: NormBox::FULL,
            pixel_rect: scene.frame(),
        };
        let transcript = Transcript::new(&question.question_id, render_question(&question), scene.width, scene.height);
        let history = ViewHistory::from_transcript(&transcript);
        let mut state = Self {
            read: vec![false; scene.evidence.len()],
            scene,
            question,
            config,
            views: vec![root],
            current: 0,
            round: 0,
            rejections: 0,
            terminal: false,
            answer: None,
            last_transition: None,
            transcript,
            history,
        };
        state.mark_read(0);
        state
    }

    pub fn current_view(&self) -> &View {
        &self.views[self.current]
    }

    pub fn view(&self, image_id: &str) -> Option<&View> {
        self.views.iter().find(|v| v.image_id == image_id)
    }

    pub fn parent(&self, view: &View) -> Option<&View> {
        view.source_image_id.as_deref().and_then(|id| self.view(id))
    }

    pub fn history(&self) -> &ViewHistory {
        &self.history
    }

    /// Evidence newly read in view `idx`; marks it read.
    fn mark_read(&mut self, idx: usize) -> Vec<usize> {
        let view = self.views[idx].pixel_rect;
        let mut fresh = Vec::new();
        for (i, item) in self.scene.evidence.iter().enumerate() {
            if !self.read[i] && is_legible(item, &view, self.scene.width, self.scene.height) {
                self.read[i] = true;
                fresh.push(i);
            }
        }
        fresh
    }

    pub fn observe(&self) -> Observation {
        let v = self.current_view();
        let (w, h) = (self.scene.width, self.scene.height);
        Observation {
            image_id: v.image_id.clone(),
            global_box: v.global_box,
            pixel_rect: v.pixel_rect,
            magnification: magnification(&v.pixel_rect, w, h),
            visibility: self
                .scene
                .evidence
                .iter()
                .enumerate()
                .map(|(index, item)| {
                    let legible = is_legible(item, &v.pixel_rect, w, h);
                    Visibility {
                        index,
                        legible,
                        label: legible.then(|| item.label.clone()),
                    }
                })
                .collect(),
        }
    }

    /// Whether every target has been read in some executed view.
    pub fn targets_read(&self) -> bool {
        self.question.targets.iter().all(|&i| self.read[i])
    }

    /// Apply a parsed action, recording it under `think` in the transcript.
    pub fn step(&mut self, think: &str, action: &Action) -> Result<StepOutcome, EpisodeError> {
        let emission = render_emission(think, action);
        self.step_with_text(emission, action)
    }

    /// Apply an action whose raw emission text is `emission`.
    pub fn step_with_text(&mut self, emission: String, action: &Action) -> Result<StepOutcome, EpisodeError> {
        if self.terminal {
            return Err(EpisodeError::Terminal);
        }
        let call = match action {
            Action::Answer { content } => {
                self.transcript.push_assistant(emission);
                return Ok(self.finish(Some(content.clone())));
            }
            Action::ToolCall(call) => call,
        };
        self.transcript.push_assistant(emission);
        let raw = RawToolCall::from(call);
        match self.execute(&raw) {
            Ok(obs) => {
                if self.round >= self.config.round_limit {
                    return Ok(self.finish(None));
                }
                Ok(StepOutcome::Observed(obs))
            }
            Err(e) => Ok(self.reject(e)),
        }
    }

    /// Record an emission that never parsed.
    pub fn record_unparsable(&mut self, emission: String, error: ValidationError) -> Result<StepOutcome, EpisodeError> {
        if self.terminal {
            return Err(EpisodeError::Terminal);
        }
        self.transcript.push_assistant(emission);
        Ok(self.reject(error))
    }

    fn reject(&mut self, e: ValidationError) -> StepOutcome {
        self.rejections += 1;
        if self.rejections > self.config.max_rejections {
            self.finish(None);
        }
        StepOutcome::Rejected(e)
    }

    /// Validate and execute a zoom against the current history.
    fn execute(&mut self, raw: &RawToolCall) -> Result<Observation, ValidationError> {
        let local = validate_against(&self.history, raw, self.config.redundancy_iou)?;
        let parent = self
            .view(&raw.source_image_id)
            .expect("validated source exists")
            .clone();
        let pixel_rect = child_rect(&parent.pixel_rect, &local);
        let global_box = from_pixels(&pixel_rect, self.scene.width, self.scene.height)
            .expect("child views stay inside the scene");
        let image_id = format!("image_{}", self.views.len());
        if self.round > 0 {
            self.last_transition = Some(classify_transition(&self.views[self.current].global_box, &global_box));
        }
        self.views.push(View {
            image_id: image_id.clone(),
            source_image_id: Some(parent.image_id.clone()),
            local_box: local,
            global_box,
            pixel_rect,
        });
        self.current = self.views.len() - 1;
        self.round += 1;
        let newly_legible = self.mark_read(self.current);
        self.transcript.push_tool_response(ImageRef {
            image_id,
            width: pixel_rect.width,
            height: pixel_rect.height,
            origin_context: Some(OriginContext {
                source_image_id: parent.image_id,
                bbox: local,
                global_bbox: global_box,
                pixel_rect,
            }),
            newly_legible,
        });
        self.history = ViewHistory::from_transcript(&self.transcript);
        Ok(self.observe())
    }

    fn finish(&mut self, answer: Option<String>) -> StepOutcome {
        let correct = answer.as_deref() == Some(self.question.ground_truth.as_str());
        self.terminal = true;
        self.answer = answer.clone();
        self.transcript.grade = Some(Grade { correct, answer });
        StepOutcome::Terminal { correct }
    }

    pub fn correct(&self) -> bool {
        self.transcript.grade.as_ref().is_some_and(|g| g.correct)
    }
}

/// Question text shown to the agent, options included.
pub fn render_question(q: &Question) -> String {
    let opts: Vec<String> = q
        .options
        .iter()
        .zip(&q.choices)
        .map(|(l, c)| format!("({l}) {c}"))
        .collect();
    format!("{} {}", q.prompt, opts.join(" "))
}

/// The tool-free reference policy: answer from the full frame, guessing
/// uniformly when the evidence is unreadable.
pub fn reference_answer(state: &EpisodeState, rng: &mut impl Rng) -> String {
    if state.targets_read() {
        state.question.ground_truth.clone()
    } else {
        state.question.options.choose(rng).unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GRID;
    use crate::protocol::{format_gate, ToolCall, ValidationKind};
    use proptest::prelude::*;

    fn nb(a: i64, b: i64, c: i64, d: i64) -> NormBox {
        NormBox::new(a, b, c, d).unwrap()
    }

    fn zoom(src: &str, b: NormBox) -> Action {
        Action::ToolCall(ToolCall {
            source_image_id: src.into(),
            reason: "look closer".into(),
            bbox: b,
        })
    }

    #[test]
    fn multihop_answer_needs_both_items() {
        for seed in 0..200 {
            let (s, q) = generate_for(seed, &SceneConfig::default(), Category::MultiHop).unwrap();
            let (a, b) = (&s.evidence[0].label, &s.evidence[1].label);
            let with = |pos: usize, l: &str| q.choices.iter().filter(|c| c.split('+').nth(pos) == Some(l)).count();
            assert!(with(0, a) >= 2 && with(1, b) >= 2, "seed {seed}: {:?}", q.choices);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a.0).unwrap(), serde_json::to_string(&b.0).unwrap());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn question_invariants_hold_across_seeds() {
        let cfg = SceneConfig::default();
        let mut seen = [0usize; 4];
        for seed in 0..400 {
            let (scene, q) = generate_scene(seed, &cfg).unwrap();
            seen[q.category.index()] += 1;
            assert!(q.options.contains(&q.ground_truth));
            assert_eq!(q.options.len(), 4);
            assert_eq!(q.choices.len(), 4);
            let truth_idx = q.options.iter().position(|o| *o == q.ground_truth).unwrap();
            let truth_label = match q.category {
                Category::MultiHop => format!("{}+{}", scene.evidence[0].label, scene.evidence[1].label),
                _ => scene.evidence[q.targets[0]].label.clone(),
            };
            assert_eq!(q.choices[truth_idx], truth_label);
            for e in &scene.evidence {
                assert!(scene.frame().contains_rect(&e.region));
                assert!(e.legibility_scale >= 1.0);
            }
            match q.category {
                Category::Global => assert_eq!(scene.evidence[q.targets[0]].legibility_scale, 1.0),
                Category::MultiHop => {
                    assert!(q.targets.len() >= 2);
                    let (a, b) = (&scene.evidence[q.targets[0]], &scene.evidence[q.targets[1]]);
                    assert!(!a.region.intersects(&b.region));
                }
                _ => {}
            }
        }
        assert!(seen.iter().all(|&c| c > 60), "{seen:?}");
    }

    #[test]
    fn tiny_evidence_respects_sparsity() {
        let cfg = SceneConfig::default();
        for seed in 0..1000 {
            let (scene, q) = generate_for(seed, &cfg, Category::Tiny).unwrap();
            let e = &scene.evidence[q.targets[0]];
            assert!(e.region.area() as f64 / scene.area() <= 1e-4);
            assert_eq!(e.legibility_scale, 8.0);
        }
    }

    #[test]
    fn unsatisfiable_config_is_an_error() {
        let cfg = SceneConfig {
            width: 100,
            height: 100,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_for(1, &cfg, Category::Tiny), Err(SceneError::Unsatisfiable(_))));
        let bad_mix = SceneConfig {
            mix: CategoryMix {
                global: 0.5,
                ..CategoryMix::default()
            },
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &bad_mix), Err(SceneError::InvalidConfig(_))));
    }

    #[test]
    fn observation_threshold_rules() {
        let item = EvidenceItem {
            region: PixelRect::new(100, 100, 20, 20),
            label: "x".into(),
            legibility_scale: 8.0,
        };
        assert!(!is_legible(&item, &PixelRect::full(1000, 1000), 1000, 1000));
        assert!(is_legible(&item, &PixelRect::new(90, 90, 100, 100), 1000, 1000));
        assert!(!is_legible(&item, &PixelRect::new(500, 500, 50, 50), 1000, 1000));
    }

    #[test]
    fn step_composes_pixel_rect() {
        let cfg = SceneConfig {
            width: 2000,
            height: 2000,
            ..SceneConfig::default()
        };
        let (scene, q) = generate_for(3, &cfg, Category::Tiny).unwrap();
        let mut ep = EpisodeState::new(scene, q, EpisodeConfig::default());
        let out = ep.step("", &zoom("image_0", nb(250, 250, 500, 500))).unwrap();
        assert!(matches!(out, StepOutcome::Observed(_)));
        assert_eq!(ep.current_view().pixel_rect, PixelRect::new(500, 500, 500, 500));
        assert_eq!(ep.round, 1);
    }

    #[test]
    fn answers_and_round_limit() {
        let (scene, q) = generate_for(11, &SceneConfig::default(), Category::Global).unwrap();
        let truth = q.ground_truth.clone();
        let mut ep = EpisodeState::new(scene.clone(), q.clone(), EpisodeConfig::default());
        let out = ep.step("", &Action::Answer { content: truth }).unwrap();
        assert_eq!(out, StepOutcome::Terminal { correct: true });
        assert_eq!(format_gate(&ep.transcript), 1);
        assert!(ep.step("", &Action::Answer { content: "A".into() }).is_err());

        let mut ep = EpisodeState::new(scene, q, EpisodeConfig::default());
        for i in 0..5 {
            let src = format!("image_{i}");
            let out = ep.step("", &zoom(&src, nb(0, 0, 500, 500))).unwrap();
            if i < 4 {
                assert!(matches!(out, StepOutcome::Observed(_)));
            } else {
                assert_eq!(out, StepOutcome::Terminal { correct: false });
            }
        }
        assert!(ep.terminal);
        assert_eq!(ep.round, 5);
        assert_eq!(format_gate(&ep.transcript), 0);
    }

    #[test]
    fn rejected_call_does_not_advance() {
        let (scene, q) = generate_for(5, &SceneConfig::default(), Category::Tiny).unwrap();
        let cfg = EpisodeConfig {
            max_rejections: 1,
            ..EpisodeConfig::default()
        };
        let mut ep = EpisodeState::new(scene, q, cfg);
        let out = ep.step("", &zoom("image_7", nb(0, 0, 500, 500))).unwrap();
        match out {
            StepOutcome::Rejected(e) => assert_eq!(e.kind, ValidationKind::ExecutionError),
            other => panic!("{other:?}"),
        }
        assert_eq!(ep.views.len(), 1);
        assert_eq!(ep.round, 0);
        assert!(!ep.terminal);
        ep.step("", &zoom("image_0", NormBox::FULL)).unwrap();
        assert!(ep.terminal, "second rejection exceeds the cap");
        assert!(!ep.correct());
    }

    #[test]
    fn tiny_needs_two_nested_zooms() {
        let cfg = SceneConfig::default();
        let (scene, q) = generate_for(21, &cfg, Category::Tiny).unwrap();
        let target = scene.evidence[q.targets[0]].clone();
        let mut ep = EpisodeState::new(scene, q, EpisodeConfig::default());
        assert!(!ep.observe().visibility[0].legible);
        for _ in 0..2 {
            let v = ep.current_view().clone();
            let (cx, cy) = target.region.center();
            let nx = (cx - f64::from(v.pixel_rect.left)) / f64::from(v.pixel_rect.width) * f64::from(GRID);
            let ny = (cy - f64::from(v.pixel_rect.top)) / f64::from(v.pixel_rect.height) * f64::from(GRID);
            let cell = NormBox::grid_cell(NormBox::cell_of_point(nx, ny));
            ep.step("", &zoom(&v.image_id, cell)).unwrap();
        }
        assert!(ep.observe().visibility[0].legible);
        assert_eq!(ep.last_transition, Some(TransitionKind::ZoomIn));
    }

    #[test]
    fn base_solve_probabilities() {
        let cfg = SceneConfig::default();
        let (s, q) = generate_for(1, &cfg, Category::Global).unwrap();
        assert_eq!(base_solve_probability(&s, &q), 1.0);
        let (s, q) = generate_for(1, &cfg, Category::Tiny).unwrap();
        assert_eq!(base_solve_probability(&s, &q), 0.25);
        let (s, q) = generate_for(1, &cfg, Category::MultiHop).unwrap();
        assert_eq!(base_solve_probability(&s, &q), 0.25);
    }

    #[test]
    fn reference_policy_is_at_chance_on_tiny() {
        let cfg = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut correct = 0usize;
        let n = 1000;
        for seed in 0..n {
            let (s, q) = generate_for(seed, &cfg, Category::Tiny).unwrap();
            let mut ep = EpisodeState::new(s, q, EpisodeConfig::default());
            let a = reference_answer(&ep, &mut rng);
            if let StepOutcome::Terminal { correct: true } = ep.step("", &Action::Answer { content: a }).unwrap() {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!((0.20..=0.30).contains(&acc), "{acc}");
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = SceneConfig::default();
        let run = || {
            let (s, q) = generate_for(8, &cfg, Category::MultiHop).unwrap();
            let mut ep = EpisodeState::new(s, q, EpisodeConfig::default());
            let mut obs = Vec::new();
            for a in [
                zoom("image_0", NormBox::grid_cell(4)),
                zoom("image_1", NormBox::grid_cell(0)),
                Action::Answer { content: "B".into() },
            ] {
                obs.push(format!("{:?}", ep.step("t", &a).unwrap()));
            }
            (obs, serde_json::to_string(&ep.transcript).unwrap())
        };
        assert_eq!(run(), run());
    }

    fn direct_global(chain: &[NormBox]) -> (f64, f64, f64, f64) {
        // Compose normalized boxes in exact rational arithmetic.
        let (mut x0, mut y0, mut x1, mut y1) = (0.0, 0.0, 1.0, 1.0);
        for b in chain {
            let (w, h) = (x1 - x0, y1 - y0);
            let nx0 = x0 + w * f64::from(b.x_min()) / 1000.0;
            let nx1 = x0 + w * f64::from(b.x_max()) / 1000.0;
            let ny0 = y0 + h * f64::from(b.y_min()) / 1000.0;
            let ny1 = y0 + h * f64::from(b.y_max()) / 1000.0;
            (x0, y0, x1, y1) = (nx0, ny0, nx1, ny1);
        }
        (x0, y0, x1, y1)
    }

    fn arb_box() -> impl Strategy<Value = NormBox> {
        (0u32..1000, 0u32..1000, 1u32..=1000, 1u32..=1000).prop_map(|(a, b, w, h)| {
            let x1 = (a + w).min(1000).max(a + 1);
            let y1 = (b + h).min(1000).max(b + 1);
            NormBox::new(a.into(), b.into(), x1.into(), y1.into()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn view_chain_composition(chain in prop::collection::vec(arb_box(), 1..=5), exact in any::<bool>()) {
            // Chained pixel crops agree with mapping the directly composed box;
            // rounding at each level moves an edge by at most half a pixel.
            let (w, h) = if exact { (1000, 1000) } else { (8192, 6000) };
            let mut rect = PixelRect::full(w, h);
            for b in &chain {
                rect = child_rect(&rect, b);
            }
            let (x0, y0, x1, y1) = direct_global(&chain);
            let tol = chain.len() as f64;
            let fw = f64::from(w);
            let fh = f64::from(h);
            // Sub-pixel boxes are widened to one pixel, so compare with slack.
            let widen = |a: f64, b: f64, ext: f64| if (b - a) * ext < 1.0 { 1.0 + tol } else { tol };
            let sx = widen(x0, x1, fw);
            let sy = widen(y0, y1, fh);
            prop_assert!((f64::from(rect.left) - x0 * fw).abs() <= sx + 1e-9);
            prop_assert!((f64::from(rect.right()) - x1 * fw).abs() <= sx + 1e-9);
            prop_assert!((f64::from(rect.top) - y0 * fh).abs() <= sy + 1e-9);
            prop_assert!((f64::from(rect.bottom()) - y1 * fh).abs() <= sy + 1e-9);
        }
    }
}
