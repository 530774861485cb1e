//! Shaped trajectory rewards.
//!
//! The total reward gates four task terms (accuracy, adaptive efficiency,
//! chain-of-focus and process) behind protocol adherence and adds a format
//! term outside the gate:
//!
//! `R = I_fmt * (w_acc R_acc + w_tool R_tool + w_cof R_cof + w_proc R_proc) + R_fmt`

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{classify_transition, NormBox, TransitionKind};
use crate::protocol::{format_gate, Action, Transcript};
use crate::scenes::{base_solve_probability, is_legible, Category, Question, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CofAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_acc: f64,
    pub w_tool: f64,
    pub w_cof: f64,
    pub w_proc: f64,
    pub beta_zoom: f64,
    pub beta_drift: f64,
    pub gamma: f64,
    pub r_fmt_ok: f64,
    pub r_fmt_bad: f64,
    pub cof_aggregation: CofAggregation,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_acc: 1.0,
            w_tool: 0.3,
            w_cof: 0.2,
            w_proc: 0.2,
            beta_zoom: 0.2,
            beta_drift: 0.2,
            gamma: 0.5,
            r_fmt_ok: 0.1,
            r_fmt_bad: -1.0,
            cof_aggregation: CofAggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid reward weights: {0}")]
pub struct WeightsError(pub String);

impl RewardWeights {
    pub fn validate(&self) -> Result<(), WeightsError> {
        let all = [
            self.w_acc,
            self.w_tool,
            self.w_cof,
            self.w_proc,
            self.beta_zoom,
            self.beta_drift,
            self.gamma,
            self.r_fmt_ok,
            self.r_fmt_bad,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(WeightsError("all reward parameters must be finite".into()));
        }
        if [self.w_acc, self.w_tool, self.w_cof, self.w_proc].iter().any(|w| *w < 0.0) {
            return Err(WeightsError("term weights must be non-negative".into()));
        }
        if self.beta_zoom <= 0.0 || self.beta_drift <= 0.0 || self.gamma <= 0.0 {
            return Err(WeightsError("beta_zoom, beta_drift and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Tool-step allowance per question category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryBudgets {
    pub global: usize,
    pub regional: usize,
    pub tiny: usize,
    pub multihop: usize,
}

impl Default for CategoryBudgets {
    fn default() -> Self {
        Self {
            global: 0,
            regional: 1,
            tiny: 2,
            multihop: 3,
        }
    }
}

impl CategoryBudgets {
    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::Global => self.global,
            Category::Regional => self.regional,
            Category::Tiny => self.tiny,
            Category::MultiHop => self.multihop,
        }
    }
}

/// Component values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub r_acc: f64,
    pub r_tool: f64,
    pub r_cof: f64,
    pub r_proc: f64,
    pub r_fmt: f64,
    pub i_fmt: u8,
    pub n_step: usize,
    pub p_alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_tool: f64,
    pub r_cof: f64,
    pub r_proc: f64,
    pub r_fmt: f64,
    pub i_fmt: u8,
    pub n_step: usize,
    pub p_alpha: f64,
    pub total: f64,
}

pub fn accuracy_reward(t: &Transcript, q: &Question) -> u8 {
    u8::from(t.final_answer().as_deref() == Some(q.ground_truth.as_str()))
}

pub fn format_reward(t: &Transcript, w: &RewardWeights) -> f64 {
    if format_gate(t) == 1 {
        w.r_fmt_ok
    } else {
        w.r_fmt_bad
    }
}

/// `p_alpha * exp(-gamma * max(0, n_step - n_base))`.
pub fn adaptive_efficiency_reward(n_step: usize, n_base: usize, gamma: f64, p_alpha: f64) -> f64 {
    let excess = n_step.saturating_sub(n_base) as f64;
    p_alpha * (-gamma * excess).exp()
}

pub fn cof_step_reward(b_t: &NormBox, b_next: &NormBox, w: &RewardWeights) -> f64 {
    match classify_transition(b_t, b_next) {
        TransitionKind::ZoomIn => w.beta_zoom,
        TransitionKind::Backtrack | TransitionKind::Degenerate => 0.0,
        TransitionKind::Drift => -w.beta_drift,
    }
}

/// Chain-of-focus reward over consecutive executed view windows, each
/// expressed in the `image_0` frame.
pub fn cof_trajectory_reward(t: &Transcript, w: &RewardWeights) -> f64 {
    cof_over_boxes(&t.executed_global_boxes(), w)
}

pub fn cof_over_boxes(boxes: &[NormBox], w: &RewardWeights) -> f64 {
    if boxes.len() < 2 {
        return 0.0;
    }
    let steps: Vec<f64> = boxes
        .windows(2)
        .map(|p| cof_step_reward(&p[0], &p[1], w))
        .collect();
    let sum: f64 = steps.iter().sum();
    match w.cof_aggregation {
        CofAggregation::Mean => sum / steps.len() as f64,
        CofAggregation::Sum => sum,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("judge failed: {0}")]
pub struct JudgeError(pub String);

/// Scores the reasoning process of a finished transcript on `[0, 1]`.
pub trait ProcessJudge: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, t: &Transcript, scene: &SceneSpec, q: &Question) -> Result<f64, JudgeError>;
}

/// Zero when detail-dependent evidence was never magnified enough in an
/// executed view, or when a call gives no reason.
#[derive(Debug, Clone, Copy, Default)]
pub struct NecessityAwareJudge;

impl ProcessJudge for NecessityAwareJudge {
    fn name(&self) -> &'static str {
        "necessity_aware"
    }

    fn evaluate(&self, t: &Transcript, scene: &SceneSpec, q: &Question) -> Result<f64, JudgeError> {
        let views: Vec<_> = t
            .executed_calls()
            .into_iter()
            .map(|(_, img)| img.pixel_rect())
            .collect();
        for &i in &q.targets {
            let item = scene
                .evidence
                .get(i)
                .ok_or_else(|| JudgeError(format!("target {i} missing from scene {}", scene.scene_id)))?;
            if item.legibility_scale > 1.0
                && !views.iter().any(|v| is_legible(item, v, scene.width, scene.height))
            {
                return Ok(0.0);
            }
        }
        let empty_reason = t
            .turns
            .iter()
            .filter_map(|turn| turn.action())
            .filter_map(|a| match a {
                Action::ToolCall(c) => Some(c),
                Action::Answer { .. } => None,
            })
            .any(|c| c.reason.trim().is_empty());
        Ok(if empty_reason { 0.0 } else { 1.0 })
    }
}

/// Region words recognised in tool-call reasons, with the 3×3 cells they name.
pub const REGION_TAGS: [(&str, &[usize]); 9] = [
    ("top-left", &[0]),
    ("top", &[0, 1, 2]),
    ("top-right", &[2]),
    ("left", &[0, 3, 6]),
    ("center", &[4]),
    ("right", &[2, 5, 8]),
    ("bottom-left", &[6]),
    ("bottom", &[6, 7, 8]),
    ("bottom-right", &[8]),
];

/// Region word for grid cell `cell`.
pub fn cell_tag(cell: usize) -> &'static str {
    ["top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom", "bottom-right"][cell]
}

/// Cells named by the region words of a reason, if any.
pub fn reason_regions(reason: &str) -> Vec<usize> {
    let lower = reason.to_lowercase();
    let mut cells = Vec::new();
    for token in lower.split(|c: char| !(c.is_alphanumeric() || c == '-')) {
        if let Some((_, named)) = REGION_TAGS.iter().find(|(tag, _)| *tag == token) {
            cells.extend_from_slice(named);
        }
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// One when every tool call lands inside a region its own reason names.
/// Calls whose reasons name no region are not checked.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogicConsistencyJudge;

impl ProcessJudge for LogicConsistencyJudge {
    fn name(&self) -> &'static str {
        "logic_consistency"
    }

    fn evaluate(&self, t: &Transcript, _scene: &SceneSpec, _q: &Question) -> Result<f64, JudgeError> {
        for (call, _) in t.executed_calls() {
            let cells = reason_regions(&call.reason);
            if cells.is_empty() {
                continue;
            }
            let hit = cells
                .iter()
                .any(|&c| call.bbox.intersection_area(&NormBox::grid_cell(c)) > 0);
            if !hit {
                return Ok(0.0);
            }
        }
        Ok(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    NecessityAware,
    LogicConsistency,
}

impl JudgeKind {
    pub fn judge(self) -> Box<dyn ProcessJudge> {
        match self {
            JudgeKind::NecessityAware => Box::new(NecessityAwareJudge),
            JudgeKind::LogicConsistency => Box::new(LogicConsistencyJudge),
        }
    }
}

/// Process reward; a failing judge scores zero.
pub fn process_reward(t: &Transcript, scene: &SceneSpec, q: &Question, judge: &dyn ProcessJudge) -> f64 {
    match judge.evaluate(t, scene, q) {
        Ok(v) if v.is_finite() => v.clamp(0.0, 1.0),
        Ok(v) => {
            tracing::warn!(judge = judge.name(), question = %q.question_id, value = v, "judge returned a non-finite score");
            0.0
        }
        Err(e) => {
            tracing::warn!(judge = judge.name(), question = %q.question_id, error = %e, "process judge failed");
            0.0
        }
    }
}

pub fn total_reward(parts: &RewardParts, w: &RewardWeights) -> RewardBreakdown {
    let gated = if parts.i_fmt == 1 {
        w.w_acc * parts.r_acc + w.w_tool * parts.r_tool + w.w_cof * parts.r_cof + w.w_proc * parts.r_proc
    } else {
        0.0
    };
    RewardBreakdown {
        r_acc: parts.r_acc,
        r_tool: parts.r_tool,
        r_cof: parts.r_cof,
        r_proc: parts.r_proc,
        r_fmt: parts.r_fmt,
        i_fmt: parts.i_fmt,
        n_step: parts.n_step,
        p_alpha: parts.p_alpha,
        total: gated + parts.r_fmt,
    }
}

/// Reward settings bundled for scoring many transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub budgets: CategoryBudgets,
    pub judge: JudgeKind,
}

/// Compute every component for a finished transcript and assemble the total.
pub fn score_transcript(t: &Transcript, scene: &SceneSpec, q: &Question, cfg: &RewardConfig) -> RewardBreakdown {
    let w = &cfg.weights;
    let n_step = t.n_step();
    let p_alpha = 1.0 - base_solve_probability(scene, q);
    let judge = cfg.judge.judge();
    let parts = RewardParts {
        r_acc: f64::from(accuracy_reward(t, q)),
        r_tool: adaptive_efficiency_reward(n_step, cfg.budgets.get(q.category), w.gamma, p_alpha),
        r_cof: cof_trajectory_reward(t, w),
        r_proc: process_reward(t, scene, q, judge.as_ref()),
        r_fmt: format_reward(t, w),
        i_fmt: format_gate(t),
        n_step,
        p_alpha,
    };
    total_reward(&parts, w)
}
