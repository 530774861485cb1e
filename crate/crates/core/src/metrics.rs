//! Evaluation metrics: accuracy, tool usage and zoom-chain depth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TransitionKind;
use crate::grpo::TrajectoryRecord;
use crate::scenes::Category;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no {0} to aggregate")]
    Empty(&'static str),
}

/// The per-episode facts every metric is computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    pub category: Category,
    pub correct: bool,
    pub n_calls: usize,
    pub transitions: Vec<TransitionKind>,
}

impl From<&TrajectoryRecord> for EvalItem {
    fn from(r: &TrajectoryRecord) -> Self {
        Self {
            question_id: r.question_id.clone(),
            category: r.category,
            correct: r.correct,
            n_calls: r.breakdown.n_step,
            transitions: r.transitions.clone(),
        }
    }
}

/// Unweighted mean of per-category accuracies.
pub fn macro_accuracy(per_category: &[f64]) -> Result<f64, MetricsError> {
    if per_category.is_empty() {
        return Err(MetricsError::Empty("categories"));
    }
    Ok(per_category.iter().sum::<f64>() / per_category.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    /// Fraction of episodes with at least one executed call.
    pub trigger_ratio: f64,
    /// Mean calls over all episodes.
    pub avg_calls_all: f64,
    /// Mean calls over episodes that called the tool; `None` if none did.
    pub avg_calls_invoking: Option<f64>,
}

pub fn tool_usage_stats(items: &[EvalItem]) -> Result<ToolUsage, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty("episodes"));
    }
    let n = items.len() as f64;
    let total: usize = items.iter().map(|i| i.n_calls).sum();
    let invoking = items.iter().filter(|i| i.n_calls > 0).count();
    Ok(ToolUsage {
        trigger_ratio: invoking as f64 / n,
        avg_calls_all: total as f64 / n,
        avg_calls_invoking: (invoking > 0).then(|| total as f64 / invoking as f64),
    })
}

/// Fractions of episodes at chain depth 1, 2 and 3 or more, where depth is
/// one plus the number of executed calls.
pub fn depth_distribution(calls: &[usize]) -> Result<[f64; 3], MetricsError> {
    if calls.is_empty() {
        return Err(MetricsError::Empty("episodes"));
    }
    let mut counts = [0usize; 3];
    for &c in calls {
        counts[c.min(2)] += 1;
    }
    let n = calls.len() as f64;
    Ok(counts.map(|k| k as f64 / n))
}

/// Share of transitions that are refinements; `None` without transitions.
pub fn zoom_in_fraction(items: &[EvalItem]) -> Option<f64> {
    let all: Vec<_> = items.iter().flat_map(|i| &i.transitions).collect();
    if all.is_empty() {
        return None;
    }
    let zoom = all.iter().filter(|&&&k| k == TransitionKind::ZoomIn).count();
    Some(zoom as f64 / all.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: Category,
    pub episodes: usize,
    /// Percent correct.
    pub accuracy: f64,
    pub usage: ToolUsage,
    pub zoom_in_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: usize,
    /// Percent correct over all episodes.
    pub overall_accuracy: f64,
    /// Mean of the per-category accuracies, in percent.
    pub macro_accuracy: f64,
    pub usage: ToolUsage,
    pub depth_distribution: [f64; 3],
    pub zoom_in_fraction: Option<f64>,
    pub categories: Vec<CategoryReport>,
}

fn accuracy(items: &[&EvalItem]) -> f64 {
    100.0 * items.iter().filter(|i| i.correct).count() as f64 / items.len() as f64
}

impl EvalReport {
    pub fn build(policy: impl Into<String>, items: &[EvalItem]) -> Result<Self, MetricsError> {
        let usage = tool_usage_stats(items)?;
        let calls: Vec<usize> = items.iter().map(|i| i.n_calls).collect();
        let mut categories = Vec::new();
        for c in Category::ALL {
            let subset: Vec<EvalItem> = items.iter().filter(|i| i.category == c).cloned().collect();
            if subset.is_empty() {
                continue;
            }
            categories.push(CategoryReport {
                category: c,
                episodes: subset.len(),
                accuracy: accuracy(&subset.iter().collect::<Vec<_>>()),
                usage: tool_usage_stats(&subset)?,
                zoom_in_fraction: zoom_in_fraction(&subset),
            });
        }
        let per_cat: Vec<f64> = categories.iter().map(|c| c.accuracy).collect();
        Ok(Self {
            policy: policy.into(),
            episodes: items.len(),
            overall_accuracy: accuracy(&items.iter().collect::<Vec<_>>()),
            macro_accuracy: macro_accuracy(&per_cat)?,
            usage,
            depth_distribution: depth_distribution(&calls)?,
            zoom_in_fraction: zoom_in_fraction(items),
            categories,
        })
    }

    pub fn category(&self, c: Category) -> Option<&CategoryReport> {
        self.categories.iter().find(|r| r.category == c)
    }

    /// One row per category plus an `all` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(
            "policy,scope,episodes,accuracy,trigger_ratio,avg_calls_all,avg_calls_invoking,zoom_in_fraction\n",
        );
        let mut row = |scope: &str, n: usize, acc: f64, u: &ToolUsage, z: Option<f64>| {
            let _ = writeln!(
                out,
                "{},{scope},{n},{acc:.4},{:.6},{:.6},{},{}",
                self.policy,
                u.trigger_ratio,
                u.avg_calls_all,
                opt(u.avg_calls_invoking),
                opt(z)
            );
        };
        for c in &self.categories {
            row(c.category.name(), c.episodes, c.accuracy, &c.usage, c.zoom_in_fraction);
        }
        row("all", self.episodes, self.overall_accuracy, &self.usage, self.zoom_in_fraction);
        out
    }
}
