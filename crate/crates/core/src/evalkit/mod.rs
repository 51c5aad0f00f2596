//! Recall measurement, experiment reports, and the experiment runners.

mod experiments;
mod report;

pub use experiments::{
    ablation_grid, cohort_breakdown, evaluate_sources, overlap_experiment, overlap_metrics, recall_curve,
    run_experiment, run_experiments, ExperimentSession, OverlapSummary, ABLATION_CELLS, TABLE1_SOURCES,
};
pub use report::{
    emit_report, emit_summary, render, render_summary, summarize, ExperimentReport, ReportFormat, Row,
    SummaryRow, CSV_HEADER, SUMMARY_HEADER,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, HOURS_PER_DAY};
use crate::retrieval::CandidateList;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-user recalls.
    Macro,
    /// Total hits over total holdout items.
    Micro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    #[serde(default = "default_k_eval")]
    pub k_eval: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval_per_user: usize,
    #[serde(default = "default_eval_day")]
    pub eval_day: u64,
    /// Hour of `eval_day` at which holdouts are drawn.
    #[serde(default = "default_eval_hour")]
    pub eval_hour: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_true")]
    pub cohort_split: bool,
    #[serde(default = "default_curve_ks")]
    pub curve_ks: Vec<usize>,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    /// Boost weight used for the tuned arm of the overlap experiment.
    #[serde(default = "default_overlap_boost")]
    pub overlap_boost: f64,
}

fn default_k_eval() -> usize {
    200
}
fn default_n_eval() -> usize {
    20
}
/// A day on which weekly refreshes have just run but bi-weekly ones have
/// not, so stored lists carry each cohort's typical staleness.
fn default_eval_day() -> u64 {
    21
}
fn default_eval_hour() -> u64 {
    22
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_true() -> bool {
    true
}
fn default_curve_ks() -> Vec<usize> {
    vec![10, 50, 100, 200, 500, 1000]
}
fn default_aggregation() -> Aggregation {
    Aggregation::Macro
}
fn default_overlap_boost() -> f64 {
    1.0
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            k_eval: default_k_eval(),
            n_eval_per_user: default_n_eval(),
            eval_day: default_eval_day(),
            eval_hour: default_eval_hour(),
            seeds: default_seeds(),
            cohort_split: true,
            curve_ks: default_curve_ks(),
            aggregation: default_aggregation(),
            overlap_boost: default_overlap_boost(),
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k_eval < 1 {
            return Err(Error::config("eval.k_eval", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "needs at least one seed"));
        }
        if self.eval_hour >= HOURS_PER_DAY {
            return Err(Error::config("eval.eval_hour", "must be below 24"));
        }
        if self.curve_ks.is_empty() || self.curve_ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("eval.curve_ks", "must be non-empty and strictly increasing"));
        }
        if !(self.overlap_boost.is_finite() && self.overlap_boost >= 0.0) {
            return Err(Error::config("eval.overlap_boost", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn eval_time(&self) -> Hour {
        self.eval_day * HOURS_PER_DAY + self.eval_hour
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    Table1,
    Table2,
    Table3,
    Curve,
    Overlap,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Table1,
        Experiment::Table2,
        Experiment::Table3,
        Experiment::Curve,
        Experiment::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Table2 => "table2",
            Experiment::Table3 => "table3",
            Experiment::Curve => "curve",
            Experiment::Overlap => "overlap",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

/// Holdout items found in the first `k` retrieved ids. `truth` must be sorted.
pub fn hits_at_k(retrieved: &[ItemId], truth: &[ItemId], k: usize) -> usize {
    retrieved
        .iter()
        .take(k)
        .filter(|i| truth.binary_search(i).is_ok())
        .count()
}

/// |top-k ∩ truth| / |truth|, or `None` when `truth` is empty.
pub fn recall_at_k(retrieved: &CandidateList, truth: &[ItemId], k: usize) -> Option<f64> {
    let ids: Vec<ItemId> = retrieved.items().collect();
    recall_of_ids(&ids, truth, k)
}

/// As [`recall_at_k`] over plain ids; `truth` need not be sorted.
pub fn recall_of_ids(retrieved: &[ItemId], truth: &[ItemId], k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mut sorted = truth.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Some(hits_at_k(retrieved, &sorted, k) as f64 / sorted.len() as f64)
}

/// Per-user outcome: (hits, holdout size).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UserHits {
    pub hits: usize,
    pub truth: usize,
}

/// Aggregates per-user outcomes, skipping users with empty holdouts.
/// Returns `None` when no user qualifies.
pub fn aggregate(outcomes: &[UserHits], how: Aggregation) -> Option<f64> {
    let eligible: Vec<&UserHits> = outcomes.iter().filter(|o| o.truth > 0).collect();
    if eligible.is_empty() {
        return None;
    }
    Some(match how {
        Aggregation::Macro => {
            eligible.iter().map(|o| o.hits as f64 / o.truth as f64).sum::<f64>() / eligible.len() as f64
        }
        Aggregation::Micro => {
            eligible.iter().map(|o| o.hits).sum::<usize>() as f64
                / eligible.iter().map(|o| o.truth).sum::<usize>() as f64
        }
    })
}
