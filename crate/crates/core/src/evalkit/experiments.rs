//! Per-seed experiment sessions and the runners built on them.

use crate::config::RunConfig;
use crate::error::Result;
use crate::funnel::{serve, ServeTrace};
use crate::ids::{Hour, ItemId, UserId};
use crate::pipeline::{offline_pool, rank_pool};
use crate::retrieval::{score_source, top_k, Source};
use crate::scorers::{Epoch, ScorerKind};
use crate::sim::Simulation;
use crate::worldgen::{generate_world, Cohort};

use super::{aggregate, hits_at_k, Aggregation, Experiment, ExperimentReport, Row, UserHits};

/// A world simulated to the evaluation hour with warm store, fresh scorer
/// tables, and one holdout set per user (indexed by user id).
pub struct ExperimentSession {
    pub seed: u64,
    pub sim: Simulation,
    pub holdouts: Vec<Vec<ItemId>>,
    pub eval_time: Hour,
}

impl ExperimentSession {
    /// Generates the world for `seed`, runs it (and the offline pipeline
    /// when `with_pipeline`) up to the evaluation hour, rebuilds the tables,
    /// then draws holdouts in user order.
    pub fn prepare(cfg: &RunConfig, seed: u64, with_pipeline: bool) -> Result<ExperimentSession> {
        let world = generate_world(cfg.world_for_seed(seed))?;
        let mut sim = Simulation::new(world, cfg.sim_config())?;
        sim.pipeline_enabled = with_pipeline;
        let eval_time = cfg.eval.eval_time();
        sim.superseded_before = Some(eval_time);
        sim.advance_to(eval_time, |_, _| Ok(()))?;
        sim.rebuild_tables()?;
        let mut holdouts = Vec::with_capacity(sim.world.users.len());
        for u in 0..sim.world.users.len() {
            holdouts.push(sim.world.sample_holdout(UserId(u as u32), cfg.eval.n_eval_per_user)?);
        }
        Ok(ExperimentSession {
            seed,
            sim,
            holdouts,
            eval_time,
        })
    }

    fn eligible(&self) -> impl Iterator<Item = (UserId, Cohort, &[ItemId])> + '_ {
        self.sim
            .world
            .users
            .iter()
            .zip(&self.holdouts)
            .filter(|(_, h)| !h.is_empty())
            .map(|(u, h)| (u.id, u.cohort, h.as_slice()))
    }

    /// Ranked ids a method offers the user at eval time: a standalone online
    /// source's top `k`, or the stored entry for [`Source::Radar`].
    fn ranked_ids(&self, cfg: &RunConfig, user: UserId, source: Source, k: usize) -> Result<Vec<ItemId>> {
        if source == Source::Radar {
            return Ok(self
                .sim
                .store
                .peek(user)
                .map(|e| e.items.iter().map(|(i, _)| *i).collect())
                .unwrap_or_default());
        }
        let w = &self.sim.world;
        let scored = score_source(w, &self.sim.tables, w.user(user)?, source, self.eval_time, cfg.retrieval.boost())?;
        Ok(top_k(scored, k).into_iter().map(|(i, _)| i).collect())
    }
}

/// Per-user hits for each method, in user order.
struct Outcomes {
    cohorts: Vec<Cohort>,
    per_method: Vec<Vec<UserHits>>,
}

fn collect(session: &ExperimentSession, cfg: &RunConfig, methods: &[Source], k: usize) -> Result<Outcomes> {
    let mut out = Outcomes {
        cohorts: Vec::new(),
        per_method: vec![Vec::new(); methods.len()],
    };
    for (user, cohort, truth) in session.eligible() {
        out.cohorts.push(cohort);
        for (m, &source) in methods.iter().enumerate() {
            let ids = session.ranked_ids(cfg, user, source, k)?;
            out.per_method[m].push(UserHits {
                hits: hits_at_k(&ids, truth, k),
                truth: truth.len(),
            });
        }
    }
    Ok(out)
}

fn row(experiment: Experiment, seed: u64, cohort: &str, source: &str, config: &str, k: usize) -> Row {
    Row {
        experiment: experiment.name().into(),
        seed,
        cohort: cohort.into(),
        source: source.into(),
        config: config.into(),
        k,
        recall: None,
        aux_name: String::new(),
        aux_value: None,
    }
}

#[allow(clippy::too_many_arguments)]
fn recall_row(
    experiment: Experiment,
    seed: u64,
    cohort: &str,
    source: &str,
    config: &str,
    k: usize,
    outcomes: &[UserHits],
    how: Aggregation,
) -> Row {
    let mut r = row(experiment, seed, cohort, source, config, k);
    match aggregate(outcomes, how) {
        Some(x) => {
            r.recall = Some(x);
            r.aux_name = "n_users".into();
            r.aux_value = Some(outcomes.iter().filter(|o| o.truth > 0).count() as f64);
        }
        None => {
            r.aux_name = "empty_cohort".into();
            r.aux_value = Some(1.0);
        }
    }
    r
}

pub const TABLE1_SOURCES: [Source; 4] = [Source::TwoTower, Source::ItemKnn, Source::ContentKnn, Source::Radar];

/// Recall@k_eval of each standalone source and of the stored entries.
pub fn evaluate_sources(session: &ExperimentSession, cfg: &RunConfig) -> Result<ExperimentReport> {
    let k = cfg.eval.k_eval;
    let o = collect(session, cfg, &TABLE1_SOURCES, k)?;
    let mut report = ExperimentReport::default();
    for (m, source) in TABLE1_SOURCES.iter().enumerate() {
        let mut r = recall_row(Experiment::Table1, session.seed, "all", source.name(), "default", k, &o.per_method[m], cfg.eval.aggregation);
        if *source == Source::Radar && session.sim.store.is_empty() {
            r.recall = None;
            r.aux_name = "store_empty".into();
            r.aux_value = Some(1.0);
        }
        report.rows.push(r);
    }
    report.canonicalize();
    Ok(report)
}

/// Radar and two-tower recall within each cohort, plus the all-user rows.
pub fn cohort_breakdown(session: &ExperimentSession, cfg: &RunConfig) -> Result<ExperimentReport> {
    let k = cfg.eval.k_eval;
    let methods = [Source::Radar, Source::TwoTower];
    let o = collect(session, cfg, &methods, k)?;
    let mut report = ExperimentReport::default();
    for (m, source) in methods.iter().enumerate() {
        let all = &o.per_method[m];
        report.rows.push(recall_row(Experiment::Table3, session.seed, "all", source.name(), "default", k, all, cfg.eval.aggregation));
        if !cfg.eval.cohort_split {
            continue;
        }
        for cohort in Cohort::ALL {
            let within: Vec<UserHits> = all
                .iter()
                .zip(&o.cohorts)
                .filter(|(_, c)| **c == cohort)
                .map(|(h, _)| *h)
                .collect();
            report.rows.push(recall_row(
                Experiment::Table3,
                session.seed,
                cohort.name(),
                source.name(),
                "default",
                k,
                &within,
                cfg.eval.aggregation,
            ));
        }
    }
    report.canonicalize();
    Ok(report)
}

/// Recall at each k in `ks` (strictly increasing) for one online source.
pub fn recall_curve(
    session: &ExperimentSession,
    cfg: &RunConfig,
    source: Source,
    ks: &[usize],
) -> Result<Vec<(usize, Option<f64>)>> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let mut per_k: Vec<Vec<UserHits>> = vec![Vec::new(); ks.len()];
    for (user, _, truth) in session.eligible() {
        let ids = session.ranked_ids(cfg, user, source, k_max)?;
        for (slot, &k) in per_k.iter_mut().zip(ks) {
            slot.push(UserHits {
                hits: hits_at_k(&ids, truth, k),
                truth: truth.len(),
            });
        }
    }
    Ok(ks
        .iter()
        .zip(&per_k)
        .map(|(&k, o)| (k, aggregate(o, cfg.eval.aggregation)))
        .collect())
}

/// (config label, offline scorer, pool multiplier) for the scaling grid.
pub const ABLATION_CELLS: [(&str, ScorerKind, usize); 4] = [
    ("ranker_pool50", ScorerKind::Ranker, 50),
    ("ranker_pool1", ScorerKind::Ranker, 1),
    ("preranker_pool50", ScorerKind::PreRanker, 50),
    ("preranker_pool1", ScorerKind::PreRanker, 1),
];

/// Re-runs the offline ranking at eval time under each grid cell and
/// measures the recall of the resulting top store_k lists. All cells share
/// the noise draw an online request at eval time would see, so the
/// pre-ranker/multiplier-1 cell is the online pre-ranked list.
pub fn ablation_grid(session: &ExperimentSession, cfg: &RunConfig) -> Result<ExperimentReport> {
    let k = cfg.eval.k_eval;
    let t = session.eval_time;
    let w = &session.sim.world;
    let tables = &session.sim.tables;
    let live = w.live_items(t).len();
    let epoch = Epoch::Request { hour: t };
    let mut per_cell: Vec<Vec<UserHits>> = vec![Vec::new(); ABLATION_CELLS.len()];
    for (user, _, truth) in session.eligible() {
        let profile = w.user(user)?;
        let mut pools = Vec::new();
        for mult in [50usize, 1] {
            let per_source = (mult * cfg.retrieval.k_per_source).min(live);
            pools.push((mult, offline_pool(w, tables, profile, &cfg.retrieval.sources, per_source, t)?.0));
        }
        for (c, (_, kind, mult)) in ABLATION_CELLS.iter().enumerate() {
            let pool = &pools.iter().find(|(m, _)| m == mult).expect("pool built").1;
            let ranked = rank_pool(w, tables, cfg.scorers.get(*kind), profile, pool, t, epoch, cfg.pipeline.store_k)?;
            let ids: Vec<ItemId> = ranked.into_iter().map(|(i, _)| i).collect();
            per_cell[c].push(UserHits {
                hits: hits_at_k(&ids, truth, k),
                truth: truth.len(),
            });
        }
    }
    let mut report = ExperimentReport::default();
    for (c, (label, _, _)) in ABLATION_CELLS.iter().enumerate() {
        report.rows.push(recall_row(Experiment::Table2, session.seed, "all", "radar", label, k, &per_cell[c], cfg.eval.aggregation));
    }
    report.canonicalize();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapSummary {
    pub mean: f64,
    /// Nearest-rank quantiles at 0%, 10%, ..., 100%.
    pub deciles: [f64; 11],
    pub n_traces: usize,
}

/// Mean and deciles of the radar-unique fraction over traces that had a
/// radar entry. `None` when no trace did.
pub fn overlap_metrics(traces: &[ServeTrace]) -> Option<OverlapSummary> {
    let mut xs: Vec<f64> = traces.iter().filter_map(|t| t.radar_unique_fraction).collect();
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let mut deciles = [0.0; 11];
    for (i, d) in deciles.iter_mut().enumerate() {
        let idx = ((i as f64 / 10.0) * (n - 1) as f64).round() as usize;
        *d = xs[idx];
    }
    Some(OverlapSummary {
        mean: xs.iter().sum::<f64>() / n as f64,
        deciles,
        n_traces: n,
    })
}

/// Serves every user at eval time with the freshness boost off and at the
/// tuned weight, and reports the radar-unique fraction of each arm.
pub fn overlap_experiment(session: &ExperimentSession, cfg: &RunConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    for weight in [0.0, cfg.eval.overlap_boost] {
        let mut funnel = cfg.funnel();
        funnel.radar_enabled = true;
        funnel.retrieval.freshness_boost_weight = weight;
        let s = &session.sim;
        let mut traces = Vec::with_capacity(s.world.users.len());
        for u in &s.world.users {
            traces.push(serve(&s.world, &s.tables, &s.config.models, &funnel, &s.store, u.id, session.eval_time)?);
        }
        let label = format!("boost_{weight:.2}");
        let k = funnel.retrieval.k_per_source;
        let mut push = |name: String, value: Option<f64>| {
            let mut r = row(Experiment::Overlap, session.seed, "all", "radar", &label, k);
            r.aux_name = name;
            r.aux_value = value;
            report.rows.push(r);
        };
        match overlap_metrics(&traces) {
            Some(o) => {
                push("unique_fraction_mean".into(), Some(o.mean));
                for (i, d) in o.deciles.iter().enumerate() {
                    push(format!("unique_fraction_p{:03}", i * 10), Some(*d));
                }
                push("n_traces".into(), Some(o.n_traces as f64));
            }
            None => push("no_radar_hits".into(), Some(1.0)),
        }
    }
    report.canonicalize();
    Ok(report)
}

fn needs_pipeline(e: Experiment) -> bool {
    matches!(e, Experiment::Table1 | Experiment::Table3 | Experiment::Overlap)
}

fn run_on(session: &ExperimentSession, cfg: &RunConfig, e: Experiment) -> Result<ExperimentReport> {
    match e {
        Experiment::Table1 => evaluate_sources(session, cfg),
        Experiment::Table2 => ablation_grid(session, cfg),
        Experiment::Table3 => cohort_breakdown(session, cfg),
        Experiment::Overlap => overlap_experiment(session, cfg),
        Experiment::Curve => {
            let points = recall_curve(session, cfg, Source::TwoTower, &cfg.eval.curve_ks)?;
            let mut report = ExperimentReport::default();
            for (k, recall) in points {
                let mut r = row(Experiment::Curve, session.seed, "all", Source::TwoTower.name(), "default", k);
                r.recall = recall;
                report.rows.push(r);
            }
            Ok(report)
        }
    }
}

/// Runs several experiments over every seed, sharing one session per seed.
pub fn run_experiments(cfg: &RunConfig, which: &[Experiment]) -> Result<Vec<ExperimentReport>> {
    let with_pipeline = which.iter().any(|e| needs_pipeline(*e));
    let mut reports = vec![ExperimentReport::default(); which.len()];
    for &seed in &cfg.eval.seeds {
        let session = ExperimentSession::prepare(cfg, seed, with_pipeline)?;
        for (report, &e) in reports.iter_mut().zip(which) {
            report.extend(run_on(&session, cfg, e)?);
        }
    }
    for r in reports.iter_mut() {
        r.canonicalize();
    }
    Ok(reports)
}

pub fn run_experiment(cfg: &RunConfig, which: Experiment) -> Result<ExperimentReport> {
    Ok(run_experiments(cfg, &[which])?.remove(0))
}
