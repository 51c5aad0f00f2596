//! The offline path: activity-based refresh scheduling inside an off-peak
//! window, large-pool candidate generation, full-ranker scoring, and storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, UserId, HOURS_PER_DAY};
use crate::retrieval::{score_source, top_k, Boost, RetrievalConfig, Source};
use crate::scorers::{Epoch, ModelSuite, ScorerKind, ScorerSpec, Tables, UserScorer};
use crate::sim::Simulation;
use crate::store::{quantize, RadarEntry, RadarStore, DEFAULT_STORE_K};
use crate::worldgen::{Cohort, PerCohort, UserProfile, World};

/// Daily window `[start, end)` in hours of the day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffPeak(pub Hour, pub Hour);

impl OffPeak {
    pub fn contains(self, t: Hour) -> bool {
        let h = t % HOURS_PER_DAY;
        self.0 <= h && h < self.1
    }

    /// First hour at or after `t` inside the window.
    pub fn next_open(self, t: Hour) -> Hour {
        let day = t / HOURS_PER_DAY;
        let h = t % HOURS_PER_DAY;
        if h < self.0 {
            day * HOURS_PER_DAY + self.0
        } else if h < self.1 {
            t
        } else {
            (day + 1) * HOURS_PER_DAY + self.0
        }
    }

    pub fn len(self) -> Hour {
        self.1 - self.0
    }

    pub fn is_empty(self) -> bool {
        self.1 <= self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_cadence")]
    pub cadence_hours: PerCohort<Hour>,
    #[serde(default = "default_off_peak")]
    pub off_peak: OffPeak,
    #[serde(default = "default_pool_multiplier")]
    pub pool_multiplier: usize,
    #[serde(default = "default_store_k")]
    pub store_k: usize,
    #[serde(default)]
    pub refresh_seed: u64,
}

fn default_cadence() -> PerCohort<Hour> {
    PerCohort {
        highly_active: 24,
        moderately_active: 168,
        dormant: 336,
    }
}

fn default_off_peak() -> OffPeak {
    OffPeak(2, 6)
}

fn default_pool_multiplier() -> usize {
    50
}

fn default_store_k() -> usize {
    DEFAULT_STORE_K
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cadence_hours: default_cadence(),
            off_peak: default_off_peak(),
            pool_multiplier: default_pool_multiplier(),
            store_k: default_store_k(),
            refresh_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let OffPeak(start, end) = self.off_peak;
        if !(start < end && end <= HOURS_PER_DAY) {
            return Err(Error::config(
                "pipeline.off_peak",
                format!("need 0 <= start < end <= 24, got [{start}, {end})"),
            ));
        }
        if self.pool_multiplier < 1 {
            return Err(Error::config("pipeline.pool_multiplier", "must be at least 1"));
        }
        if self.store_k < 1 {
            return Err(Error::config("pipeline.store_k", "must be at least 1"));
        }
        for (name, c) in [
            ("highly_active", self.cadence_hours.highly_active),
            ("moderately_active", self.cadence_hours.moderately_active),
            ("dormant", self.cadence_hours.dormant),
        ] {
            if c == 0 {
                return Err(Error::config(
                    format!("pipeline.cadence_hours.{name}"),
                    "must be at least 1 hour",
                ));
            }
        }
        Ok(())
    }

    pub fn cadence(&self, cohort: Cohort) -> Hour {
        self.cadence_hours.get(cohort)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefreshJob {
    pub user: UserId,
    pub due_since: Hour,
    pub executed_at: Option<Hour>,
}

/// One row of the executed-job log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecutedJob {
    pub user: UserId,
    pub cohort: Cohort,
    pub due_since: Hour,
    pub executed_at: Hour,
    /// Distinct candidates scored by the offline ranker.
    pub pool_size: usize,
    /// Scorer evaluations spent: per-source pool retrieval plus ranking.
    pub compute_units: u64,
}

/// Jobs due at `now`, in user order. Empty outside the off-peak window.
pub fn due_refreshes(
    config: &PipelineConfig,
    store: &RadarStore,
    users: &[UserProfile],
    now: Hour,
) -> Vec<RefreshJob> {
    if !config.off_peak.contains(now) {
        return Vec::new();
    }
    let mut jobs: Vec<RefreshJob> = users
        .iter()
        .filter_map(|u| {
            let due_since = match store.last_refreshed(u.id) {
                None => 0,
                Some(last) => {
                    let due = last + config.cadence(u.cohort);
                    if now < due {
                        return None;
                    }
                    due
                }
            };
            Some(RefreshJob {
                user: u.id,
                due_since,
                executed_at: None,
            })
        })
        .collect();
    jobs.sort_by_key(|j| j.user);
    jobs
}

/// Union of the per-source top-`per_source` pools, without the freshness
/// boost, sorted by item id. Also returns the pre-dedup retrieved count.
pub fn offline_pool(
    world: &World,
    tables: &Tables,
    user: &UserProfile,
    sources: &[Source],
    per_source: usize,
    t: Hour,
) -> Result<(Vec<ItemId>, usize)> {
    let mut pool = Vec::new();
    for &source in sources {
        let scored = score_source(world, tables, user, source, t, Boost::NONE)?;
        pool.extend(top_k(scored, per_source).into_iter().map(|(i, _)| i));
    }
    let retrieved = pool.len();
    pool.sort_unstable();
    pool.dedup();
    Ok((pool, retrieved))
}

/// Scores a pool with `spec` under `epoch` and keeps the top `keep`, with
/// scores on the store's 6-decimal grid.
#[allow(clippy::too_many_arguments)]
pub fn rank_pool(
    world: &World,
    tables: &Tables,
    spec: &ScorerSpec,
    user: &UserProfile,
    pool: &[ItemId],
    t: Hour,
    epoch: Epoch,
    keep: usize,
) -> Result<Vec<(ItemId, f64)>> {
    let scorer = UserScorer::prepare(spec, world, tables, user, t, epoch)?;
    let mut scored = Vec::with_capacity(pool.len());
    for &id in pool {
        let item = world
            .item(id)
            .filter(|it| it.created_at <= t)
            .ok_or(Error::ItemNotLive { item: id, hour: t })?;
        let s = scorer
            .score(item)
            .ok_or(Error::MissingTable("item not covered by the scorer's table"))?;
        scored.push((id, quantize(s)));
    }
    Ok(top_k(scored, keep))
}

/// Computes and stores a fresh entry for one user at hour `t`.
#[allow(clippy::too_many_arguments)]
pub fn run_refresh(
    world: &World,
    models: &ModelSuite,
    retrieval: &RetrievalConfig,
    config: &PipelineConfig,
    tables: &Tables,
    store: &RadarStore,
    user: UserId,
    t: Hour,
) -> Result<(RadarEntry, ExecutedJob)> {
    if !config.off_peak.contains(t) {
        return Err(Error::OutsideOffPeak(t));
    }
    let profile = world.user(user)?;
    let due_since = store
        .last_refreshed(user)
        .map_or(0, |last| last + config.cadence(profile.cohort));
    let live = world.live_items(t).len();
    let per_source = (config.pool_multiplier * retrieval.k_per_source).min(live);
    let (pool, retrieved) = offline_pool(world, tables, profile, &retrieval.sources, per_source, t)?;
    let version = store.version(user) + 1;
    let epoch = Epoch::Refresh {
        seed: config.refresh_seed,
        version,
    };
    let ranked = rank_pool(
        world,
        tables,
        models.get(ScorerKind::Ranker),
        profile,
        &pool,
        t,
        epoch,
        config.store_k,
    )?;
    let entry = RadarEntry::new(user, version, t, ranked);
    store.put_entry(entry.clone())?;
    let job = ExecutedJob {
        user,
        cohort: profile.cohort,
        due_since,
        executed_at: t,
        pool_size: pool.len(),
        compute_units: (retrieved + pool.len()) as u64,
    };
    Ok((entry, job))
}

/// Hour at which the refresh following one executed at `t` will run.
pub fn next_refresh(config: &PipelineConfig, cohort: Cohort, t: Hour) -> Hour {
    config.off_peak.next_open(t + config.cadence(cohort))
}

/// Executes every job due at hour `t`, in user order.
///
/// With `superseded_before = Some(cutoff)`, a job whose successor runs
/// before `cutoff` only advances the user's version and refresh time with
/// an empty list: nothing reads the store before `cutoff`, and scheduling
/// depends only on refresh times, so the store at `cutoff` is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn run_due(
    world: &World,
    models: &ModelSuite,
    retrieval: &RetrievalConfig,
    config: &PipelineConfig,
    tables: &Tables,
    store: &RadarStore,
    t: Hour,
    superseded_before: Option<Hour>,
) -> Result<Vec<ExecutedJob>> {
    let mut done = Vec::new();
    for job in due_refreshes(config, store, &world.users, t) {
        let cohort = world.user(job.user)?.cohort;
        if superseded_before.is_some_and(|cutoff| next_refresh(config, cohort, t) < cutoff) {
            let version = store.version(job.user) + 1;
            store.put_entry(RadarEntry::new(job.user, version, t, Vec::new()))?;
            done.push(ExecutedJob {
                user: job.user,
                cohort,
                due_since: job.due_since,
                executed_at: t,
                pool_size: 0,
                compute_units: 0,
            });
        } else {
            done.push(run_refresh(world, models, retrieval, config, tables, store, job.user, t)?.1);
        }
    }
    Ok(done)
}

/// Steps the simulation from its current clock to `t_end`, running the
/// pipeline at every off-peak hour, and returns the executed-job log.
pub fn run_pipeline(sim: &mut Simulation, t_end: Hour) -> Result<Vec<ExecutedJob>> {
    let before = sim.jobs.len();
    sim.advance_to(t_end, |_, _| Ok(()))?;
    Ok(sim.jobs[before..].to_vec())
}
