//! Exact brute-force top-K candidate generation per retrieval source.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId};
use crate::scorers::{Epoch, ScorerKind, ScorerSpec, Tables, UserScorer};
use crate::worldgen::{UserProfile, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TwoTower,
    ItemKnn,
    ContentKnn,
    RuleBased,
    Radar,
}

impl Source {
    pub const ONLINE: [Source; 4] = [
        Source::TwoTower,
        Source::ItemKnn,
        Source::ContentKnn,
        Source::RuleBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Source::TwoTower => "two_tower",
            Source::ItemKnn => "item_knn",
            Source::ContentKnn => "content_knn",
            Source::RuleBased => "rule_based",
            Source::Radar => "radar",
        }
    }

    /// Dedup precedence: lower wins. Radar copies are kept over online ones.
    pub fn precedence(self) -> u8 {
        match self {
            Source::Radar => 0,
            Source::TwoTower => 1,
            Source::ItemKnn => 2,
            Source::ContentKnn => 3,
            Source::RuleBased => 4,
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    fn scorer(self) -> Option<ScorerKind> {
        match self {
            Source::TwoTower => Some(ScorerKind::TwoTower),
            Source::ItemKnn => Some(ScorerKind::ItemKnn),
            Source::ContentKnn => Some(ScorerKind::ContentKnn),
            Source::RuleBased | Source::Radar => None,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Retrieved,
    PreRanked,
    RadarDirect,
    FinalRanked,
}

impl Stage {
    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of source tags carried by a candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SourceSet(u8);

impl SourceSet {
    pub fn single(source: Source) -> Self {
        SourceSet(source.bit())
    }

    pub fn contains(self, source: Source) -> bool {
        self.0 & source.bit() != 0
    }

    pub fn union(self, other: SourceSet) -> Self {
        SourceSet(self.0 | other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Source> {
        [
            Source::TwoTower,
            Source::ItemKnn,
            Source::ContentKnn,
            Source::RuleBased,
            Source::Radar,
        ]
        .into_iter()
        .filter(move |s| self.contains(*s))
    }

    /// The highest-precedence source in the set.
    pub fn primary(self) -> Option<Source> {
        self.iter().min_by_key(|s| s.precedence())
    }
}

/// Every stage a candidate has passed through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StageSet(u8);

impl StageSet {
    pub fn contains(self, stage: Stage) -> bool {
        self.0 & stage.bit() != 0
    }

    fn with(self, stage: Stage) -> Self {
        StageSet(self.0 | stage.bit())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub item: ItemId,
    pub score: f64,
    pub sources: SourceSet,
    pub stage: Stage,
    pub history: StageSet,
}

impl Candidate {
    pub fn retrieved(item: ItemId, score: f64, source: Source) -> Self {
        Candidate {
            item,
            score,
            sources: SourceSet::single(source),
            stage: Stage::Retrieved,
            history: StageSet::default().with(Stage::Retrieved),
        }
    }

    pub fn radar(item: ItemId, score: f64) -> Self {
        Candidate {
            item,
            score,
            sources: SourceSet::single(Source::Radar),
            stage: Stage::RadarDirect,
            history: StageSet::default().with(Stage::RadarDirect),
        }
    }

    /// Moves the candidate to a later stage. Radar candidates can only go
    /// straight to final ranking.
    pub fn advance(&mut self, to: Stage) -> Result<()> {
        let ok = matches!(
            (self.stage, to),
            (Stage::Retrieved, Stage::PreRanked)
                | (Stage::PreRanked, Stage::FinalRanked)
                | (Stage::RadarDirect, Stage::FinalRanked)
        );
        if !ok {
            return Err(Error::StageViolation(format!(
                "item {} cannot move from {:?} to {:?}",
                self.item, self.stage, to
            )));
        }
        self.stage = to;
        self.history = self.history.with(to);
        Ok(())
    }
}

/// Score descending, then item id ascending. A total order over distinct items.
#[inline]
pub fn rank_order(a_score: f64, a_item: ItemId, b_score: f64, b_item: ItemId) -> Ordering {
    b_score.total_cmp(&a_score).then(a_item.cmp(&b_item))
}

/// Exact top-k of `(item, score)` pairs under [`rank_order`]. Partial
/// selection followed by a sort of the prefix.
pub fn top_k(mut scored: Vec<(ItemId, f64)>, k: usize) -> Vec<(ItemId, f64)> {
    let cmp = |a: &(ItemId, f64), b: &(ItemId, f64)| rank_order(a.1, a.0, b.1, b.0);
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateList {
    pub entries: Vec<Candidate>,
    pub produced_at: Hour,
}

impl CandidateList {
    pub fn new(produced_at: Hour) -> Self {
        CandidateList {
            entries: Vec::new(),
            produced_at,
        }
    }

    pub fn from_ranked(ranked: Vec<(ItemId, f64)>, source: Source, produced_at: Hour) -> Self {
        CandidateList {
            entries: ranked
                .into_iter()
                .map(|(item, score)| Candidate::retrieved(item, score, source))
                .collect(),
            produced_at,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().map(|c| c.item)
    }

    pub fn sort(&mut self) {
        self.entries
            .sort_unstable_by(|a, b| rank_order(a.score, a.item, b.score, b.item));
    }

    /// Sorted by the standard order and free of duplicate items.
    pub fn is_canonical(&self) -> bool {
        let sorted = self
            .entries
            .windows(2)
            .all(|w| rank_order(w[0].score, w[0].item, w[1].score, w[1].item) == Ordering::Less);
        let mut ids: Vec<ItemId> = self.items().collect();
        ids.sort_unstable();
        let unique = ids.windows(2).all(|w| w[0] != w[1]);
        sorted && unique
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k_per_source")]
    pub k_per_source: usize,
    #[serde(default = "default_sources")]
    pub sources: Vec<Source>,
    #[serde(default)]
    pub freshness_boost_weight: f64,
    #[serde(default = "default_tau")]
    pub freshness_tau: f64,
}

fn default_k_per_source() -> usize {
    250
}

fn default_sources() -> Vec<Source> {
    Source::ONLINE.to_vec()
}

fn default_tau() -> f64 {
    72.0
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_per_source: default_k_per_source(),
            sources: default_sources(),
            freshness_boost_weight: 0.0,
            freshness_tau: default_tau(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_source < 1 {
            return Err(Error::config("retrieval.k_per_source", "must be at least 1"));
        }
        if self.sources.is_empty() {
            return Err(Error::config("retrieval.sources", "needs at least one source"));
        }
        if self.sources.contains(&Source::Radar) {
            return Err(Error::config(
                "retrieval.sources",
                "radar is not an online retrieval source",
            ));
        }
        let mut s = self.sources.clone();
        s.sort();
        s.dedup();
        if s.len() != self.sources.len() {
            return Err(Error::config("retrieval.sources", "duplicate source"));
        }
        if !(self.freshness_boost_weight.is_finite() && self.freshness_boost_weight >= 0.0) {
            return Err(Error::config(
                "retrieval.freshness_boost_weight",
                "must be finite and non-negative",
            ));
        }
        if !(self.freshness_tau.is_finite() && self.freshness_tau > 0.0) {
            return Err(Error::config("retrieval.freshness_tau", "must be positive"));
        }
        Ok(())
    }

    pub fn boost(&self) -> Boost {
        Boost {
            weight: self.freshness_boost_weight,
            tau: self.freshness_tau,
        }
    }
}

/// Additive recency bonus `weight * exp(-age / tau)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boost {
    pub weight: f64,
    pub tau: f64,
}

impl Boost {
    pub const NONE: Boost = Boost {
        weight: 0.0,
        tau: 72.0,
    };

    #[inline]
    pub fn value(self, age_hours: Hour) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.weight * (-(age_hours as f64) / self.tau).exp()
        }
    }
}

/// Scores every live item the source can see, boost included.
pub fn score_source(
    world: &World,
    tables: &Tables,
    user: &UserProfile,
    source: Source,
    t: Hour,
    boost: Boost,
) -> Result<Vec<(ItemId, f64)>> {
    let live = world.live_items(t);
    if source == Source::RuleBased {
        return Ok(live
            .iter()
            .map(|it| (it.id, it.quality + boost.value(t - it.created_at)))
            .collect());
    }
    let kind = source
        .scorer()
        .ok_or_else(|| Error::UnknownSource(source.name().to_string()))?;
    let spec = ScorerSpec::default_for(kind);
    let scorer = UserScorer::prepare(&spec, world, tables, user, t, Epoch::Request { hour: t })?;
    Ok(live
        .iter()
        .filter_map(|it| {
            scorer
                .score(it)
                .map(|s| (it.id, s + boost.value(t - it.created_at)))
        })
        .collect())
}

/// Exact top-k for one user and source. A `k` beyond the catalog returns
/// the whole scored catalog, ranked.
pub fn retrieve_topk(
    world: &World,
    tables: &Tables,
    user: &UserProfile,
    source: Source,
    k: usize,
    t: Hour,
    boost: Boost,
) -> Result<CandidateList> {
    let scored = score_source(world, tables, user, source, t, boost)?;
    Ok(CandidateList::from_ranked(top_k(scored, k), source, t))
}

/// User-independent popularity source: quality plus freshness boost.
pub fn rule_based_retrieve(world: &World, k: usize, t: Hour, boost: Boost) -> CandidateList {
    let scored = world
        .live_items(t)
        .iter()
        .map(|it| (it.id, it.quality + boost.value(t - it.created_at)))
        .collect();
    CandidateList::from_ranked(top_k(scored, k), Source::RuleBased, t)
}
