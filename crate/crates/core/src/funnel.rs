//! Online serving: multi-source retrieval plus a store fetch, pre-ranking of
//! the standard candidates only, merge and dedup, then final ranking.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, UserId};
use crate::retrieval::{retrieve_topk, Candidate, CandidateList, RetrievalConfig, Source, Stage};
use crate::scorers::{Epoch, ModelSuite, ScorerKind, Tables, UserScorer};
use crate::store::RadarStore;
use crate::worldgen::World;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunnelConfig {
    /// Filled from the top-level retrieval section of the run config.
    #[serde(skip)]
    pub retrieval: RetrievalConfig,
    #[serde(default = "default_prerank_keep")]
    pub prerank_keep: usize,
    #[serde(default = "default_slate_size")]
    pub slate_size: usize,
    #[serde(default = "default_true")]
    pub radar_enabled: bool,
    #[serde(default = "default_true")]
    pub rescore_radar: bool,
}

fn default_prerank_keep() -> usize {
    200
}

fn default_slate_size() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            retrieval: RetrievalConfig::default(),
            prerank_keep: default_prerank_keep(),
            slate_size: default_slate_size(),
            radar_enabled: true,
            rescore_radar: true,
        }
    }
}

impl FunnelConfig {
    pub fn validate(&self, store_k: usize) -> Result<()> {
        self.retrieval.validate()?;
        if self.prerank_keep < 1 {
            return Err(Error::config("funnel.prerank_keep", "must be at least 1"));
        }
        if self.slate_size < 1 {
            return Err(Error::config("funnel.slate_size", "must be at least 1"));
        }
        let budget = self.prerank_keep + if self.radar_enabled { store_k } else { 0 };
        if self.slate_size > budget {
            return Err(Error::config(
                "funnel.slate_size",
                format!("{} exceeds the {budget} candidates that can reach final ranking", self.slate_size),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeTrace {
    pub user: UserId,
    pub t: Hour,
    pub retrieved: Vec<(Source, usize)>,
    /// Distinct items across all online sources, before pre-ranking.
    pub retrieved_union: usize,
    pub preranked: usize,
    pub radar_hit: bool,
    pub radar_staleness: Option<Hour>,
    pub radar_count: usize,
    pub merged: usize,
    pub dedup_removed: usize,
    pub slate: CandidateList,
    /// Stored offline scores of the radar candidates, kept for analysis.
    pub radar_stored: Vec<(ItemId, f64)>,
    /// Share of radar items not produced by any online source in this
    /// request. `None` without a non-empty radar entry.
    pub radar_unique_fraction: Option<f64>,
}

impl ServeTrace {
    /// Count conservation: merged = preranked + radar - removed.
    pub fn counts_conserved(&self) -> bool {
        self.merged + self.dedup_removed == self.preranked + self.radar_count
    }

    pub fn total_retrieved(&self) -> usize {
        self.retrieved.iter().map(|(_, n)| n).sum()
    }
}

fn list_precedence(list: &CandidateList) -> u8 {
    list.entries
        .iter()
        .filter_map(|c| c.sources.primary())
        .map(Source::precedence)
        .min()
        .unwrap_or(u8::MAX)
}

/// Share of `radar` items absent from `online`; `None` for an empty radar list.
pub fn unique_fraction(radar: &CandidateList, online: &CandidateList) -> Option<f64> {
    if radar.is_empty() {
        return None;
    }
    let online_items: HashSet<ItemId> = online.items().collect();
    let unique = radar.items().filter(|i| !online_items.contains(i)).count();
    Some(unique as f64 / radar.len() as f64)
}

/// Unions candidate lists. Duplicates keep the copy from the list of
/// highest source precedence (radar first) and collect every source tag.
pub fn merge_dedup(lists: &[CandidateList]) -> CandidateList {
    let mut order: Vec<&CandidateList> = lists.iter().collect();
    order.sort_by_key(|l| list_precedence(l));
    let produced_at = lists.iter().map(|l| l.produced_at).max().unwrap_or(0);
    let mut out: Vec<Candidate> = Vec::new();
    let mut slot: HashMap<ItemId, usize> = HashMap::new();
    for list in order {
        for c in &list.entries {
            match slot.get(&c.item) {
                Some(&i) => out[i].sources = out[i].sources.union(c.sources),
                None => {
                    slot.insert(c.item, out.len());
                    out.push(c.clone());
                }
            }
        }
    }
    let mut merged = CandidateList {
        entries: out,
        produced_at,
    };
    merged.sort();
    merged
}

/// Re-scores retrieved candidates with the pre-ranker and keeps the best.
pub fn prerank(
    candidates: CandidateList,
    world: &World,
    tables: &Tables,
    models: &ModelSuite,
    user: UserId,
    t: Hour,
    keep: usize,
) -> Result<CandidateList> {
    if let Some(bad) = candidates.entries.iter().find(|c| c.stage != Stage::Retrieved) {
        return Err(Error::StageViolation(format!(
            "item {} reached pre-ranking in stage {:?}",
            bad.item, bad.stage
        )));
    }
    let profile = world.user(user)?;
    let scorer = UserScorer::prepare(
        models.get(ScorerKind::PreRanker),
        world,
        tables,
        profile,
        t,
        Epoch::Request { hour: t },
    )?;
    let mut entries = candidates.entries;
    for c in entries.iter_mut() {
        let item = world
            .item(c.item)
            .filter(|it| it.created_at <= t)
            .ok_or(Error::ItemNotLive { item: c.item, hour: t })?;
        c.score = scorer.score(item).ok_or(Error::MissingTable("pre-ranker"))?;
        c.advance(Stage::PreRanked)?;
    }
    let mut list = CandidateList {
        entries,
        produced_at: t,
    };
    list.sort();
    list.entries.truncate(keep);
    Ok(list)
}

/// Serves one request for `user` at hour `t`.
pub fn serve(
    world: &World,
    tables: &Tables,
    models: &ModelSuite,
    config: &FunnelConfig,
    store: &RadarStore,
    user: UserId,
    t: Hour,
) -> Result<ServeTrace> {
    let profile = world.user(user)?;
    let rc = &config.retrieval;
    let boost = rc.boost();

    let mut online = Vec::with_capacity(rc.sources.len());
    for &source in &rc.sources {
        online.push(retrieve_topk(world, tables, profile, source, rc.k_per_source, t, boost)?);
    }
    let retrieved = rc.sources.iter().copied().zip(online.iter().map(|l| l.len())).collect();

    let fetched = if config.radar_enabled {
        store.get_entry(user, t)
    } else {
        None
    };
    let (radar_list, radar_staleness) = match &fetched {
        Some((entry, staleness)) => (
            CandidateList {
                entries: entry
                    .items
                    .iter()
                    .map(|&(item, score)| Candidate::radar(item, score))
                    .collect(),
                produced_at: entry.refreshed_at,
            },
            Some(*staleness),
        ),
        None => (CandidateList::new(t), None),
    };

    let union = merge_dedup(&online);
    let radar_unique_fraction = unique_fraction(&radar_list, &union);
    let retrieved_union = union.len();

    let preranked = prerank(union, world, tables, models, user, t, config.prerank_keep)?;
    let n_preranked = preranked.len();
    let radar_count = radar_list.len();
    let radar_stored: Vec<(ItemId, f64)> = radar_list.entries.iter().map(|c| (c.item, c.score)).collect();

    let merged = merge_dedup(&[radar_list, preranked]);
    let n_merged = merged.len();

    let ranker = UserScorer::prepare(
        models.get(ScorerKind::Ranker),
        world,
        tables,
        profile,
        t,
        Epoch::Request { hour: t },
    )?;
    let mut entries = merged.entries;
    for c in entries.iter_mut() {
        let keep_stored = !config.rescore_radar && c.stage == Stage::RadarDirect;
        if !keep_stored {
            let item = world
                .item(c.item)
                .filter(|it| it.created_at <= t)
                .ok_or(Error::ItemNotLive { item: c.item, hour: t })?;
            c.score = ranker.score(item).ok_or(Error::MissingTable("ranker"))?;
        }
        c.advance(Stage::FinalRanked)?;
    }
    let mut slate = CandidateList {
        entries,
        produced_at: t,
    };
    slate.sort();
    slate.entries.truncate(config.slate_size);

    Ok(ServeTrace {
        user,
        t,
        retrieved,
        retrieved_union,
        preranked: n_preranked,
        radar_hit: fetched.is_some(),
        radar_staleness,
        radar_count,
        merged: n_merged,
        dedup_removed: n_preranked + radar_count - n_merged,
        slate,
        radar_stored,
        radar_unique_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::SourceSet;
    use crate::sim::{SimConfig, Simulation};
    use crate::worldgen::{generate_world, WorldConfig};

    fn list(source: Source, items: &[(u32, f64)]) -> CandidateList {
        let entries = items
            .iter()
            .map(|&(i, s)| {
                if source == Source::Radar {
                    Candidate::radar(ItemId(i), s)
                } else {
                    Candidate::retrieved(ItemId(i), s, source)
                }
            })
            .collect();
        let mut l = CandidateList { entries, produced_at: 0 };
        l.sort();
        l
    }

    #[test]
    fn radar_copy_wins_and_tags_accumulate() {
        let radar = list(Source::Radar, &[(1, 0.9)]);
        let dnn = list(Source::TwoTower, &[(1, 0.7), (2, 0.5)]);
        // Input order must not matter.
        for lists in [vec![radar.clone(), dnn.clone()], vec![dnn, radar]] {
            let m = merge_dedup(&lists);
            assert_eq!(m.len(), 2);
            assert_eq!((m.entries[0].item, m.entries[0].score), (ItemId(1), 0.9));
            assert_eq!(m.entries[0].stage, Stage::RadarDirect);
            assert_eq!(
                m.entries[0].sources,
                SourceSet::single(Source::Radar).union(SourceSet::single(Source::TwoTower))
            );
            assert_eq!((m.entries[1].item, m.entries[1].score), (ItemId(2), 0.5));
            assert_eq!(m.entries[1].sources, SourceSet::single(Source::TwoTower));
        }
    }

    #[test]
    fn unique_fraction_counts_radar_items_missing_online() {
        // 800 online candidates, 80 of which also appear among 200 radar items.
        let online: Vec<(u32, f64)> = (0..800).map(|i| (i, 1.0)).collect();
        let radar: Vec<(u32, f64)> = (720..920).map(|i| (i, 1.0)).collect();
        let f = unique_fraction(&list(Source::Radar, &radar), &list(Source::TwoTower, &online)).unwrap();
        assert!((f - 0.6).abs() < 1e-12);
        assert_eq!(unique_fraction(&CandidateList::new(0), &list(Source::TwoTower, &online)), None);
        let all_dup = list(Source::Radar, &online[..10]);
        assert_eq!(unique_fraction(&all_dup, &list(Source::TwoTower, &online)), Some(0.0));
    }

    #[test]
    fn merge_of_empty_and_disjoint_lists() {
        assert!(merge_dedup(&[CandidateList::new(0), CandidateList::new(0)]).is_empty());
        assert!(merge_dedup(&[]).is_empty());
        let a = list(Source::ItemKnn, &[(1, 0.1), (2, 0.2), (3, 0.3)]);
        let b = list(Source::ContentKnn, &[(4, 0.4), (5, 0.5), (6, 0.6), (7, 0.05)]);
        let m = merge_dedup(&[a, b]);
        assert_eq!(m.len(), 7);
        assert!(m.is_canonical());
    }

    fn sim(seed: u64) -> Simulation {
        let mut c = WorldConfig::new(30, 600, seed);
        c.latent_dim = 8;
        c.session_exposure = 100;
        let mut cfg = SimConfig::default();
        cfg.models.two_tower.embedding_rank = 8;
        cfg.retrieval.k_per_source = 20;
        cfg.pipeline.store_k = 30;
        Simulation::new(generate_world(c).unwrap(), cfg).unwrap()
    }

    fn funnel(s: &Simulation) -> FunnelConfig {
        FunnelConfig {
            retrieval: s.config.retrieval.clone(),
            prerank_keep: 25,
            slate_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn radar_direct_candidate_cannot_be_preranked() {
        let s = sim(1);
        let l = list(Source::Radar, &[(1, 0.9)]);
        let r = prerank(l, &s.world, &s.tables, &s.config.models, UserId(0), 0, 10);
        assert!(matches!(r, Err(Error::StageViolation(_))));
    }

    #[test]
    fn noiseless_prerank_follows_true_logit() {
        let mut s = sim(2);
        s.config.models.pre_ranker.noise_sigma = 0.0;
        s.config.models.pre_ranker.shrinkage_half_count = 0;
        let t = 0;
        let items: Vec<(u32, f64)> = (0..40).map(|i| (i, 0.0)).collect();
        let out = prerank(list(Source::TwoTower, &items), &s.world, &s.tables, &s.config.models, UserId(3), t, 100).unwrap();
        assert_eq!(out.len(), 40);
        let user = s.world.user(UserId(3)).unwrap();
        let mut truth: Vec<(ItemId, f64)> = (0..40)
            .map(|i| (ItemId(i), s.world.true_logit(user, &s.world.items[i as usize], t).unwrap()))
            .collect();
        truth.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(out.items().collect::<Vec<_>>(), truth.iter().map(|x| x.0).collect::<Vec<_>>());
        assert!(out.entries.iter().all(|c| c.stage == Stage::PreRanked));
    }

    #[test]
    fn radar_miss_degrades_to_standard_sources() {
        let s = sim(3);
        let f = funnel(&s);
        let tr = serve(&s.world, &s.tables, &s.config.models, &f, &s.store, UserId(1), 0).unwrap();
        assert!(!tr.radar_hit);
        assert_eq!(tr.radar_unique_fraction, None);
        assert_eq!(tr.slate.len(), 10);
        assert!(tr.slate.entries.iter().all(|c| !c.sources.contains(Source::Radar)));
        assert!(tr.counts_conserved());
    }

    #[test]
    fn disabled_radar_equals_plain_funnel() {
        let mut s = sim(4);
        s.advance_to(30, |_, _| Ok(())).unwrap();
        let mut f = funnel(&s);
        f.radar_enabled = false;
        let t = s.clock();
        let off = serve(&s.world, &s.tables, &s.config.models, &f, &s.store, UserId(2), t).unwrap();
        let empty = RadarStore::new(30);
        let plain = serve(&s.world, &s.tables, &s.config.models, &f, &empty, UserId(2), t).unwrap();
        assert_eq!(off, plain);
        assert!(!off.radar_hit);
    }

    #[test]
    fn served_traces_respect_bypass_and_conservation() {
        let mut s = sim(5);
        let f = funnel(&s);
        let mut traces = Vec::new();
        s.advance_to(24 * 5, |sim, e| {
            traces.push(serve(&sim.world, &sim.tables, &sim.config.models, &f, &sim.store, e.user, e.time)?);
            Ok(())
        })
        .unwrap();
        assert!(traces.iter().any(|t| t.radar_hit));
        for tr in &traces {
            assert!(tr.counts_conserved());
            assert!(tr.slate.is_canonical());
            assert_eq!(tr.slate.len(), f.slate_size.min(tr.merged));
            for c in &tr.slate.entries {
                assert!(!(c.history.contains(Stage::RadarDirect) && c.history.contains(Stage::PreRanked)));
                assert_eq!(c.stage, Stage::FinalRanked);
            }
            if let Some(u) = tr.radar_unique_fraction {
                assert!((0.0..=1.0).contains(&u));
            }
        }
    }

    #[test]
    fn slate_budget_validation() {
        let f = FunnelConfig {
            slate_size: 500,
            ..Default::default()
        };
        assert!(f.validate(200).is_err());
        assert!(FunnelConfig::default().validate(200).is_ok());
    }
}
