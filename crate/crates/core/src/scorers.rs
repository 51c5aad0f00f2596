//! The model hierarchy: two-tower retrieval, item-based CF, content KNN,
//! the pre-ranker, and the full ranker. Each is a noisy observer of the
//! world's oracle logit whose fidelity is set by its [`ScorerSpec`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, UserId};
use crate::keyed;
use crate::worldgen::{dot, Item, UserProfile, World};

/// How many recent engagements the KNN scorers look at.
pub const KNN_HISTORY_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    TwoTower,
    ItemKnn,
    ContentKnn,
    PreRanker,
    Ranker,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::TwoTower => "two_tower",
            ScorerKind::ItemKnn => "item_knn",
            ScorerKind::ContentKnn => "content_knn",
            ScorerKind::PreRanker => "pre_ranker",
            ScorerKind::Ranker => "ranker",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    /// Two-tower only: number of latent coordinates the towers observe.
    pub embedding_rank: usize,
    pub noise_sigma: f64,
    /// History size at which personalization is half strength.
    pub shrinkage_half_count: usize,
    pub seed: u64,
}

impl ScorerSpec {
    pub fn default_for(kind: ScorerKind) -> Self {
        let noise_sigma = match kind {
            ScorerKind::TwoTower => 0.3,
            ScorerKind::PreRanker => 0.5,
            ScorerKind::Ranker => 0.05,
            ScorerKind::ItemKnn | ScorerKind::ContentKnn => 0.0,
        };
        ScorerSpec {
            kind,
            embedding_rank: 16,
            noise_sigma,
            shrinkage_half_count: 5,
            seed: 0,
        }
    }

    pub fn validate(&self, latent_dim: usize, field: &str) -> Result<()> {
        if self.kind == ScorerKind::TwoTower && !(1..=latent_dim).contains(&self.embedding_rank) {
            return Err(Error::config(
                format!("{field}.embedding_rank"),
                format!(
                    "must lie in [1, latent_dim = {latent_dim}], got {}",
                    self.embedding_rank
                ),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config(
                format!("{field}.noise_sigma"),
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// One spec per model kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSuite {
    pub two_tower: ScorerSpec,
    pub item_knn: ScorerSpec,
    pub content_knn: ScorerSpec,
    pub pre_ranker: ScorerSpec,
    pub ranker: ScorerSpec,
}

impl Default for ModelSuite {
    fn default() -> Self {
        ModelSuite {
            two_tower: ScorerSpec::default_for(ScorerKind::TwoTower),
            item_knn: ScorerSpec::default_for(ScorerKind::ItemKnn),
            content_knn: ScorerSpec::default_for(ScorerKind::ContentKnn),
            pre_ranker: ScorerSpec::default_for(ScorerKind::PreRanker),
            ranker: ScorerSpec::default_for(ScorerKind::Ranker),
        }
    }
}

impl ModelSuite {
    pub fn get(&self, kind: ScorerKind) -> &ScorerSpec {
        match kind {
            ScorerKind::TwoTower => &self.two_tower,
            ScorerKind::ItemKnn => &self.item_knn,
            ScorerKind::ContentKnn => &self.content_knn,
            ScorerKind::PreRanker => &self.pre_ranker,
            ScorerKind::Ranker => &self.ranker,
        }
    }

    pub fn get_mut(&mut self, kind: ScorerKind) -> &mut ScorerSpec {
        match kind {
            ScorerKind::TwoTower => &mut self.two_tower,
            ScorerKind::ItemKnn => &mut self.item_knn,
            ScorerKind::ContentKnn => &mut self.content_knn,
            ScorerKind::PreRanker => &mut self.pre_ranker,
            ScorerKind::Ranker => &mut self.ranker,
        }
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        for kind in [
            ScorerKind::TwoTower,
            ScorerKind::ItemKnn,
            ScorerKind::ContentKnn,
            ScorerKind::PreRanker,
            ScorerKind::Ranker,
        ] {
            self.get(kind)
                .validate(latent_dim, &format!("scorers.{}", kind.name()))?;
        }
        if self.ranker.noise_sigma >= self.pre_ranker.noise_sigma {
            return Err(Error::config(
                "scorers.ranker.noise_sigma",
                "the ranker must be less noisy than the pre-ranker",
            ));
        }
        Ok(())
    }
}

/// Personalization weight for a user with `history` engagements.
pub fn shrinkage(history: usize, half_count: usize) -> f64 {
    if half_count == 0 {
        return 1.0;
    }
    history as f64 / (history + half_count) as f64
}

/// Key under which a pass of ranker/pre-ranker noise is drawn. Within one
/// epoch a model is deterministic; across epochs its noise is redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Epoch {
    Refresh { seed: u64, version: u64 },
    Request { hour: Hour },
}

impl Epoch {
    pub fn key(self) -> u64 {
        match self {
            Epoch::Refresh { seed, version } => keyed::key(&[keyed::tag::REFRESH, seed, version]),
            Epoch::Request { hour } => keyed::key(&[keyed::tag::REQUEST, hour]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub rank: usize,
    pub user_emb: Vec<Vec<f64>>,
    pub item_emb: Vec<Vec<f64>>,
    /// Per-item popularity term, the tower's constant coordinate. Quality is
    /// divided by the world's logit scale so it sits in dot-product units.
    pub item_bias: Vec<f64>,
    pub built_at: Hour,
}

impl EmbeddingTable {
    pub fn user(&self, user: UserId) -> Option<&[f64]> {
        self.user_emb.get(user.index()).map(Vec::as_slice)
    }

    pub fn score(&self, user_emb: &[f64], item: ItemId) -> Option<f64> {
        let i = item.index();
        let emb = self.item_emb.get(i)?;
        Some(dot(user_emb, emb) + self.item_bias[i])
    }
}

/// Builds two-tower embeddings from the world at its current clock.
pub fn build_embeddings(world: &World, spec: &ScorerSpec) -> Result<EmbeddingTable> {
    if spec.kind != ScorerKind::TwoTower {
        return Err(Error::config("scorers.kind", "embeddings need a two_tower spec"));
    }
    let latent_dim = world.config.latent_dim;
    spec.validate(latent_dim, "scorers.two_tower")?;
    let rank = spec.embedding_rank;
    let coord_sigma = spec.noise_sigma / (latent_dim as f64).sqrt();
    let base = [world.seed(), spec.seed];
    let noise = |tag: u64, id: u32, j: usize| -> f64 {
        if coord_sigma == 0.0 {
            0.0
        } else {
            coord_sigma * keyed::normal(keyed::key(&[tag, base[0], base[1], id as u64, j as u64]))
        }
    };
    let t = world.clock;

    let user_emb = world
        .users
        .iter()
        .map(|u| {
            let s = shrinkage(world.history_len(u, t), spec.shrinkage_half_count);
            (0..rank)
                .map(|j| s * u.interest[j] + noise(keyed::tag::EMBED_USER, u.id.0, j))
                .collect()
        })
        .collect();
    let live = world.live_items(t);
    let item_emb = live
        .iter()
        .map(|it| {
            (0..rank)
                .map(|j| it.content[j] + noise(keyed::tag::EMBED_ITEM, it.id.0, j))
                .collect()
        })
        .collect();
    let bias_scale = world.config.logit_scale;
    let item_bias = live
        .iter()
        .map(|it| (it.quality + noise(keyed::tag::EMBED_BIAS, it.id.0, 0)) / bias_scale)
        .collect();
    Ok(EmbeddingTable {
        rank,
        user_emb,
        item_emb,
        item_bias,
        built_at: t,
    })
}

/// Item-item cosine similarity of co-engagement incidence vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoEngagementIndex {
    /// Per item, neighbors sorted by id. Items without engagements have no
    /// entries; the diagonal is never stored.
    pub neighbors: Vec<Vec<(ItemId, f64)>>,
    pub built_at: Hour,
}

impl CoEngagementIndex {
    pub fn sim(&self, a: ItemId, b: ItemId) -> Option<f64> {
        let row = self.neighbors.get(a.index())?;
        row.binary_search_by_key(&b, |&(id, _)| id)
            .ok()
            .map(|pos| row[pos].1)
    }

    pub fn len(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.iter().all(Vec::is_empty)
    }

    /// Builds the index from per-user item sets.
    pub fn from_incidence(n_items: usize, per_user: &[Vec<ItemId>], built_at: Hour) -> Self {
        let mut degree = vec![0u32; n_items];
        let mut pairs: Vec<u64> = Vec::new();
        for items in per_user {
            let mut set = items.clone();
            set.sort_unstable();
            set.dedup();
            for (x, a) in set.iter().enumerate() {
                degree[a.index()] += 1;
                for b in &set[x + 1..] {
                    pairs.push(((a.0 as u64) << 32) | b.0 as u64);
                }
            }
        }
        pairs.sort_unstable();
        let mut neighbors: Vec<Vec<(ItemId, f64)>> = vec![Vec::new(); n_items];
        for run in pairs.chunk_by(|x, y| x == y) {
            let a = (run[0] >> 32) as u32;
            let b = run[0] as u32;
            let co = run.len() as f64;
            let s = co / (degree[a as usize] as f64 * degree[b as usize] as f64).sqrt();
            let s = s.min(1.0);
            neighbors[a as usize].push((ItemId(b), s));
            neighbors[b as usize].push((ItemId(a), s));
        }
        for row in &mut neighbors {
            row.sort_unstable_by_key(|&(id, _)| id);
        }
        CoEngagementIndex {
            neighbors,
            built_at,
        }
    }
}

/// Builds the item-CF index from every user's engagement history.
pub fn build_coengagement(world: &World) -> CoEngagementIndex {
    let t = world.clock;
    let per_user: Vec<Vec<ItemId>> = world
        .users
        .iter()
        .map(|u| {
            u.history
                .iter()
                .map(|&r| &world.log[r])
                .filter(|r| r.engaged && r.time <= t)
                .map(|r| r.item)
                .collect()
        })
        .collect();
    CoEngagementIndex::from_incidence(world.live_items(t).len(), &per_user, t)
}

/// Content-embedding index: covers the items live when it was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContentIndex {
    pub n_items: usize,
    pub built_at: Hour,
}

/// Tables the retrieval scorers read from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tables {
    pub embeddings: Option<EmbeddingTable>,
    pub coengagement: Option<CoEngagementIndex>,
    pub content: Option<ContentIndex>,
}

impl Tables {
    pub fn build(world: &World, models: &ModelSuite) -> Result<Tables> {
        Ok(Tables {
            embeddings: Some(build_embeddings(world, &models.two_tower)?),
            coengagement: Some(build_coengagement(world)),
            content: Some(ContentIndex {
                n_items: world.live_items(world.clock).len(),
                built_at: world.clock,
            }),
        })
    }

    pub fn built_at(&self) -> Option<Hour> {
        self.embeddings
            .as_ref()
            .map(|e| e.built_at)
            .or(self.coengagement.as_ref().map(|c| c.built_at))
    }
}

/// A scorer bound to one (user, hour, epoch). Scoring a single item is cheap
/// once the per-user state is prepared.
pub struct UserScorer<'a> {
    inner: Prepared<'a>,
}

enum Prepared<'a> {
    TwoTower {
        user_emb: &'a [f64],
        table: &'a EmbeddingTable,
    },
    ItemKnn {
        dense: Vec<f64>,
    },
    ContentKnn {
        centroid: Option<Vec<f64>>,
        n_items: usize,
    },
    Logit {
        weighted_interest: Vec<f64>,
        bias: f64,
        sigma: f64,
        noise_base: [u64; 5],
    },
}

impl<'a> UserScorer<'a> {
    pub fn prepare(
        spec: &ScorerSpec,
        world: &'a World,
        tables: &'a Tables,
        user: &UserProfile,
        t: Hour,
        epoch: Epoch,
    ) -> Result<UserScorer<'a>> {
        let inner = match spec.kind {
            ScorerKind::TwoTower => {
                let table = tables
                    .embeddings
                    .as_ref()
                    .ok_or(Error::MissingTable("two_tower embeddings"))?;
                let user_emb = table
                    .user(user.id)
                    .ok_or(Error::MissingTable("two_tower user embedding"))?;
                Prepared::TwoTower { user_emb, table }
            }
            ScorerKind::ItemKnn => {
                let index = tables
                    .coengagement
                    .as_ref()
                    .ok_or(Error::MissingTable("co-engagement index"))?;
                let mut dense = vec![0.0; world.items.len()];
                for seed_item in world.recent_items(user, t, KNN_HISTORY_WINDOW) {
                    if let Some(row) = index.neighbors.get(seed_item.index()) {
                        for &(other, s) in row {
                            let slot = &mut dense[other.index()];
                            if s > *slot {
                                *slot = s;
                            }
                        }
                    }
                }
                Prepared::ItemKnn { dense }
            }
            ScorerKind::ContentKnn => {
                let index = tables.content.ok_or(Error::MissingTable("content index"))?;
                let recent = world.recent_items(user, t, KNN_HISTORY_WINDOW);
                let centroid = if recent.is_empty() {
                    None
                } else {
                    let mut m = vec![0.0; world.config.latent_dim];
                    for id in &recent {
                        for (acc, x) in m.iter_mut().zip(&world.items[id.index()].content) {
                            *acc += x;
                        }
                    }
                    let norm = dot(&m, &m).sqrt();
                    if norm > 0.0 {
                        m.iter_mut().for_each(|x| *x /= norm);
                        Some(m)
                    } else {
                        None
                    }
                };
                Prepared::ContentKnn {
                    centroid,
                    n_items: index.n_items,
                }
            }
            ScorerKind::PreRanker | ScorerKind::Ranker => {
                let s = shrinkage(world.history_len(user, t), spec.shrinkage_half_count);
                let w = world.config.logit_scale * s;
                Prepared::Logit {
                    weighted_interest: user.interest.iter().map(|x| w * x).collect(),
                    bias: world.config.engagement_bias,
                    sigma: spec.noise_sigma,
                    noise_base: [
                        keyed::tag::LOGIT_NOISE,
                        spec.kind as u64,
                        keyed::key(&[spec.seed, world.seed()]),
                        user.id.0 as u64,
                        epoch.key(),
                    ],
                }
            }
        };
        Ok(UserScorer { inner })
    }

    /// Scores an item. Items the scorer has no state for (e.g. ingested
    /// after the embedding table was built) yield `None`.
    #[inline]
    pub fn score(&self, item: &Item) -> Option<f64> {
        match &self.inner {
            Prepared::TwoTower { user_emb, table } => table.score(user_emb, item.id),
            Prepared::ItemKnn { dense } => Some(dense.get(item.id.index()).copied().unwrap_or(0.0)),
            Prepared::ContentKnn { centroid, n_items } => {
                if item.id.index() >= *n_items {
                    return None;
                }
                Some(match centroid {
                    Some(m) => dot(m, &item.content),
                    None => 0.0,
                })
            }
            Prepared::Logit {
                weighted_interest,
                bias,
                sigma,
                noise_base,
            } => {
                let base = dot(weighted_interest, &item.content) + item.quality - bias;
                if *sigma == 0.0 {
                    Some(base)
                } else {
                    let [a, b, c, d, e] = *noise_base;
                    Some(base + sigma * keyed::normal(keyed::key(&[a, b, c, d, e, item.id.0 as u64])))
                }
            }
        }
    }
}

/// Scores one (user, item) pair. Pure: identical inputs give identical output.
pub fn score(
    spec: &ScorerSpec,
    world: &World,
    user: UserId,
    item: ItemId,
    t: Hour,
    tables: &Tables,
    epoch: Epoch,
) -> Result<f64> {
    let item_ref = world
        .item(item)
        .filter(|it| it.created_at <= t)
        .ok_or(Error::ItemNotLive { item, hour: t })?;
    let profile = world.user(user)?;
    UserScorer::prepare(spec, world, tables, profile, t, epoch)?
        .score(item_ref)
        .ok_or(Error::MissingTable("item not covered by the scorer's table"))
}
