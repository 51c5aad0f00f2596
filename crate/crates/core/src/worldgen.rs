//! Synthetic world: users with cohort-dependent activity and drifting
//! interests, a growing item catalog, and the oracle engagement model that
//! every recall measurement is scored against.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{Hour, ItemId, UserId, HOURS_PER_DAY, HOURS_PER_WEEK};
use crate::keyed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    HighlyActive,
    ModeratelyActive,
    Dormant,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::HighlyActive, Cohort::ModeratelyActive, Cohort::Dormant];

    pub fn name(self) -> &'static str {
        match self {
            Cohort::HighlyActive => "highly_active",
            Cohort::ModeratelyActive => "moderately_active",
            Cohort::Dormant => "dormant",
        }
    }

    pub fn parse(s: &str) -> Option<Cohort> {
        Cohort::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// A value per cohort. Used for mixes, session rates, and cadences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerCohort<T> {
    pub highly_active: T,
    pub moderately_active: T,
    pub dormant: T,
}

impl<T: Copy> PerCohort<T> {
    pub fn get(&self, cohort: Cohort) -> T {
        match cohort {
            Cohort::HighlyActive => self.highly_active,
            Cohort::ModeratelyActive => self.moderately_active,
            Cohort::Dormant => self.dormant,
        }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.highly_active, self.moderately_active, self.dormant]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items_initial: usize,
    #[serde(default = "defaults::items_per_day")]
    pub items_per_day: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "defaults::cohort_mix")]
    pub cohort_mix: PerCohort<f64>,
    /// Per-session interest mixing coefficient.
    #[serde(default = "defaults::drift_rate")]
    pub drift_rate: f64,
    /// Global logit offset subtracted from every engagement logit.
    #[serde(default = "defaults::engagement_bias")]
    pub engagement_bias: f64,
    #[serde(default = "defaults::horizon_days")]
    pub horizon_days: u64,
    pub seed: u64,
    /// Multiplier on the interest/content dot product inside the logit.
    #[serde(default = "defaults::logit_scale")]
    pub logit_scale: f64,
    /// Standard deviation of the per-item quality offset.
    #[serde(default = "defaults::quality_sigma")]
    pub quality_sigma: f64,
    #[serde(default = "defaults::sessions_per_week")]
    pub sessions_per_week: PerCohort<f64>,
    #[serde(default = "defaults::engagements_per_session")]
    pub engagements_per_session: usize,
    /// Number of random live items shown to a user in one session; the
    /// session's engagements are drawn from these.
    #[serde(default = "defaults::session_exposure")]
    pub session_exposure: usize,
}

pub(crate) mod defaults {
    use super::PerCohort;

    pub fn items_per_day() -> usize {
        50
    }
    pub fn latent_dim() -> usize {
        32
    }
    pub fn cohort_mix() -> PerCohort<f64> {
        PerCohort {
            highly_active: 0.35,
            moderately_active: 0.45,
            dormant: 0.20,
        }
    }
    pub fn drift_rate() -> f64 {
        0.5
    }
    pub fn engagement_bias() -> f64 {
        8.0
    }
    pub fn horizon_days() -> u64 {
        28
    }
    pub fn logit_scale() -> f64 {
        4.0
    }
    pub fn quality_sigma() -> f64 {
        0.5
    }
    pub fn sessions_per_week() -> PerCohort<f64> {
        PerCohort {
            highly_active: 7.0,
            moderately_active: 2.5,
            dormant: 0.05,
        }
    }
    pub fn engagements_per_session() -> usize {
        1
    }
    pub fn session_exposure() -> usize {
        1000
    }
}

impl Default for WorldConfig {
    /// The desk-scale default world: 2,000 users and 20,000 items.
    fn default() -> Self {
        WorldConfig::new(2_000, 20_000, 0)
    }
}

impl WorldConfig {
    pub fn new(n_users: usize, n_items_initial: usize, seed: u64) -> Self {
        WorldConfig {
            n_users,
            n_items_initial,
            items_per_day: defaults::items_per_day(),
            latent_dim: defaults::latent_dim(),
            cohort_mix: defaults::cohort_mix(),
            drift_rate: defaults::drift_rate(),
            engagement_bias: defaults::engagement_bias(),
            horizon_days: defaults::horizon_days(),
            seed,
            logit_scale: defaults::logit_scale(),
            quality_sigma: defaults::quality_sigma(),
            sessions_per_week: defaults::sessions_per_week(),
            engagements_per_session: defaults::engagements_per_session(),
            session_exposure: defaults::session_exposure(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("world.n_users", self.n_users),
            ("world.n_items_initial", self.n_items_initial),
            ("world.items_per_day", self.items_per_day),
            ("world.engagements_per_session", self.engagements_per_session),
            ("world.session_exposure", self.session_exposure),
        ];
        for (field, value) in counts {
            if value < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.horizon_days < 1 {
            return Err(Error::config("world.horizon_days", "must be at least 1"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("world.latent_dim", "must be at least 2"));
        }
        let mix = self.cohort_mix.to_array();
        if mix.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::config("world.cohort_mix", "fractions must be non-negative"));
        }
        let total: f64 = mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "world.cohort_mix",
                format!("fractions must sum to 1, got {total}"),
            ));
        }
        if !(0.0..1.0).contains(&self.drift_rate) {
            return Err(Error::config("world.drift_rate", "must lie in [0, 1)"));
        }
        for (field, value) in [
            ("world.engagement_bias", self.engagement_bias),
            ("world.logit_scale", self.logit_scale),
            ("world.quality_sigma", self.quality_sigma),
        ] {
            if !value.is_finite() {
                return Err(Error::config(field, "must be finite"));
            }
        }
        if self.quality_sigma < 0.0 {
            return Err(Error::config("world.quality_sigma", "must be non-negative"));
        }
        let spw = self.sessions_per_week;
        if spw.highly_active < 7.0 {
            return Err(Error::config(
                "world.sessions_per_week.highly_active",
                "highly active users visit at least daily (>= 7)",
            ));
        }
        if !(2.0..=3.0).contains(&spw.moderately_active) {
            return Err(Error::config(
                "world.sessions_per_week.moderately_active",
                "must lie in [2, 3]",
            ));
        }
        if !(spw.dormant > 0.0 && spw.dormant <= 0.5) {
            return Err(Error::config(
                "world.sessions_per_week.dormant",
                "must lie in (0, 0.5]",
            ));
        }
        Ok(())
    }

    /// Number of items live at hour `t`.
    pub fn live_count(&self, t: Hour) -> usize {
        self.n_items_initial + (t / HOURS_PER_DAY) as usize * self.items_per_day
    }

    fn mean_session_interval(&self, cohort: Cohort) -> Hour {
        let hours = HOURS_PER_WEEK as f64 / self.sessions_per_week.get(cohort);
        (hours.round() as Hour).max(1)
    }
}

/// Splits `n` into per-cohort counts by largest remainder; ties go to the
/// earlier cohort.
pub fn cohort_counts(n: usize, mix: &PerCohort<f64>) -> [usize; 3] {
    let fractions = mix.to_array();
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub id: UserId,
    pub cohort: Cohort,
    /// Unit-norm interest vector.
    pub interest: Vec<f64>,
    /// Indices into the world log of this user's session engagements, in
    /// time order. Holdout draws are logged but never enter the history.
    pub history: Vec<usize>,
    pub sessions_per_week: f64,
    pub next_session: Hour,
    pub sessions: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: ItemId,
    /// Unit-norm content embedding.
    pub content: Vec<f64>,
    pub quality: f64,
    pub created_at: Hour,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngagementRecord {
    pub user: UserId,
    pub item: ItemId,
    pub time: Hour,
    pub engaged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionEvent {
    pub time: Hour,
    pub user: UserId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserProfile>,
    pub items: Vec<Item>,
    pub clock: Hour,
    pub log: Vec<EngagementRecord>,
    rng: ChaCha8Rng,
}

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn gaussian_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if dot(&v, &v) > 0.0 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Engagement logit for a given interest and item: `scale * <interest, content> + quality - bias`.
#[inline]
pub fn logit(scale: f64, bias: f64, interest: &[f64], item: &Item) -> f64 {
    scale * dot(interest, &item.content) + item.quality - bias
}

/// Draws `n` distinct indices with probability proportional to `weights`
/// by successive sampling without replacement (exponential-key method).
/// Zero-weight indices are only taken once positive weights are exhausted,
/// in ascending index order. The result is sorted ascending.
pub fn weighted_sample_distinct<R: Rng + ?Sized>(rng: &mut R, weights: &[f64], n: usize) -> Vec<usize> {
    if n >= weights.len() {
        return (0..weights.len()).collect();
    }
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u: f64 = 1.0 - rng.random::<f64>();
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n > 0 {
        keyed.select_nth_unstable_by(n - 1, by_key);
    }
    let mut picked: Vec<usize> = keyed[..n].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Builds a world at clock 0 with an empty log.
pub fn generate_world(config: WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let counts = cohort_counts(config.n_users, &config.cohort_mix);
    let mut cohorts: Vec<Cohort> = Cohort::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    cohorts.shuffle(&mut rng);

    let users = cohorts
        .into_iter()
        .enumerate()
        .map(|(i, cohort)| {
            let interest = gaussian_unit(&mut rng, config.latent_dim);
            let phase = rng.random_range(0..config.mean_session_interval(cohort));
            UserProfile {
                id: UserId(i as u32),
                cohort,
                interest,
                history: Vec::new(),
                sessions_per_week: config.sessions_per_week.get(cohort),
                next_session: 1 + phase,
                sessions: 0,
            }
        })
        .collect();

    let mut world = World {
        users,
        items: Vec::with_capacity(config.n_items_initial),
        clock: 0,
        log: Vec::new(),
        rng,
        config,
    };
    for _ in 0..world.config.n_items_initial {
        world.push_item(0);
    }
    Ok(world)
}

impl World {
    fn push_item(&mut self, created_at: Hour) {
        let content = gaussian_unit(&mut self.rng, self.config.latent_dim);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let id = ItemId(self.items.len() as u32);
        self.items.push(Item {
            id,
            content,
            quality: self.config.quality_sigma * z,
            created_at,
        });
    }

    pub fn user(&self, id: UserId) -> Result<&UserProfile> {
        self.users.get(id.index()).ok_or(Error::UnknownUser(id))
    }

    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.items.get(id.index())
    }

    /// Items live at hour `t`. Items are stored in creation order, so the
    /// live catalog is always a prefix.
    pub fn live_items(&self, t: Hour) -> &[Item] {
        let n = self.config.live_count(t).min(self.items.len());
        &self.items[..n]
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Number of history engagements recorded at or before `t`.
    pub fn history_len(&self, user: &UserProfile, t: Hour) -> usize {
        user.history
            .iter()
            .rev()
            .skip_while(|&&r| self.log[r].time > t)
            .count()
    }

    /// The user's most recent `n` history items as of `t`, newest first.
    pub fn recent_items(&self, user: &UserProfile, t: Hour, n: usize) -> Vec<ItemId> {
        user.history
            .iter()
            .rev()
            .map(|&r| &self.log[r])
            .filter(|rec| rec.time <= t && rec.engaged)
            .take(n)
            .map(|rec| rec.item)
            .collect()
    }

    /// Oracle engagement logit of `item` for `user` at hour `t`.
    pub fn true_logit(&self, user: &UserProfile, item: &Item, t: Hour) -> Result<f64> {
        if item.created_at > t {
            return Err(Error::ItemNotLive { item: item.id, hour: t });
        }
        Ok(logit(
            self.config.logit_scale,
            self.config.engagement_bias,
            &user.interest,
            item,
        ))
    }

    /// Advances the clock, ingesting new items at each day boundary and
    /// running every user session that falls in the window. Returns the
    /// sessions in (time, user) order.
    pub fn advance(&mut self, hours: Hour) -> Vec<SessionEvent> {
        let start = self.clock;
        let end = start + hours;

        let first_day = start / HOURS_PER_DAY + 1;
        for day in first_day..=end / HOURS_PER_DAY {
            for _ in 0..self.config.items_per_day {
                self.push_item(day * HOURS_PER_DAY);
            }
        }

        let mut events: Vec<(SessionEvent, u32)> = Vec::new();
        for user in &mut self.users {
            let mean = self.config.mean_session_interval(user.cohort);
            while user.next_session <= end {
                events.push((
                    SessionEvent {
                        time: user.next_session,
                        user: user.id,
                    },
                    user.sessions,
                ));
                let mut sched = keyed::stream(keyed::key(&[
                    keyed::tag::SESSION,
                    self.config.seed,
                    user.id.0 as u64,
                    user.sessions as u64,
                    0,
                ]));
                let jitter: f64 = sched.random_range(0.75..1.25);
                let interval = ((mean as f64 * jitter).round() as Hour).max(1);
                user.next_session += interval;
                user.sessions += 1;
            }
        }
        events.sort_by_key(|(e, _)| (e.time, e.user));

        for &(event, index) in &events {
            self.run_session(event, index);
        }
        self.clock = end;
        events.into_iter().map(|(e, _)| e).collect()
    }

    fn run_session(&mut self, event: SessionEvent, index: u32) {
        let cfg = &self.config;
        let mut rng = keyed::stream(keyed::key(&[
            keyed::tag::SESSION,
            cfg.seed,
            event.user.0 as u64,
            index as u64,
            1,
        ]));
        let user = &mut self.users[event.user.index()];

        if cfg.drift_rate > 0.0 {
            let gamma = cfg.drift_rate;
            let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
            for x in user.interest.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x = (1.0 - gamma) * *x + gamma * scale * g;
            }
            normalize(&mut user.interest);
        }

        let n_live = cfg.live_count(event.time).min(self.items.len());
        let shown: Vec<usize> = if cfg.session_exposure >= n_live {
            (0..n_live).collect()
        } else {
            let mut v = index::sample(&mut rng, n_live, cfg.session_exposure).into_vec();
            v.sort_unstable();
            v
        };
        let weights: Vec<f64> = shown
            .iter()
            .map(|&i| sigmoid(logit(cfg.logit_scale, cfg.engagement_bias, &user.interest, &self.items[i])))
            .collect();
        let picked = weighted_sample_distinct(&mut rng, &weights, cfg.engagements_per_session);
        for p in picked {
            user.history.push(self.log.len());
            self.log.push(EngagementRecord {
                user: event.user,
                item: self.items[shown[p]].id,
                time: event.time,
                engaged: true,
            });
        }
    }

    /// Draws `n_eval` distinct live items for `user` with probability
    /// proportional to their oracle engagement probability at the current
    /// clock, and logs them. The result is sorted by item id.
    pub fn sample_holdout(&mut self, user: UserId, n_eval: usize) -> Result<Vec<ItemId>> {
        let t = self.clock;
        let profile = self.user(user)?;
        let live = self.live_items(t);
        if n_eval > live.len() {
            return Err(Error::HoldoutTooLarge {
                requested: n_eval,
                available: live.len(),
            });
        }
        let cfg = &self.config;
        let weights: Vec<f64> = live
            .iter()
            .map(|item| sigmoid(logit(cfg.logit_scale, cfg.engagement_bias, &profile.interest, item)))
            .collect();
        let picked = weighted_sample_distinct(&mut self.rng, &weights, n_eval);
        let items: Vec<ItemId> = picked.into_iter().map(|i| ItemId(i as u32)).collect();
        for &item in &items {
            self.log.push(EngagementRecord {
                user,
                item,
                time: t,
                engaged: true,
            });
        }
        Ok(items)
    }

    /// Draws from the world generator; exposed for fixtures that need a
    /// reproducible stream tied to this world.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Canonical line-delimited snapshot. Equal worlds give equal bytes.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(
            out,
            "world seed={} clock={} latent_dim={} n_users={} n_items={} n_records={}",
            c.seed,
            self.clock,
            c.latent_dim,
            self.users.len(),
            self.items.len(),
            self.log.len()
        )?;
        let mut line = String::new();
        for u in &self.users {
            line.clear();
            let _ = write!(
                line,
                "user id={} cohort={} sessions_per_week={:.6} sessions={} next_session={} history=",
                u.id,
                u.cohort.name(),
                u.sessions_per_week,
                u.sessions,
                u.next_session
            );
            join_into(&mut line, u.history.iter().map(|r| r.to_string()));
            line.push_str(" interest=");
            join_into(&mut line, u.interest.iter().map(|x| format!("{x:.6}")));
            writeln!(out, "{line}")?;
        }
        for item in &self.items {
            line.clear();
            let _ = write!(
                line,
                "item id={} created_at={} quality={:.6} content=",
                item.id, item.created_at, item.quality
            );
            join_into(&mut line, item.content.iter().map(|x| format!("{x:.6}")));
            writeln!(out, "{line}")?;
        }
        for r in &self.log {
            writeln!(
                out,
                "record user={} item={} time={} engaged={}",
                r.user, r.item, r.time, r.engaged as u8
            )?;
        }
        Ok(())
    }
}

fn join_into(line: &mut String, parts: impl Iterator<Item = String>) {
    for (i, p) in parts.enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        let mut c = WorldConfig::new(40, 300, seed);
        c.latent_dim = 8;
        c.items_per_day = 5;
        c.session_exposure = 100;
        c
    }

    #[test]
    fn largest_remainder_counts() {
        let mix = PerCohort {
            highly_active: 0.5,
            moderately_active: 0.25,
            dormant: 0.25,
        };
        assert_eq!(cohort_counts(4, &mix), [2, 1, 1]);
        let thirds = PerCohort {
            highly_active: 1.0 / 3.0,
            moderately_active: 1.0 / 3.0,
            dormant: 1.0 / 3.0,
        };
        // Equal remainders: the leftover goes to the earlier cohort.
        assert_eq!(cohort_counts(4, &thirds), [2, 1, 1]);
        assert_eq!(cohort_counts(5, &thirds), [2, 2, 1]);
    }

    #[test]
    fn generate_assigns_cohorts_by_mix() {
        let mut c = WorldConfig::new(4, 10, 3);
        c.cohort_mix = PerCohort {
            highly_active: 0.5,
            moderately_active: 0.25,
            dormant: 0.25,
        };
        let w = generate_world(c).unwrap();
        let count = |k| w.users.iter().filter(|u| u.cohort == k).count();
        assert_eq!(count(Cohort::HighlyActive), 2);
        assert_eq!(count(Cohort::ModeratelyActive), 1);
        assert_eq!(count(Cohort::Dormant), 1);
        assert_eq!(w.clock, 0);
        assert!(w.log.is_empty());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = small(1);
        c.cohort_mix.dormant = 0.5;
        let err = generate_world(c).unwrap_err().to_string();
        assert!(err.contains("world.cohort_mix"), "{err}");

        let mut c = small(1);
        c.latent_dim = 1;
        assert!(generate_world(c).unwrap_err().to_string().contains("world.latent_dim"));

        let mut c = small(1);
        c.drift_rate = 1.0;
        assert!(generate_world(c).unwrap_err().to_string().contains("world.drift_rate"));

        let mut c = small(1);
        c.n_users = 0;
        assert!(generate_world(c).unwrap_err().to_string().contains("world.n_users"));
    }

    #[test]
    fn aligned_interest_gives_logit_scale() {
        let mut w = generate_world(small(2)).unwrap();
        w.config.engagement_bias = 0.0;
        let mut item = w.items[0].clone();
        item.quality = 0.0;
        let mut user = w.users[0].clone();
        user.interest = item.content.clone();
        let s = w.true_logit(&user, &item, 0).unwrap();
        assert!((s - 4.0).abs() < 1e-12);
        assert!((sigmoid(s) - 0.982_013_790_037_908).abs() < 1e-12);

        // Orthogonal pair.
        let mut a = vec![0.0; 8];
        a[0] = 1.0;
        let mut b = vec![0.0; 8];
        b[1] = 1.0;
        user.interest = a;
        item.content = b;
        let s = w.true_logit(&user, &item, 0).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(sigmoid(s), 0.5);
    }

    #[test]
    fn true_logit_matches_straight_line_recomputation() {
        let w = generate_world(small(7)).unwrap();
        for (u, i) in [(0usize, 0usize), (3, 17), (39, 299), (12, 150)] {
            let user = &w.users[u];
            let item = &w.items[i];
            let mut d = 0.0;
            for k in 0..w.config.latent_dim {
                d += user.interest[k] * item.content[k];
            }
            let expect = w.config.logit_scale * d + item.quality - w.config.engagement_bias;
            let got = w.true_logit(user, item, 0).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn future_items_are_not_live() {
        let mut w = generate_world(small(2)).unwrap();
        w.advance(24);
        let fresh = w.items.last().unwrap().clone();
        assert_eq!(fresh.created_at, 24);
        let user = w.users[0].clone();
        assert!(matches!(
            w.true_logit(&user, &fresh, 23),
            Err(Error::ItemNotLive { .. })
        ));
        assert!(w.true_logit(&user, &fresh, 24).is_ok());
    }

    #[test]
    fn ingestion_is_linear_in_days() {
        let mut w = generate_world(small(4)).unwrap();
        w.advance(23);
        assert_eq!(w.items.len(), 300);
        w.advance(1);
        assert_eq!(w.items.len(), 305);
        w.advance(24 * 3 + 5);
        assert_eq!(w.items.len(), w.config.live_count(w.clock));
        assert_eq!(w.items.len(), 320);
    }

    #[test]
    fn zero_drift_keeps_interests() {
        let mut c = small(5);
        c.drift_rate = 0.0;
        let mut w = generate_world(c).unwrap();
        let before: Vec<Vec<f64>> = w.users.iter().map(|u| u.interest.clone()).collect();
        w.advance(24 * 10);
        assert!(!w.log.is_empty());
        for (u, b) in w.users.iter().zip(&before) {
            assert_eq!(&u.interest, b);
        }
    }

    #[test]
    fn degenerate_holdout_distribution() {
        let mut c = small(6);
        c.n_items_initial = 5;
        c.session_exposure = 5;
        let mut w = generate_world(c).unwrap();
        for (i, item) in w.items.iter_mut().enumerate() {
            item.quality = if i == 3 { 1e6 } else { -1e6 };
        }
        assert_eq!(w.sample_holdout(UserId(0), 1).unwrap(), vec![ItemId(3)]);
        let all = w.sample_holdout(UserId(1), 5).unwrap();
        assert_eq!(all.len(), 5);
        assert!(matches!(
            w.sample_holdout(UserId(1), 6),
            Err(Error::HoldoutTooLarge { .. })
        ));
        assert_eq!(w.log.len(), 6);
        assert!(w.users[0].history.is_empty());
    }

    #[test]
    fn weighted_sampler_handles_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = weighted_sample_distinct(&mut rng, &[0.0, 2.0, 0.0, 1.0], 3);
        assert_eq!(got, vec![0, 1, 3]);
    }

    #[test]
    fn snapshot_is_deterministic() {
        let render = |seed| {
            let mut w = generate_world(small(seed)).unwrap();
            w.advance(50);
            let mut buf = Vec::new();
            w.write_snapshot(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(9), render(9));
        assert_ne!(render(9), render(10));
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(small(11)).unwrap();
        let b = generate_world(small(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_desk_world_counts() {
        let w = generate_world(WorldConfig::default()).unwrap();
        assert_eq!(w.users.len(), 2000);
        assert_eq!(w.items.len(), 20000);
        assert_eq!(w.config.latent_dim, 32);
        assert_eq!(w.clock, 0);
        assert_eq!(w.live_items(0).len(), 20000);
    }

    fn angle(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn active_users_drift_further_than_dormant() {
        let (mut active, mut dormant) = (0.0, 0.0);
        for seed in 0..20 {
            let mut c = small(seed);
            c.n_users = 60;
            let mut w = generate_world(c).unwrap();
            let start: Vec<Vec<f64>> = w.users.iter().map(|u| u.interest.clone()).collect();
            w.advance(24 * 7);
            let mean = |k: Cohort| {
                let v: Vec<f64> = w
                    .users
                    .iter()
                    .zip(&start)
                    .filter(|(u, _)| u.cohort == k)
                    .map(|(u, s)| angle(&u.interest, s))
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            active += mean(Cohort::HighlyActive);
            dormant += mean(Cohort::Dormant);
        }
        assert!(active > dormant, "active {active} dormant {dormant}");
    }

    #[test]
    fn holdout_frequencies_follow_probabilities() {
        let mut c = small(8);
        c.n_items_initial = 3;
        c.session_exposure = 3;
        let mut w = generate_world(c).unwrap();
        let probs = [0.8f64, 0.5, 0.2];
        let user = w.users[0].clone();
        for (item, p) in w.items.iter_mut().zip(probs) {
            let raw = logit(w.config.logit_scale, w.config.engagement_bias, &user.interest, item) - item.quality;
            item.quality = (p / (1.0 - p)).ln() - raw;
        }
        for (item, p) in w.items.iter().zip(probs) {
            let s = w.true_logit(&user, item, 0).unwrap();
            assert!((sigmoid(s) - p).abs() < 1e-9);
        }
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let got = w.sample_holdout(UserId(0), 1).unwrap();
            counts[got[0].index()] += 1;
        }
        let total: f64 = probs.iter().sum();
        for (c, p) in counts.iter().zip(probs) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p / total).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn session_counts_fall_in_cohort_bands() {
        let mut w = generate_world(WorldConfig::default()).unwrap();
        w.advance(24 * 28);
        let mut ok = 0;
        for u in &w.users {
            let n = u.sessions;
            let inside = match u.cohort {
                Cohort::HighlyActive => n >= 26,
                Cohort::ModeratelyActive => (8..=12).contains(&n),
                Cohort::Dormant => n <= 2,
            };
            ok += usize::from(inside);
        }
        assert!(ok as f64 >= 0.95 * w.users.len() as f64, "{ok} of {}", w.users.len());
    }

    proptest::proptest! {
        #[test]
        fn interests_stay_unit_norm(seed in 0u64..1000, gamma in 0.0f64..0.99, days in 1u64..20) {
            let mut c = small(seed);
            c.drift_rate = gamma;
            c.n_users = 10;
            let mut w = generate_world(c).unwrap();
            w.advance(24 * days);
            for u in &w.users {
                let n: f64 = u.interest.iter().map(|x| x * x).sum::<f64>().sqrt();
                proptest::prop_assert!((n - 1.0).abs() < 1e-6);
            }
            for it in &w.items {
                let n: f64 = it.content.iter().map(|x| x * x).sum::<f64>().sqrt();
                proptest::prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
