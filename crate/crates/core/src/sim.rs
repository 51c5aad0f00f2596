//! Hour-stepped driver that keeps the world, scorer tables, store, and
//! offline pipeline in step.

use crate::error::Result;
use crate::ids::{Hour, HOURS_PER_DAY};
use crate::pipeline::{run_due, ExecutedJob, PipelineConfig};
use crate::retrieval::RetrievalConfig;
use crate::scorers::{ModelSuite, Tables};
use crate::store::RadarStore;
use crate::worldgen::{SessionEvent, World};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimConfig {
    pub models: ModelSuite,
    pub retrieval: RetrievalConfig,
    pub pipeline: PipelineConfig,
}

impl SimConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        self.models.validate(latent_dim)?;
        self.retrieval.validate()?;
        self.pipeline.validate()
    }
}

/// Tables are rebuilt once a day at the start of the off-peak window, so
/// every refresh in the window sees tables from the same day.
pub struct Simulation {
    pub world: World,
    pub config: SimConfig,
    pub tables: Tables,
    pub store: RadarStore,
    pub jobs: Vec<ExecutedJob>,
    pub pipeline_enabled: bool,
    /// See [`run_due`]: skip ranking work for refreshes replaced before this hour.
    pub superseded_before: Option<Hour>,
}

impl Simulation {
    pub fn new(world: World, config: SimConfig) -> Result<Simulation> {
        config.validate(world.config.latent_dim)?;
        let tables = Tables::build(&world, &config.models)?;
        let store = RadarStore::new(config.pipeline.store_k);
        Ok(Simulation {
            world,
            config,
            tables,
            store,
            jobs: Vec::new(),
            pipeline_enabled: true,
            superseded_before: None,
        })
    }

    pub fn clock(&self) -> Hour {
        self.world.clock
    }

    pub fn rebuild_tables(&mut self) -> Result<()> {
        self.tables = Tables::build(&self.world, &self.config.models)?;
        Ok(())
    }

    /// Work scheduled at the current clock hour, before its sessions run.
    fn tick(&mut self) -> Result<()> {
        let h = self.world.clock;
        if h % HOURS_PER_DAY == self.config.pipeline.off_peak.0 && self.tables.built_at() != Some(h) {
            self.rebuild_tables()?;
        }
        if self.pipeline_enabled {
            let jobs = run_due(
                &self.world,
                &self.config.models,
                &self.config.retrieval,
                &self.config.pipeline,
                &self.tables,
                &self.store,
                h,
                self.superseded_before,
            )?;
            self.jobs.extend(jobs);
        }
        Ok(())
    }

    /// Runs hours `[clock, t_end)`. Sessions ending each hour are handed to
    /// `on_session` after the world has applied them.
    pub fn advance_to<F>(&mut self, t_end: Hour, mut on_session: F) -> Result<()>
    where
        F: FnMut(&Simulation, SessionEvent) -> Result<()>,
    {
        while self.world.clock < t_end {
            self.tick()?;
            for event in self.world.advance(1) {
                on_session(self, event)?;
            }
        }
        Ok(())
    }
}
