//! Command implementations behind the `radar` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{emit_report, emit_summary, run_experiment, Experiment, ExperimentReport, ReportFormat, Row};
use crate::funnel::{serve, ServeTrace};
use crate::ids::HOURS_PER_DAY;
use crate::pipeline::ExecutedJob;
use crate::retrieval::Source;
use crate::sim::Simulation;
use crate::store::bucket_label;
use crate::worldgen::generate_world;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<ReportFormat>,
}

impl CommonArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.world.seed = seed;
            cfg.eval.seeds = vec![seed];
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok((cfg, out))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the generated world's snapshot to `<out>/world.snapshot`.
pub fn cmd_gen(args: &CommonArgs) -> Result<PathBuf> {
    let (cfg, out) = args.load()?;
    let world = generate_world(cfg.world.clone())?;
    let path = out.join("world.snapshot");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    world
        .write_snapshot(BufWriter::new(file))
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn traces_csv(sources: &[Source], traces: &[ServeTrace]) -> String {
    let mut out = String::from("user,t");
    for s in sources {
        let _ = write!(out, ",retrieved_{}", s.name());
    }
    out.push_str(
        ",retrieved_union,preranked,radar_hit,radar_staleness,radar_count,merged,dedup_removed,slate_size,radar_in_slate,radar_unique_fraction\n",
    );
    for t in traces {
        let _ = write!(out, "{},{}", t.user, t.t);
        for s in sources {
            let n = t.retrieved.iter().find(|(x, _)| x == s).map_or(0, |(_, n)| *n);
            let _ = write!(out, ",{n}");
        }
        let in_slate = t
            .slate
            .entries
            .iter()
            .filter(|c| c.sources.contains(Source::Radar))
            .count();
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{},{}",
            t.retrieved_union,
            t.preranked,
            u8::from(t.radar_hit),
            t.radar_staleness.map(|s| s.to_string()).unwrap_or_default(),
            t.radar_count,
            t.merged,
            t.dedup_removed,
            t.slate.len(),
            in_slate,
            opt(t.radar_unique_fraction)
        );
    }
    out
}

pub fn jobs_csv(jobs: &[ExecutedJob]) -> String {
    let mut out = String::from("user,cohort,due_since,executed_at,pool_size,compute_units\n");
    for j in jobs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            j.user,
            j.cohort.name(),
            j.due_since,
            j.executed_at,
            j.pool_size,
            j.compute_units
        );
    }
    out
}

/// Store and run statistics as report rows.
pub fn stats_report(sim: &Simulation, traces: &[ServeTrace]) -> ExperimentReport {
    let stats = sim.store.stats();
    let seed = sim.world.seed();
    let k = sim.store.store_k();
    let mut report = ExperimentReport::default();
    let mut push = |name: String, value: f64| {
        report.rows.push(Row {
            experiment: "run".into(),
            seed,
            cohort: "all".into(),
            source: "radar".into(),
            config: "store".into(),
            k,
            recall: None,
            aux_name: name,
            aux_value: Some(value),
        });
    };
    push("n_entries".into(), stats.n_entries as f64);
    push("hit_count".into(), stats.hit_count as f64);
    push("miss_count".into(), stats.miss_count as f64);
    push("max_staleness_hours".into(), stats.max_staleness as f64);
    for (i, n) in stats.staleness_histogram.iter().enumerate() {
        push(format!("staleness_{}", bucket_label(i)), *n as f64);
    }
    push("jobs".into(), sim.jobs.len() as f64);
    push(
        "compute_units".into(),
        sim.jobs.iter().map(|j| j.compute_units).sum::<u64>() as f64,
    );
    push("requests".into(), traces.len() as f64);
    let fractions: Vec<f64> = traces.iter().filter_map(|t| t.radar_unique_fraction).collect();
    if !fractions.is_empty() {
        push(
            "radar_unique_fraction_mean".into(),
            fractions.iter().sum::<f64>() / fractions.len() as f64,
        );
    }
    report.canonicalize();
    report
}

/// Simulates the configured horizon with the pipeline running, serving one
/// request per user session, and writes traces, jobs, store, and stats.
pub fn cmd_run(args: &CommonArgs) -> Result<PathBuf> {
    let (cfg, out) = args.load()?;
    let world = generate_world(cfg.world.clone())?;
    let mut sim = Simulation::new(world, cfg.sim_config())?;
    let funnel = cfg.funnel();
    let mut traces = Vec::new();
    let horizon = cfg.world.horizon_days * HOURS_PER_DAY;
    sim.advance_to(horizon, |s, event| {
        traces.push(serve(&s.world, &s.tables, &s.config.models, &funnel, &s.store, event.user, event.time)?);
        Ok(())
    })?;

    write_file(&out.join("traces.csv"), &traces_csv(&funnel.retrieval.sources, &traces))?;
    write_file(&out.join("jobs.csv"), &jobs_csv(&sim.jobs))?;
    sim.store.save(&out.join("store.kv"))?;
    emit_report(&stats_report(&sim, &traces), &out.join("stats.csv"), ReportFormat::Csv)?;
    Ok(out)
}

/// Runs one experiment over all configured seeds and writes the report
/// and its per-group summary.
pub fn cmd_experiment(args: &CommonArgs, which: Experiment) -> Result<PathBuf> {
    let (cfg, out) = args.load()?;
    let format = args.format.unwrap_or(ReportFormat::Csv);
    let report = run_experiment(&cfg, which)?;
    let path = out.join(format!("{}.{}", which.name(), format.extension()));
    emit_report(&report, &path, format)?;
    emit_summary(&report, &out.join(format!("{}_summary.csv", which.name())))?;
    Ok(path)
}
