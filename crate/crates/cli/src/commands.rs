use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use irsnoma::baselines::{grid_oracle, GridSpec, OraclePoint};
use irsnoma::config::{ExperimentConfig, Scheme};
use irsnoma::metrics::{mean_of, MetricsRecord, METRICS_COLUMNS};
use irsnoma::trainer::{effective_config, evaluation_seed, Trainer};
use irsnoma::env::Environment;

use crate::output::{create_dir, out_dir, write_bytes, write_csv, write_csv_to};
use crate::{pool, Axis, Common, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(&common.config, &common.set)?)
}

fn seeds(common: &Common, cfg: &ExperimentConfig) -> Vec<u64> {
    match (&common.seed, &common.seeds) {
        (Some(s), _) => vec![*s],
        (None, Some(v)) => v.clone(),
        (None, None) => cfg.run.seeds.clone(),
    }
}

fn parse_scheme(name: &str) -> Result<Scheme> {
    Scheme::parse(name).ok_or_else(|| {
        let known: Vec<&str> = Scheme::ALL.iter().map(|s| s.name()).collect();
        usage(format!("unknown scheme `{name}` (expected one of {})", known.join(", ")))
    })
}

fn run_id(scheme: Scheme, seed: u64) -> String {
    format!("{}-{seed}", scheme.name())
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_bytes(&dir.join("config.resolved"), cfg.to_toml().as_bytes())
}

// -------------------------------------------------------------------- train

fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Vec<MetricsRecord>> {
    let scheme = cfg.run.scheme;
    let mut t = Trainer::new(cfg, scheme, seed)?;
    let ckpt_dir = dir.join("checkpoints").join(format!("seed-{seed}"));
    create_dir(&ckpt_dir)?;
    let id = run_id(scheme, seed);
    let every = cfg.run.checkpoint_every;
    let total = cfg.agents.episodes;
    let mut rows = Vec::with_capacity(total);
    for ep in 0..total {
        let s = t.train_episode().with_context(|| format!("seed {seed}, episode {ep}"))?;
        rows.push(MetricsRecord::new(&id, seed, &s));
        if every > 0 && (ep + 1) % every == 0 {
            write_bytes(&ckpt_dir.join(format!("episode-{:06}.ckpt", ep + 1)), &t.to_checkpoint())?;
            eprintln!(
                "{id}: episode {}/{total} reward {:.4} objective {:.4e} sigma {:.4}",
                ep + 1,
                s.mean_reward,
                s.objective,
                s.sigma
            );
        }
    }
    write_bytes(&ckpt_dir.join("final.ckpt"), &t.to_checkpoint())?;
    Ok(rows)
}

pub fn train(common: &Common, scheme: Option<&str>, jobs: usize) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(s) = scheme {
        cfg.run.scheme = parse_scheme(s)?;
    }
    if cfg.run.scheme == Scheme::GridOracle {
        bail!(usage("grid_oracle is not trainable; use the `oracle` subcommand"));
    }
    let seeds = seeds(common, &cfg);
    cfg.run.seeds = seeds.clone();
    let cfg = effective_config(&cfg, cfg.run.scheme);
    let dir = out_dir(common, &cfg.run.output_dir, &format!("train-{}", cfg.run.scheme.name()));
    create_dir(&dir)?;
    write_resolved(&dir, &cfg)?;
    let mut rows = Vec::new();
    for r in pool::map(&seeds, jobs, |&seed| train_seed(&cfg, seed, &dir)) {
        rows.extend(r?);
    }
    write_csv(&dir.join("metrics.csv"), &METRICS_COLUMNS, &rows)?;
    println!("{}", dir.display());
    Ok(())
}

// ----------------------------------------------------------------- evaluate

pub fn evaluate(checkpoint: &Path, episodes: Option<usize>, seed: Option<u64>, set: &[String], out: Option<&Path>) -> Result<()> {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let t = Trainer::from_checkpoint(&bytes).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = ExperimentConfig::from_toml_str(&t.config().to_toml(), set)?;
    let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
    let seed = seed.unwrap_or(t.seed());
    let rows = if set.is_empty() {
        t.evaluate_seeded(seed, episodes)?
    } else {
        t.evaluate_on_seeded(&cfg, seed, episodes)?
    };
    let id = format!("{}-eval", run_id(t.scheme(), t.seed()));
    let records: Vec<MetricsRecord> = rows.iter().map(|s| MetricsRecord::new(&id, seed, s)).collect();
    match out {
        Some(p) => write_csv(p, &METRICS_COLUMNS, &records),
        None => write_csv_to(std::io::stdout().lock(), &METRICS_COLUMNS, &records),
    }
}

// -------------------------------------------------------------------- sweep

#[derive(Debug, Serialize)]
struct SweepRow {
    axis: &'static str,
    value: f64,
    scheme: String,
    seed: u64,
    sum_rate: f64,
    see: f64,
    jain: f64,
    objective: f64,
}

const SWEEP_COLUMNS: [&str; 8] = ["axis", "value", "scheme", "seed", "sum_rate", "see", "jain", "objective"];

struct Cell {
    value: f64,
    scheme: Scheme,
    label: String,
    seed: u64,
    cfg: ExperimentConfig,
}

fn integer(v: f64, what: &str) -> Result<usize> {
    if v < 1.0 || v.fract() != 0.0 || v > 1e6 {
        bail!(usage(format!("{what} must be a positive integer, got {v}")));
    }
    Ok(v as usize)
}

/// Base configuration with the axis set to `v`.
fn apply_axis(base: &ExperimentConfig, axis: Axis, v: f64) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match axis {
        Axis::Power => {
            if !(v > 0.0 && v.is_finite()) {
                bail!(usage(format!("optical power must be positive, got {v}")));
            }
            c.link.p_opt = v;
        }
        Axis::Mirrors => {
            let m = integer(v, "mirror count")?;
            let side = (m as f64).sqrt().round() as usize;
            if side * side != m {
                bail!(usage(format!("mirror count {m} is not a perfect square")));
            }
            c.scene.irs.rows = side;
            c.scene.irs.cols = side;
        }
        Axis::Users => {
            if c.scene.users.positions.is_some() {
                bail!(usage("the users axis needs random placement; remove scene.users.positions"));
            }
            c.scene.users.count = integer(v, "user count")?;
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn sweep(common: &Common, axis: Axis, values: &[f64], schemes: &[String], rmin: Option<&[f64]>, jobs: usize) -> Result<()> {
    let base = load(common)?;
    let schemes: Vec<Scheme> = schemes.iter().map(|s| parse_scheme(s)).collect::<Result<_>>()?;
    if schemes.contains(&Scheme::GridOracle) {
        bail!(usage("grid_oracle cannot be swept; use the `oracle` subcommand"));
    }
    let seeds = seeds(common, &base);
    let families: Vec<Option<f64>> = match rmin {
        Some(r) => r.iter().map(|&x| Some(x)).collect(),
        None => vec![None],
    };
    let n = values.len() * schemes.len() * seeds.len() * families.len();
    if n > base.run.max_sweep_cells {
        bail!(usage(format!(
            "sweep has {n} cells, above run.max_sweep_cells = {}",
            base.run.max_sweep_cells
        )));
    }
    let mut cells = Vec::with_capacity(n);
    for &v in values {
        let at = apply_axis(&base, axis, v)?;
        for &scheme in &schemes {
            for fam in &families {
                let mut cfg = at.clone();
                let mut label = scheme.name().to_string();
                if let Some(r) = fam {
                    cfg.environment.rmin_range = [r * 1e6, r * 1e6];
                    cfg.validate()?;
                    label = format!("{label}@rmin={r}");
                }
                for &seed in &seeds {
                    cells.push(Cell {
                        value: v,
                        scheme,
                        label: label.clone(),
                        seed,
                        cfg: cfg.clone(),
                    });
                }
            }
        }
    }
    let dir = out_dir(common, &base.run.output_dir, &format!("sweep-{}", axis.name()));
    create_dir(&dir)?;
    let mut resolved = base.clone();
    resolved.run.seeds = seeds;
    write_resolved(&dir, &resolved)?;

    let results = pool::map(&cells, jobs, |c| -> Result<SweepRow> {
        let mut t = Trainer::new(&c.cfg, c.scheme, c.seed)?;
        for _ in 0..c.cfg.agents.episodes {
            t.train_episode()?;
        }
        let ev = t.evaluate(c.cfg.run.eval_episodes)?;
        eprintln!("{} {} {} seed {}: done", axis.name(), c.value, c.label, c.seed);
        Ok(SweepRow {
            axis: axis.name(),
            value: c.value,
            scheme: c.label.clone(),
            seed: c.seed,
            sum_rate: mean_of(&ev, |s| s.sum_rate),
            see: mean_of(&ev, |s| s.see),
            jain: mean_of(&ev, |s| s.jain),
            objective: mean_of(&ev, |s| s.objective),
        })
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.scheme.cmp(&b.scheme))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    write_csv(&dir.join("sweep.csv"), &SWEEP_COLUMNS, &rows)?;
    println!("{}", dir.display());
    Ok(())
}

// ------------------------------------------------------------------- oracle

#[derive(Debug, Serialize)]
struct OracleRow {
    kind: &'static str,
    feasible: bool,
    objective: f64,
    see: f64,
    jain: f64,
    sum_rate: f64,
    /// Simplex point, `;`-separated.
    power: String,
    /// `yaw:roll` per mirror in radians, `;`-separated.
    angles: String,
}

const ORACLE_COLUMNS: [&str; 8] = ["kind", "feasible", "objective", "see", "jain", "sum_rate", "power", "angles"];

fn oracle_row(kind: &'static str, p: &OraclePoint) -> OracleRow {
    let power: Vec<String> = p.power.iter().map(|x| x.to_string()).collect();
    let angles: Vec<String> = p.angles.iter().map(|(y, r)| format!("{y}:{r}")).collect();
    OracleRow {
        kind,
        feasible: p.metrics.feasible(),
        objective: p.metrics.objective,
        see: p.metrics.see,
        jain: p.metrics.jain,
        sum_rate: p.metrics.sum_rate,
        power: power.join(";"),
        angles: angles.join(";"),
    }
}

pub fn oracle(common: &Common, power_steps: usize, angle_points: usize, sample_every: usize) -> Result<()> {
    let cfg = load(common)?;
    let seed = seeds(common, &cfg).first().copied().unwrap_or(0);
    let spec = GridSpec {
        power_steps,
        angle_points,
    };
    let mut env = Environment::new(&cfg)?;
    env.reset(evaluation_seed(seed, 0))?;
    let mut grid = Vec::new();
    let mut i = 0usize;
    let res = grid_oracle(&env, &spec, |p| {
        if sample_every > 0 && i % sample_every == 0 {
            grid.push(oracle_row("grid", p));
        }
        i += 1;
    })
    .map_err(|e| match e {
        irsnoma::Error::Budget { requested, limit } => usage(format!(
            "grid of {requested} points exceeds the oracle budget of {limit}; reduce --power-steps, --angle-points or the scene size"
        )),
        e => e.into(),
    })?;
    let dir = out_dir(common, &cfg.run.output_dir, "oracle");
    create_dir(&dir)?;
    write_resolved(&dir, &cfg)?;
    let mut best = Vec::new();
    if let Some(p) = &res.best_feasible {
        best.push(oracle_row("best_feasible", p));
    }
    best.push(oracle_row("best_overall", &res.best_overall));
    write_csv(&dir.join("oracle.csv"), &ORACLE_COLUMNS, &best)?;
    if sample_every > 0 {
        write_csv(&dir.join("grid.csv"), &ORACLE_COLUMNS, &grid)?;
    }
    let b = res.best();
    println!(
        "{}: objective {:.6e} power [{}] ({} points)",
        dir.display(),
        b.metrics.objective,
        b.power.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "),
        res.evaluated
    );
    Ok(())
}
