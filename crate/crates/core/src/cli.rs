//! Command-line front end.
//!
//! Every command reads defaults, then the `--config` file, then flags, in
//! that order of increasing precedence. Output files are overwritten.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, GroupBy};
use crate::config::RunConfig;
use crate::cost::{self, CostReport};
use crate::error::{Error, Result};
use crate::exec;
use crate::numkern::dump_tensor;
use crate::pipeline::{self, csv_err, ModeTag, Pipeline, TrajectoryMode};
use crate::scheduler::SchedulerKind;
use crate::tgate::{AnchorMode, GateSchedule};

/// Prompts `converge` uses when none are given.
pub const DEFAULT_CONVERGE_PROMPTS: [&str; 3] = [
    "a red cube resting on a wooden table",
    "an astronaut riding a horse on the moon",
    "a watercolor painting of a quiet harbor at dawn",
];

#[derive(Parser, Debug)]
#[command(name = "tgate", version, about = "Cross-attention gating for a toy diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one trajectory and write its latent, step log and cost report.
    Generate(GenerateArgs),
    /// Sweep trajectory modes over gate steps and intervals.
    Ablate(AblateArgs),
    /// Cross-attention convergence curve over baseline runs.
    Converge(ConvergeArgs),
    /// Analytic per-step MACs of the configured schedule.
    Cost(CommonArgs),
    /// Per-step MACs over resolutions and text lengths.
    Scale(ScaleArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Config file (key = value lines under [section] headers).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Prompt; repeat for several.
    #[arg(long)]
    pub prompt: Vec<String>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long, value_parser = ["ddim", "dpm2m", "euler"])]
    pub scheduler: Option<String>,
    /// Sampling steps n.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale w.
    #[arg(long)]
    pub cfg_scale: Option<f32>,
    /// Run the conditional branch only.
    #[arg(long)]
    pub no_cfg: bool,
    /// Gate step m.
    #[arg(long)]
    pub gate_step: Option<usize>,
    /// Self-attention interval k.
    #[arg(long)]
    pub sa_interval: Option<usize>,
    /// Self-attention warm-up steps.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, value_parser = ["average", "cond", "uncond"])]
    pub anchor: Option<String>,
    /// Keep both guidance branches after the gate step.
    #[arg(long)]
    pub no_collapse: bool,
    #[arg(long)]
    pub no_ca_cache: bool,
    #[arg(long)]
    pub no_sa_cache: bool,
    /// Check analytic MACs against the instrumented counter and write them out.
    #[arg(long)]
    pub cost_report: bool,
    /// Write measured wall-clock instead of zeros.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub latent_side: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub text_len: Option<usize>,
    /// Seed of the denoiser weights.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trajectory mode: S, S_F, S_L, SA_F, SA_L or TGATE.
    #[arg(long)]
    pub mode: Option<String>,
    /// Also dump every weight tensor under DIR/weights.
    #[arg(long)]
    pub dump_weights: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub m_values: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub k_values: Vec<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = ["both", "cond", "uncond"])]
    pub branch: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ScaleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub token_factors: Vec<usize>,
}

impl CommonArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if !self.prompt.is_empty() {
            c.prompts = self.prompt.clone();
        }
        if !self.seed.is_empty() {
            c.seeds = self.seed.clone();
        }
        if let Some(s) = &self.scheduler {
            c.scheduler = s.parse::<SchedulerKind>().map_err(usage)?;
        }
        if let Some(n) = self.steps {
            c.steps = n;
        }
        if let Some(w) = self.cfg_scale {
            c.guidance.scale = w;
        }
        if self.no_cfg {
            c.guidance.enabled = false;
        }
        if let Some(m) = self.gate_step {
            c.gate.m = Some(m);
        }
        if let Some(k) = self.sa_interval {
            c.gate.k = Some(k);
        }
        if let Some(w) = self.warmup {
            c.gate.warmup = Some(w);
        }
        if let Some(a) = &self.anchor {
            c.gate.anchor = a.parse::<AnchorMode>().map_err(usage)?;
        }
        if self.no_collapse {
            c.gate.collapse_cfg = false;
        }
        if self.no_ca_cache {
            c.gate.ca_caching = false;
        }
        if self.no_sa_cache {
            c.gate.sa_caching = false;
        }
        c.cost_report |= self.cost_report;
        c.timing |= self.timing;
        let m = &mut c.model;
        for (slot, v) in [
            (&mut m.latent_side, self.latent_side),
            (&mut m.width, self.width),
            (&mut m.heads, self.heads),
            (&mut m.blocks, self.blocks),
            (&mut m.text_len, self.text_len),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(s) = self.model_seed {
            m.seed = s;
        }
        Ok(c)
    }
}

fn usage(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn out_dir(c: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&c.out)?;
    Ok(c.out.clone())
}

fn write_run_config(c: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("run.cfg"), c.to_config_string())?;
    Ok(())
}

/// Gate schedule a mode runs under, for cost accounting.
fn accounting_schedule(mode: &TrajectoryMode, n: usize) -> GateSchedule {
    mode.schedule(n).unwrap_or_else(|| GateSchedule::disabled(n))
}

/// Runs the parsed command line; the error carries the exit code.
pub fn run(cli: Cli) -> Result<()> {
    let threads = exec::thread_cap_from_env();
    exec::with_thread_cap(threads, move || match cli.command {
        Command::Generate(a) => {
            let mut c = a.common.resolve()?;
            if let Some(m) = &a.mode {
                c.mode = m.parse().map_err(usage)?;
            }
            cmd_generate(&c, a.dump_weights)
        }
        Command::Ablate(a) => {
            let mut c = a.common.resolve()?;
            if !a.modes.is_empty() {
                c.sweep_modes = a
                    .modes
                    .iter()
                    .map(|m| m.parse::<ModeTag>())
                    .collect::<Result<_>>()
                    .map_err(usage)?;
            }
            if !a.m_values.is_empty() {
                c.m_values = a.m_values.clone();
            }
            if !a.k_values.is_empty() {
                c.k_values = a.k_values.clone();
            }
            cmd_ablate(&c)
        }
        Command::Converge(a) => {
            let mut c = a.common.resolve()?;
            if let Some(b) = &a.branch {
                c.branch = b.parse().map_err(usage)?;
            }
            cmd_converge(&c)
        }
        Command::Cost(a) => cmd_cost(&a.resolve()?),
        Command::Scale(a) => {
            let mut c = a.common.resolve()?;
            if !a.resolutions.is_empty() {
                c.resolutions = a.resolutions.clone();
            }
            if !a.token_factors.is_empty() {
                c.token_factors = a.token_factors.clone();
            }
            cmd_scale(&c)
        }
    })
}

/// Writes `latent.bin`/`latent.json`, `trajectory.csv`, `cost.csv` and
/// `run.cfg`. Several seeds go to one `seed-<s>` subdirectory each.
pub fn cmd_generate(c: &RunConfig, dump_weights: bool) -> Result<()> {
    c.validate()?;
    let prompt = match c.prompts.as_slice() {
        [] => return Err(Error::Config("generate needs --prompt".into())),
        [p] => p.clone(),
        _ => return Err(Error::Config("generate takes a single prompt".into())),
    };
    let mode = c.trajectory_mode();
    mode.validate(c.steps).map_err(usage)?;
    let pipe = Pipeline::new(c.pipeline_config(false))?;
    let root = out_dir(c)?;
    write_run_config(c, &root)?;
    if dump_weights {
        let wdir = root.join("weights");
        fs::create_dir_all(&wdir)?;
        for (name, t) in pipe.denoiser().named_weights() {
            dump_tensor(t, &wdir.join(format!("{name}.bin")))?;
        }
    }
    for &seed in &c.seeds {
        let dir = if c.seeds.len() == 1 {
            root.clone()
        } else {
            let d = root.join(format!("seed-{seed}"));
            fs::create_dir_all(&d)?;
            d
        };
        let log = pipe.run(&mode, &prompt, seed)?;
        dump_tensor(&log.final_latent, &dir.join("latent.bin"))?;
        log.write_csv(create(&dir.join("trajectory.csv"))?, c.timing)?;
        let mut report = cost::trajectory_macs(
            &accounting_schedule(&mode, c.steps),
            &c.model,
            c.guidance.enabled,
        );
        if c.cost_report {
            report = report.attach_instrumented(&log)?;
        }
        report.write_csv(create(&dir.join("cost.csv"))?)?;
    }
    Ok(())
}

/// Writes `ablate.csv`, plus `ablate_cost.csv` under `--cost-report`.
pub fn cmd_ablate(c: &RunConfig) -> Result<()> {
    c.validate()?;
    let prompt = c
        .prompts
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("ablate needs --prompt".into()))?;
    let grid = c.sweep_grid(&prompt);
    for (_, mode) in grid.cells(c.steps) {
        mode.validate(c.steps).map_err(usage)?;
    }
    let pipe = Pipeline::new(c.pipeline_config(false))?;
    let rows = pipeline::ablation_sweep(&pipe, &grid)?;
    let dir = out_dir(c)?;
    write_run_config(c, &dir)?;
    pipeline::write_ablation_csv(&rows, create(&dir.join("ablate.csv"))?, c.timing)?;
    if c.cost_report {
        let mut w = csv::Writer::from_writer(create(&dir.join("ablate_cost.csv"))?);
        w.write_record(["mode", "m", "k", "warmup", "seed", "analytic_macs", "instrumented_macs"])
            .map_err(csv_err)?;
        let cells = grid.cells(c.steps);
        for (row, (_, mode)) in rows.iter().zip(&cells) {
            let analytic = cost::trajectory_macs(
                &accounting_schedule(mode, c.steps),
                &c.model,
                c.guidance.enabled,
            )
            .analytic_total();
            if analytic != row.macs_total {
                return Err(Error::Invariant(format!(
                    "{} (m={:?}, k={:?}): analytic {analytic} != instrumented {}",
                    row.mode, row.m, row.k, row.macs_total
                )));
            }
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                row.mode.name().to_string(),
                opt(row.m),
                opt(row.k),
                opt(row.warmup),
                row.seed.to_string(),
                analytic.to_string(),
                row.macs_total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Writes `converge.csv`, `converge_blocks.csv` and `noise_mean.csv` from
/// baseline runs over every prompt and seed.
pub fn cmd_converge(c: &RunConfig) -> Result<()> {
    c.validate()?;
    let prompts: Vec<String> = if c.prompts.is_empty() {
        DEFAULT_CONVERGE_PROMPTS.iter().map(|s| s.to_string()).collect()
    } else {
        c.prompts.clone()
    };
    if c.steps < 2 {
        return Err(Error::Config("converge needs at least two steps".into()));
    }
    let pipe = Pipeline::new(c.pipeline_config(true))?;
    let jobs: Vec<(&String, u64)> = prompts
        .iter()
        .flat_map(|p| c.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let logs = exec::map_indexed(jobs.len(), |i| {
        pipe.run(&TrajectoryMode::Baseline, jobs[i].0, jobs[i].1)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(c)?;
    write_run_config(c, &dir)?;
    let all = analysis::convergence_from_logs(&logs, GroupBy::All, c.branch)?;
    analysis::write_curve_csv(&all, create(&dir.join("converge.csv"))?)?;
    let blocks = analysis::convergence_from_logs(&logs, GroupBy::PerBlock, c.branch)?;
    analysis::write_curve_csv(&blocks, create(&dir.join("converge_blocks.csv"))?)?;

    let curves: Vec<Vec<f64>> = logs.iter().map(analysis::noise_mean_curve).collect();
    let mut w = csv::Writer::from_writer(create(&dir.join("noise_mean.csv"))?);
    w.write_record(["step", "timestep", "eps_mean"]).map_err(csv_err)?;
    for (j, s) in logs[0].steps.iter().enumerate() {
        let mean = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
        w.write_record([s.step.to_string(), s.timestep.to_string(), mean.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `cost.csv` for the configured schedule. With `--cost-report` a
/// real run checks every step against the instrumented counter.
pub fn cmd_cost(c: &RunConfig) -> Result<()> {
    c.validate()?;
    let schedule = c.schedule();
    let mut report: CostReport = cost::trajectory_macs(&schedule, &c.model, c.guidance.enabled);
    if c.cost_report {
        let pipe = Pipeline::new(c.pipeline_config(false))?;
        let prompt = c.prompts.first().map(String::as_str).unwrap_or("");
        let log = pipe.run(&TrajectoryMode::Tgate(schedule), prompt, c.seeds[0])?;
        report = report.attach_instrumented(&log)?;
    }
    let dir = out_dir(c)?;
    write_run_config(c, &dir)?;
    report.write_csv(create(&dir.join("cost.csv"))?)
}

/// Writes `scale.csv`. `--no-ca-cache` drops the gated column.
pub fn cmd_scale(c: &RunConfig) -> Result<()> {
    c.validate()?;
    let rows = cost::scaling_table(&c.resolutions, &c.token_factors, &c.model, c.gate.ca_caching)
        .map_err(usage)?;
    let dir = out_dir(c)?;
    write_run_config(c, &dir)?;
    cost::write_scaling_csv(&rows, create(&dir.join("scale.csv"))?)
}
