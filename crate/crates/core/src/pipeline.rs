//! Trajectory orchestration: the baseline, the null-text ablations, the
//! self-attention caching ablations and the gated trajectory, plus a
//! parallel ablation sweep over them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::analysis::RecordedMaps;
use crate::denoiser::{embed_text, Denoiser, DenoiserConfig, LatentState, TextCondition};
use crate::error::{Error, Result};
use crate::exec;
use crate::guidance::{self, GuidanceConfig};
use crate::numkern::{MacCounter, Prng, Tensor};
use crate::scheduler::{Sampler, SchedulerKind};
use crate::tgate::{GateSchedule, PassRecord, Recorder, SaPhase, TgateController};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ModeTag {
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S_F")]
    SF,
    #[serde(rename = "S_L")]
    SL,
    #[serde(rename = "SA_F")]
    SaF,
    #[serde(rename = "SA_L")]
    SaL,
    #[serde(rename = "TGATE")]
    Tgate,
}

impl ModeTag {
    pub const ALL: [ModeTag; 6] = [
        ModeTag::S,
        ModeTag::SF,
        ModeTag::SL,
        ModeTag::SaF,
        ModeTag::SaL,
        ModeTag::Tgate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModeTag::S => "S",
            ModeTag::SF => "S_F",
            ModeTag::SL => "S_L",
            ModeTag::SaF => "SA_F",
            ModeTag::SaL => "SA_L",
            ModeTag::Tgate => "TGATE",
        }
    }

    pub fn uses_m(&self) -> bool {
        !matches!(self, ModeTag::S)
    }

    pub fn uses_k(&self) -> bool {
        matches!(self, ModeTag::SaF | ModeTag::SaL | ModeTag::Tgate)
    }

    pub fn uses_warmup(&self) -> bool {
        matches!(self, ModeTag::SaL | ModeTag::Tgate)
    }
}

impl fmt::Display for ModeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModeTag::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trajectory mode {s:?}")))
    }
}

/// A trajectory and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum TrajectoryMode {
    /// Conditional branch sees the prompt at every step.
    Baseline,
    /// Prompt for steps ≤ m, null text afterwards.
    NullAfter { m: usize },
    /// Null text for steps ≤ m, prompt afterwards.
    NullBefore { m: usize },
    /// Self-attention interval-cached in (m, n].
    SelfCacheFidelity { m: usize, k: usize },
    /// Self-attention interval-cached in (warmup, m].
    SelfCacheSemantics { m: usize, k: usize, warmup: usize },
    Tgate(GateSchedule),
}

impl TrajectoryMode {
    pub fn tag(&self) -> ModeTag {
        match self {
            TrajectoryMode::Baseline => ModeTag::S,
            TrajectoryMode::NullAfter { .. } => ModeTag::SF,
            TrajectoryMode::NullBefore { .. } => ModeTag::SL,
            TrajectoryMode::SelfCacheFidelity { .. } => ModeTag::SaF,
            TrajectoryMode::SelfCacheSemantics { .. } => ModeTag::SaL,
            TrajectoryMode::Tgate(_) => ModeTag::Tgate,
        }
    }

    /// Builds a mode from its tag and the sweep parameters it uses.
    pub fn from_tag(tag: ModeTag, n: usize, m: usize, k: usize, warmup: usize, base: &GateSchedule) -> Self {
        match tag {
            ModeTag::S => TrajectoryMode::Baseline,
            ModeTag::SF => TrajectoryMode::NullAfter { m },
            ModeTag::SL => TrajectoryMode::NullBefore { m },
            ModeTag::SaF => TrajectoryMode::SelfCacheFidelity { m, k },
            ModeTag::SaL => TrajectoryMode::SelfCacheSemantics { m, k, warmup },
            ModeTag::Tgate => TrajectoryMode::Tgate(GateSchedule {
                n,
                m,
                k,
                warmup,
                ..base.clone()
            }),
        }
    }

    pub fn m(&self) -> Option<usize> {
        match self {
            TrajectoryMode::Baseline => None,
            TrajectoryMode::NullAfter { m }
            | TrajectoryMode::NullBefore { m }
            | TrajectoryMode::SelfCacheFidelity { m, .. }
            | TrajectoryMode::SelfCacheSemantics { m, .. } => Some(*m),
            TrajectoryMode::Tgate(s) => Some(s.m),
        }
    }

    pub fn k(&self) -> Option<usize> {
        match self {
            TrajectoryMode::SelfCacheFidelity { k, .. }
            | TrajectoryMode::SelfCacheSemantics { k, .. } => Some(*k),
            TrajectoryMode::Tgate(s) => Some(s.k),
            _ => None,
        }
    }

    pub fn warmup(&self) -> Option<usize> {
        match self {
            TrajectoryMode::SelfCacheSemantics { warmup, .. } => Some(*warmup),
            TrajectoryMode::Tgate(s) => Some(s.warmup),
            _ => None,
        }
    }

    /// Gate schedule driving the controller, if this mode uses one.
    pub fn schedule(&self, n: usize) -> Option<GateSchedule> {
        match self {
            TrajectoryMode::SelfCacheFidelity { m, k } => Some(GateSchedule {
                m: *m,
                k: *k,
                warmup: 0,
                sa_caching: true,
                ca_caching: false,
                collapse_cfg: false,
                sa_phase: SaPhase::Fidelity,
                ..GateSchedule::new(n)
            }),
            TrajectoryMode::SelfCacheSemantics { m, k, warmup } => Some(GateSchedule {
                m: *m,
                k: *k,
                warmup: *warmup,
                sa_caching: true,
                ca_caching: false,
                collapse_cfg: false,
                sa_phase: SaPhase::Semantics,
                ..GateSchedule::new(n)
            }),
            TrajectoryMode::Tgate(s) => Some(s.clone()),
            _ => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(m) = self.m() {
            if m > n {
                return Err(Error::InvalidArgument(format!("gate step {m} exceeds {n} steps")));
            }
        }
        if let Some(s) = self.schedule(n) {
            if s.n != n {
                return Err(Error::InvalidArgument(format!(
                    "schedule built for {} steps, run has {n}",
                    s.n
                )));
            }
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub denoiser: DenoiserConfig,
    pub scheduler: SchedulerKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    /// Keep every computed cross-attention map for convergence analysis.
    pub record_maps: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            scheduler: SchedulerKind::Dpm2m,
            steps: 25,
            guidance: GuidanceConfig::default(),
            record_maps: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub timestep: usize,
    /// Guided (or collapsed) noise prediction fed to the sampler.
    pub eps: Tensor,
    pub eps_mean: f64,
    /// Checksum of each block's cross-attention output, conditional branch.
    pub cross_checksums: Vec<u64>,
    pub macs: MacCounter,
    pub passes: usize,
    pub sa_computed: usize,
    pub ca_computed: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub mode: TrajectoryMode,
    pub prompt: String,
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub final_latent: Tensor,
    pub maps: Option<RecordedMaps>,
    /// Largest number of bytes held by the feature caches at any step.
    pub peak_cache_bytes: usize,
    pub wall_ms: f64,
}

impl TrajectoryLog {
    pub fn total_macs(&self) -> u64 {
        self.steps.iter().map(|s| s.macs.total()).sum()
    }

    /// CSV: step, timestep, eps_mean, macs, passes, sa_computed, ca_computed,
    /// cross_checksums (space separated hex), wall_ms.
    pub fn write_csv<W: Write>(&self, w: W, timing: bool) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            step: usize,
            timestep: usize,
            eps_mean: f64,
            macs: u64,
            passes: usize,
            sa_computed: usize,
            ca_computed: usize,
            cross_checksums: String,
            wall_ms: f64,
        }
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(Row {
                step: s.step,
                timestep: s.timestep,
                eps_mean: s.eps_mean,
                macs: s.macs.total(),
                passes: s.passes,
                sa_computed: s.sa_computed,
                ca_computed: s.ca_computed,
                cross_checksums: s
                    .cross_checksums
                    .iter()
                    .map(|c| format!("{c:016x}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                wall_ms: if timing { s.wall_ms } else { 0.0 },
            })
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Standard-normal initial latent for `seed`.
pub fn initial_latent(config: &DenoiserConfig, seed: u64) -> Tensor {
    let shape = config.latent_shape();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), Prng::new(seed).stream("init_latent").normals(n, 1.0))
        .expect("latent shape")
}

/// A denoiser plus sampling configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    denoiser: Denoiser,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.guidance.validate()?;
        if config.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        let denoiser = Denoiser::new(config.denoiser.clone())?;
        Ok(Self { config, denoiser })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn condition(&self, prompt: &str) -> TextCondition {
        embed_text(prompt, &self.config.denoiser, self.config.denoiser.seed)
    }

    fn baseline_step(
        &self,
        state: &LatentState,
        cond: &TextCondition,
        uncond: &TextCondition,
        counter: &mut MacCounter,
    ) -> Result<(Tensor, Vec<PassRecord>)> {
        let keep = self.config.record_maps;
        let mut rc = Recorder::new(keep);
        let eps_c = self
            .denoiser
            .predict_noise(state, cond, Some(&mut rc), Some(counter))?;
        if !self.config.guidance.enabled {
            return Ok((eps_c, vec![rc.record]));
        }
        let mut ru = Recorder::new(keep);
        let eps_u = self
            .denoiser
            .predict_noise(state, uncond, Some(&mut ru), Some(counter))?;
        let eps = guidance::combine(&eps_u, &eps_c, self.config.guidance.scale)?;
        Ok((eps, vec![rc.record, ru.record]))
    }

    /// Runs one trajectory from the seeded initial latent.
    pub fn run(&self, mode: &TrajectoryMode, prompt: &str, seed: u64) -> Result<TrajectoryLog> {
        let n = self.config.steps;
        mode.validate(n)?;
        let started = Instant::now();
        let cond = self.condition(prompt);
        let uncond = self.condition("");
        let mut sampler = Sampler::new(self.config.scheduler, n)?;
        let mut controller = mode
            .schedule(n)
            .map(|s| TgateController::new(s).map(|c| c.keep_maps(self.config.record_maps)))
            .transpose()?;
        let blocks = self.config.denoiser.blocks;
        let branches = self.config.guidance.branches();
        let mut maps = self
            .config
            .record_maps
            .then(|| RecordedMaps::new(n, blocks, branches));

        let mut z = initial_latent(&self.config.denoiser, seed);
        let mut steps = Vec::with_capacity(n);
        let mut peak_cache_bytes = 0;
        for j in 1..=n {
            let t0 = Instant::now();
            let state = LatentState {
                z,
                step: j,
                timestep: sampler.grid().timestep(j),
            };
            let cond_j = match mode {
                TrajectoryMode::NullAfter { m } if j > *m => &uncond,
                TrajectoryMode::NullBefore { m } if j <= *m => &uncond,
                _ => &cond,
            };
            let mut counter = MacCounter::new();
            let (eps, records) = match controller.as_mut() {
                Some(ctl) => {
                    let out = ctl.step(
                        &state,
                        cond_j,
                        &uncond,
                        &self.denoiser,
                        &self.config.guidance,
                        Some(&mut counter),
                    )?;
                    peak_cache_bytes = peak_cache_bytes.max(ctl.cache_bytes());
                    (out.eps, out.records)
                }
                None => self.baseline_step(&state, cond_j, &uncond, &mut counter)?,
            };
            if let Some(maps) = maps.as_mut() {
                for (b, rec) in records.iter().enumerate() {
                    for (i, m) in rec.cross_maps.iter().enumerate() {
                        if let Some(m) = m {
                            maps.set(j, i, b, m.clone());
                        }
                    }
                }
            }
            let next = sampler.step(&state.z, &eps, j)?;
            steps.push(StepLog {
                step: j,
                timestep: state.timestep,
                eps_mean: eps.mean(),
                cross_checksums: records[0].cross_checksums.clone(),
                passes: records.len(),
                sa_computed: records.iter().map(|r| r.sa_computed).sum(),
                ca_computed: records.iter().map(|r| r.ca_computed).sum(),
                eps,
                macs: counter,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            z = next;
        }
        Ok(TrajectoryLog {
            mode: mode.clone(),
            prompt: prompt.to_string(),
            seed,
            steps,
            final_latent: z,
            maps,
            peak_cache_bytes,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Grid of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub modes: Vec<ModeTag>,
    pub m_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub warmup: usize,
    pub seeds: Vec<u64>,
    pub prompt: String,
    /// Template for the gated mode's remaining flags.
    pub base_schedule: GateSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: ModeTag,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub warmup: Option<usize>,
    pub seed: u64,
    pub latent_l2_vs_s: f64,
    pub latent_cos_vs_s: f64,
    pub macs_total: u64,
    pub wall_ms: f64,
}

impl SweepGrid {
    /// Cells in output order: seed, mode, m, k.
    pub fn cells(&self, n: usize) -> Vec<(u64, TrajectoryMode)> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &tag in &self.modes {
                let ms: Vec<usize> = if tag.uses_m() { self.m_values.clone() } else { vec![n] };
                for &m in &ms {
                    let ks: Vec<usize> = if tag.uses_k() { self.k_values.clone() } else { vec![1] };
                    for &k in &ks {
                        let warmup = self.warmup.min(m);
                        out.push((
                            seed,
                            TrajectoryMode::from_tag(tag, n, m, k, warmup, &self.base_schedule),
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell of `grid` and reports divergence from the baseline
/// trajectory of the same seed. Cells run in parallel; row order and values
/// do not depend on scheduling.
pub fn ablation_sweep(pipeline: &Pipeline, grid: &SweepGrid) -> Result<Vec<AblationRow>> {
    let n = pipeline.steps();
    if !grid.seeds.is_empty() && grid.modes.iter().any(|t| t.uses_m()) && grid.m_values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one gate step".into()));
    }
    if !grid.seeds.is_empty() && grid.modes.iter().any(|t| t.uses_k()) && grid.k_values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one interval".into()));
    }
    let seeds: Vec<u64> = grid.seeds.clone();
    let baselines = exec::map_indexed(seeds.len(), |i| {
        pipeline.run(&TrajectoryMode::Baseline, &grid.prompt, seeds[i])
    });
    let mut baseline_by_seed = BTreeMap::new();
    for (seed, b) in seeds.iter().zip(baselines) {
        baseline_by_seed.insert(*seed, b?);
    }
    let cells = grid.cells(n);
    let results = exec::map_indexed(cells.len(), |i| {
        let (seed, mode) = &cells[i];
        let log = pipeline.run(mode, &grid.prompt, *seed)?;
        let base = &baseline_by_seed[seed];
        Ok::<_, Error>(AblationRow {
            mode: mode.tag(),
            m: mode.m(),
            k: mode.k(),
            warmup: mode.warmup(),
            seed: *seed,
            latent_l2_vs_s: log.final_latent.l2_distance(&base.final_latent)?,
            latent_cos_vs_s: log.final_latent.cosine(&base.final_latent)?,
            macs_total: log.total_macs(),
            wall_ms: log.wall_ms,
        })
    });
    results.into_iter().collect()
}

/// CSV: mode, m, k, warmup, seed, latent_l2_vs_S, latent_cos_vs_S, macs_total, wall_ms.
/// Wall-clock is written as 0 unless `timing` is set.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W, timing: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "mode",
        "m",
        "k",
        "warmup",
        "seed",
        "latent_l2_vs_S",
        "latent_cos_vs_S",
        "macs_total",
        "wall_ms",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.mode.name().to_string(),
            opt(r.m),
            opt(r.k),
            opt(r.warmup),
            r.seed.to_string(),
            r.latent_l2_vs_s.to_string(),
            r.latent_cos_vs_s.to_string(),
            r.macs_total.to_string(),
            if timing { r.wall_ms.to_string() } else { "0".into() },
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
