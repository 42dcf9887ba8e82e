//! Run configuration and its text format.
//!
//! The file is flat `key = value` lines grouped under `[section]` headers.
//! `#` starts a comment line. Lists are comma separated. Repeating `prompt`
//! adds another prompt.
//!
//! ```text
//! [model]
//! latent_side = 8
//! width = 64
//!
//! [sampling]
//! scheduler = dpm2m
//! steps = 25
//! cfg_scale = 7.5
//!
//! [gate]
//! m = 15
//! k = 5
//!
//! [run]
//! prompt = a red cube on a table
//! seeds = 7, 11
//! ```
//!
//! Keys: `[model]` latent_side, channels, patch, width, heads, blocks,
//! mlp_ratio, text_len, text_dim, seed. `[sampling]` scheduler, steps,
//! cfg_scale, cfg. `[gate]` m, k, warmup, sa_caching, ca_caching, anchor,
//! collapse. `[run]` prompt, seeds, out, mode, timing, cost_report, branch.
//! `[sweep]` modes, m_values, k_values. `[scale]` resolutions, token_factors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::BranchFilter;
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::pipeline::{ModeTag, PipelineConfig, SweepGrid, TrajectoryMode};
use crate::scheduler::SchedulerKind;
use crate::tgate::{AnchorMode, GateSchedule};

/// Gate settings; unset values take the step-count dependent defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSettings {
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub warmup: Option<usize>,
    pub sa_caching: bool,
    pub ca_caching: bool,
    pub anchor: AnchorMode,
    pub collapse_cfg: bool,
}

impl Default for GateSettings {
    fn default() -> Self {
        Self {
            m: None,
            k: None,
            warmup: None,
            sa_caching: true,
            ca_caching: true,
            anchor: AnchorMode::Average,
            collapse_cfg: true,
        }
    }
}

impl GateSettings {
    pub fn schedule(&self, n: usize) -> GateSchedule {
        let d = GateSchedule::new(n);
        let m = self.m.unwrap_or(d.m);
        GateSchedule {
            m,
            k: self.k.unwrap_or(d.k),
            warmup: self.warmup.unwrap_or(d.warmup.min(m)),
            sa_caching: self.sa_caching,
            ca_caching: self.ca_caching,
            anchor: self.anchor,
            collapse_cfg: self.collapse_cfg,
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub scheduler: SchedulerKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub gate: GateSettings,
    pub prompts: Vec<String>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub mode: ModeTag,
    pub timing: bool,
    pub cost_report: bool,
    pub branch: BranchFilter,
    pub sweep_modes: Vec<ModeTag>,
    pub m_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub token_factors: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            scheduler: SchedulerKind::Dpm2m,
            steps: 25,
            guidance: GuidanceConfig::default(),
            gate: GateSettings::default(),
            prompts: Vec::new(),
            seeds: vec![7],
            out: PathBuf::from("out"),
            mode: ModeTag::Tgate,
            timing: false,
            cost_report: false,
            branch: BranchFilter::Both,
            sweep_modes: vec![ModeTag::SF, ModeTag::SL],
            m_values: vec![3, 5, 10],
            k_values: Vec::new(),
            resolutions: vec![8, 16, 32],
            token_factors: vec![1, 128, 1024],
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {key}: {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn branch_name(b: BranchFilter) -> &'static str {
    match b {
        BranchFilter::Both => "both",
        BranchFilter::Conditional => "cond",
        BranchFilter::Unconditional => "uncond",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        let mut prompts_seen = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if section == "run" && key == "prompt" && !prompts_seen {
                self.prompts.clear();
                prompts_seen = true;
            }
            self.set(&section, key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let g = &mut self.gate;
        match (section, key) {
            ("model", "latent_side") => m.latent_side = parse(key, v)?,
            ("model", "channels") => m.channels = parse(key, v)?,
            ("model", "patch") => m.patch = parse(key, v)?,
            ("model", "width") => m.width = parse(key, v)?,
            ("model", "heads") => m.heads = parse(key, v)?,
            ("model", "blocks") => m.blocks = parse(key, v)?,
            ("model", "mlp_ratio") => m.mlp_ratio = parse(key, v)?,
            ("model", "text_len") => m.text_len = parse(key, v)?,
            ("model", "text_dim") => m.text_dim = parse(key, v)?,
            ("model", "seed") => m.seed = parse(key, v)?,
            ("sampling", "scheduler") => self.scheduler = parse(key, v)?,
            ("sampling", "steps") => self.steps = parse(key, v)?,
            ("sampling", "cfg_scale") => self.guidance.scale = parse(key, v)?,
            ("sampling", "cfg") => self.guidance.enabled = parse_bool(key, v)?,
            ("gate", "m") => g.m = parse_opt(key, v)?,
            ("gate", "k") => g.k = parse_opt(key, v)?,
            ("gate", "warmup") => g.warmup = parse_opt(key, v)?,
            ("gate", "sa_caching") => g.sa_caching = parse_bool(key, v)?,
            ("gate", "ca_caching") => g.ca_caching = parse_bool(key, v)?,
            ("gate", "anchor") => g.anchor = parse(key, v)?,
            ("gate", "collapse") => g.collapse_cfg = parse_bool(key, v)?,
            ("run", "prompt") => self.prompts.push(v.to_string()),
            ("run", "seeds") => self.seeds = parse_list(key, v)?,
            ("run", "out") => self.out = PathBuf::from(v),
            ("run", "mode") => self.mode = parse(key, v)?,
            ("run", "timing") => self.timing = parse_bool(key, v)?,
            ("run", "cost_report") => self.cost_report = parse_bool(key, v)?,
            ("run", "branch") => self.branch = parse(key, v)?,
            ("sweep", "modes") => self.sweep_modes = parse_list(key, v)?,
            ("sweep", "m_values") => self.m_values = parse_list(key, v)?,
            ("sweep", "k_values") => self.k_values = parse_list(key, v)?,
            ("scale", "resolutions") => self.resolutions = parse_list(key, v)?,
            ("scale", "token_factors") => self.token_factors = parse_list(key, v)?,
            _ => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")));
            }
        }
        Ok(())
    }

    pub fn pipeline_config(&self, record_maps: bool) -> PipelineConfig {
        PipelineConfig {
            denoiser: self.model.clone(),
            scheduler: self.scheduler,
            steps: self.steps,
            guidance: self.guidance,
            record_maps,
        }
    }

    pub fn schedule(&self) -> GateSchedule {
        self.gate.schedule(self.steps)
    }

    /// The single trajectory `generate` runs.
    pub fn trajectory_mode(&self) -> TrajectoryMode {
        let s = self.schedule();
        TrajectoryMode::from_tag(self.mode, self.steps, s.m, s.k, s.warmup, &s)
    }

    pub fn sweep_grid(&self, prompt: &str) -> SweepGrid {
        let base = self.schedule();
        SweepGrid {
            modes: self.sweep_modes.clone(),
            m_values: self.m_values.clone(),
            k_values: if self.k_values.is_empty() {
                vec![base.k]
            } else {
                self.k_values.clone()
            },
            warmup: base.warmup,
            seeds: self.seeds.clone(),
            prompt: prompt.to_string(),
            base_schedule: base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        self.schedule()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Serializes every setting with resolved gate values. The output
    /// directory is left out so that the file's bytes only depend on what
    /// determines the results.
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let s = self.schedule();
        let mut o = String::new();
        let _ = writeln!(o, "[model]");
        for (k, v) in [
            ("latent_side", m.latent_side),
            ("channels", m.channels),
            ("patch", m.patch),
            ("width", m.width),
            ("heads", m.heads),
            ("blocks", m.blocks),
            ("mlp_ratio", m.mlp_ratio),
            ("text_len", m.text_len),
            ("text_dim", m.text_dim),
        ] {
            let _ = writeln!(o, "{k} = {v}");
        }
        let _ = writeln!(o, "seed = {}", m.seed);
        let _ = writeln!(o, "\n[sampling]");
        let _ = writeln!(o, "scheduler = {}", self.scheduler);
        let _ = writeln!(o, "steps = {}", self.steps);
        let _ = writeln!(o, "cfg_scale = {}", self.guidance.scale);
        let _ = writeln!(o, "cfg = {}", self.guidance.enabled);
        let _ = writeln!(o, "\n[gate]");
        let _ = writeln!(o, "m = {}", s.m);
        let _ = writeln!(o, "k = {}", s.k);
        let _ = writeln!(o, "warmup = {}", s.warmup);
        let _ = writeln!(o, "sa_caching = {}", s.sa_caching);
        let _ = writeln!(o, "ca_caching = {}", s.ca_caching);
        let _ = writeln!(o, "anchor = {}", s.anchor);
        let _ = writeln!(o, "collapse = {}", s.collapse_cfg);
        let _ = writeln!(o, "\n[run]");
        for p in &self.prompts {
            let _ = writeln!(o, "prompt = {p}");
        }
        let _ = writeln!(o, "seeds = {}", join(&self.seeds));
        let _ = writeln!(o, "mode = {}", self.mode.name());
        let _ = writeln!(o, "timing = {}", self.timing);
        let _ = writeln!(o, "cost_report = {}", self.cost_report);
        let _ = writeln!(o, "branch = {}", branch_name(self.branch));
        let _ = writeln!(o, "\n[sweep]");
        let modes: Vec<&str> = self.sweep_modes.iter().map(|t| t.name()).collect();
        let _ = writeln!(o, "modes = {}", modes.join(","));
        let _ = writeln!(o, "m_values = {}", join(&self.m_values));
        let _ = writeln!(o, "k_values = {}", join(&self.k_values));
        let _ = writeln!(o, "\n[scale]");
        let _ = writeln!(o, "resolutions = {}", join(&self.resolutions));
        let _ = writeln!(o, "token_factors = {}", join(&self.token_factors));
        o
    }
}
