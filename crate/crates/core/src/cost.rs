//! Analytic multiply-accumulate model of the toy denoiser.
//!
//! Only matmul multiply-accumulates count; softmax, normalization, GELU,
//! bias and residual additions are free. The per-block terms, with s latent
//! tokens, s_c text tokens of width D_t, model width D and MLP width D_f:
//!
//! ```text
//! self-attention   4·s·D² + 2·s²·D
//! cross-attention  2·s·D² + 2·s_c·D_t·D + 2·s·s_c·D
//! MLP              2·s·D·D_f
//! patch in/out     2·s·P·D            (once per pass, P = channels·patch²)
//! ```
//!
//! The instrumented counter in the kernel sees exactly the same matmuls, so
//! analytic and instrumented totals must agree to the unit.

use std::io::Write;

use serde::Serialize;

use crate::denoiser::{AttentionKind, DenoiserConfig, LABEL_CA, LABEL_MLP, LABEL_PROJ, LABEL_SA};
use crate::error::{Error, Result};
use crate::pipeline::{csv_err, TrajectoryLog};
use crate::tgate::{decide, window_recomputations, Action, GateSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepFlags {
    pub ca_active: bool,
    pub sa_active: bool,
    pub branches: u64,
}

impl StepFlags {
    pub const FULL_SINGLE: StepFlags = StepFlags {
        ca_active: true,
        sa_active: true,
        branches: 1,
    };
}

/// MACs split by sublayer label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacBreakdown {
    pub sa: u64,
    pub ca: u64,
    pub mlp: u64,
    pub proj: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.sa + self.ca + self.mlp + self.proj
    }

    fn add(&mut self, o: &MacBreakdown) {
        self.sa += o.sa;
        self.ca += o.ca;
        self.mlp += o.mlp;
        self.proj += o.proj;
    }
}

pub fn self_attention_macs(c: &DenoiserConfig) -> u64 {
    let (s, d) = (c.tokens() as u64, c.width as u64);
    4 * s * d * d + 2 * s * s * d
}

pub fn cross_attention_macs(c: &DenoiserConfig) -> u64 {
    let (s, d) = (c.tokens() as u64, c.width as u64);
    let (sc, dt) = (c.text_len as u64, c.text_dim as u64);
    2 * s * d * d + 2 * sc * dt * d + 2 * s * sc * d
}

pub fn mlp_macs(c: &DenoiserConfig) -> u64 {
    2 * c.tokens() as u64 * c.width as u64 * c.mlp_hidden() as u64
}

pub fn patch_macs(c: &DenoiserConfig) -> u64 {
    2 * c.tokens() as u64 * c.patch_dim() as u64 * c.width as u64
}

pub fn analytic_step_breakdown(config: &DenoiserConfig, flags: StepFlags) -> MacBreakdown {
    let l = config.blocks as u64;
    let b = flags.branches;
    MacBreakdown {
        sa: if flags.sa_active { b * l * self_attention_macs(config) } else { 0 },
        ca: if flags.ca_active { b * l * cross_attention_macs(config) } else { 0 },
        mlp: b * l * mlp_macs(config),
        proj: b * patch_macs(config),
    }
}

pub fn analytic_step_macs(config: &DenoiserConfig, flags: StepFlags) -> u64 {
    analytic_step_breakdown(config, flags).total()
}

/// Flags the gating controller applies at step j.
pub fn step_flags(schedule: &GateSchedule, j: usize, guidance_enabled: bool) -> StepFlags {
    let branches = if schedule.collapses(j) || !guidance_enabled { 1 } else { 2 };
    StepFlags {
        ca_active: decide(j, 0, AttentionKind::Cross, schedule) != Action::Reuse,
        sa_active: decide(j, 0, AttentionKind::SelfAttn, schedule) != Action::Reuse,
        branches,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepCost {
    pub step: usize,
    pub branches: u64,
    pub analytic: MacBreakdown,
    pub instrumented: Option<MacBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub steps: Vec<StepCost>,
    pub cache_bytes: u64,
}

impl CostReport {
    pub fn analytic_total(&self) -> u64 {
        self.steps.iter().map(|s| s.analytic.total()).sum()
    }

    pub fn instrumented_total(&self) -> Option<u64> {
        self.steps
            .iter()
            .map(|s| s.instrumented.map(|b| b.total()))
            .sum()
    }

    pub fn analytic_breakdown(&self) -> MacBreakdown {
        let mut acc = MacBreakdown::default();
        for s in &self.steps {
            acc.add(&s.analytic);
        }
        acc
    }

    /// Fills in the instrumented counts from a trajectory run under the same
    /// schedule. Any per-step, per-label disagreement is an invariant
    /// violation.
    pub fn attach_instrumented(mut self, log: &TrajectoryLog) -> Result<Self> {
        if log.steps.len() != self.steps.len() {
            return Err(Error::Invariant(format!(
                "cost report covers {} steps, trajectory has {}",
                self.steps.len(),
                log.steps.len()
            )));
        }
        for (sc, sl) in self.steps.iter_mut().zip(&log.steps) {
            let m = &sl.macs;
            let measured = MacBreakdown {
                sa: m.get(LABEL_SA),
                ca: m.get(LABEL_CA),
                mlp: m.get(LABEL_MLP),
                proj: m.get(LABEL_PROJ),
            };
            if measured.total() != m.total() {
                return Err(Error::Invariant(format!(
                    "step {}: counter saw unlabelled MACs",
                    sc.step
                )));
            }
            if measured != sc.analytic {
                return Err(Error::Invariant(format!(
                    "step {}: analytic {:?} != instrumented {:?}",
                    sc.step, sc.analytic, measured
                )));
            }
            sc.instrumented = Some(measured);
        }
        Ok(self)
    }

    /// CSV: step, branches, analytic_macs, instrumented_macs, sa, ca, mlp, proj.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "step",
            "branches",
            "analytic_macs",
            "instrumented_macs",
            "sa",
            "ca",
            "mlp",
            "proj",
        ])
        .map_err(csv_err)?;
        for s in &self.steps {
            let a = &s.analytic;
            out.write_record([
                s.step.to_string(),
                s.branches.to_string(),
                a.total().to_string(),
                s.instrumented.map(|b| b.total().to_string()).unwrap_or_default(),
                a.sa.to_string(),
                a.ca.to_string(),
                a.mlp.to_string(),
                a.proj.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.write_record([
            "total".to_string(),
            String::new(),
            self.analytic_total().to_string(),
            self.instrumented_total().map(|t| t.to_string()).unwrap_or_default(),
            String::new(),
            String::new(),
            String::new(),
            format!("cache_bytes={}", self.cache_bytes),
        ])
        .map_err(csv_err)?;
        out.flush()?;
        Ok(())
    }
}

/// Analytic per-step MACs of a whole trajectory under `schedule`.
pub fn trajectory_macs(
    schedule: &GateSchedule,
    config: &DenoiserConfig,
    guidance_enabled: bool,
) -> CostReport {
    let steps = (1..=schedule.n)
        .map(|j| {
            let flags = step_flags(schedule, j, guidance_enabled);
            StepCost {
                step: j,
                branches: flags.branches,
                analytic: analytic_step_breakdown(config, flags),
                instrumented: None,
            }
        })
        .collect();
    CostReport {
        steps,
        cache_bytes: cache_memory_bytes(schedule, config, guidance_enabled),
    }
}

/// Peak bytes held by the feature caches: one cross-attention entry per
/// block, plus one self-attention entry per block and guidance branch when
/// the self-attention window is non-empty.
pub fn cache_memory_bytes(
    schedule: &GateSchedule,
    config: &DenoiserConfig,
    guidance_enabled: bool,
) -> u64 {
    let per_set = (config.blocks * config.tokens() * config.width * 4) as u64;
    let branches = if guidance_enabled { 2 } else { 1 };
    let cross = if schedule.ca_caching { per_set } else { 0 };
    let selfs = if schedule.sa_caching && window_recomputations(schedule) > 0 {
        branches * per_set
    } else {
        0
    };
    cross + selfs
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScalingRow {
    pub resolution: usize,
    pub token_factor: usize,
    pub tokens: usize,
    pub text_tokens: usize,
    /// Single-branch step with cross-attention.
    pub baseline_macs: u64,
    /// Single-branch step with cross-attention served from the cache.
    pub gated_macs: Option<u64>,
}

/// Per-step MACs over latent resolutions and text-length scale factors.
pub fn scaling_table(
    resolutions: &[usize],
    token_factors: &[usize],
    config: &DenoiserConfig,
    with_gating: bool,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &res in resolutions {
        for &f in token_factors {
            if res == 0 || f == 0 {
                return Err(Error::InvalidArgument(
                    "resolutions and token factors must be positive".into(),
                ));
            }
            let c = DenoiserConfig {
                latent_side: res,
                text_len: config.text_len * f,
                ..config.clone()
            };
            c.validate()?;
            let gated = StepFlags {
                ca_active: false,
                ..StepFlags::FULL_SINGLE
            };
            rows.push(ScalingRow {
                resolution: res,
                token_factor: f,
                tokens: c.tokens(),
                text_tokens: c.text_len,
                baseline_macs: analytic_step_macs(&c, StepFlags::FULL_SINGLE),
                gated_macs: with_gating.then(|| analytic_step_macs(&c, gated)),
            });
        }
    }
    Ok(rows)
}

/// CSV: resolution, token_factor, tokens, text_tokens, baseline_macs[, gated_macs].
pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let gated = rows.iter().any(|r| r.gated_macs.is_some());
    let mut header = vec!["resolution", "token_factor", "tokens", "text_tokens", "baseline_macs"];
    if gated {
        header.push("gated_macs");
    }
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.resolution.to_string(),
            r.token_factor.to_string(),
            r.tokens.to_string(),
            r.text_tokens.to_string(),
            r.baseline_macs.to_string(),
        ];
        if gated {
            rec.push(r.gated_macs.map(|g| g.to_string()).unwrap_or_default());
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
