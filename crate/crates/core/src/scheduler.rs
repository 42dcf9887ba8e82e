//! Noise schedule and deterministic samplers (DDIM, DPM-Solver++(2M), Euler).
//!
//! Coefficients are evaluated in f64 from the cumulative-product table and
//! rounded once to f32; the per-element update is then f32 arithmetic in a
//! fixed order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Tensor;

pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Linear-beta diffusion coefficients on the training grid.
#[derive(Clone, Debug)]
pub struct NoiseScheduleTable {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// (alpha, sigma) pair of a noise level; the clean end is (1, 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub const CLEAN: NoiseLevel = NoiseLevel { alpha: 1.0, sigma: 0.0 };

    /// log(alpha / sigma); +∞ at the clean end.
    pub fn lambda(&self) -> f64 {
        (self.alpha / self.sigma).ln()
    }
}

impl Default for NoiseScheduleTable {
    fn default() -> Self {
        Self::linear(TRAIN_TIMESTEPS, BETA_START, BETA_END)
    }
}

impl NoiseScheduleTable {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bar }
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn level(&self, t: usize) -> NoiseLevel {
        let ab = self.alpha_bar[t];
        NoiseLevel {
            alpha: ab.sqrt(),
            sigma: (1.0 - ab).sqrt(),
        }
    }
}

/// Descending training-grid timesteps for an n-step run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepGrid {
    timesteps: Vec<usize>,
}

impl StepGrid {
    /// `timesteps[j] = ⌊N·(n−j)/n⌋` for j = 1..n, except that a single-step
    /// grid starts from the noisiest index N−1.
    pub fn build(n: usize, table: &NoiseScheduleTable) -> Result<Self> {
        let big_n = table.train_steps();
        if n == 0 || n > big_n {
            return Err(Error::InvalidArgument(format!(
                "steps must lie in 1..={big_n}, got {n}"
            )));
        }
        if n == 1 {
            return Ok(Self { timesteps: vec![big_n - 1] });
        }
        let timesteps = (1..=n).map(|j| big_n * (n - j) / n).collect();
        Ok(Self { timesteps })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Timestep of 1-based step j.
    pub fn timestep(&self, j: usize) -> usize {
        self.timesteps[j - 1]
    }

    /// Noise level at step j and the level the step moves to.
    pub fn levels(&self, j: usize, table: &NoiseScheduleTable) -> Result<(NoiseLevel, NoiseLevel)> {
        if j == 0 || j > self.len() {
            return Err(Error::InvalidArgument(format!(
                "step {j} outside 1..={}",
                self.len()
            )));
        }
        let from = table.level(self.timestep(j));
        let to = if j == self.len() {
            NoiseLevel::CLEAN
        } else {
            table.level(self.timestep(j + 1))
        };
        Ok((from, to))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchedulerKind {
    Ddim,
    #[default]
    Dpm2m,
    Euler,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 3] = [SchedulerKind::Ddim, SchedulerKind::Dpm2m, SchedulerKind::Euler];

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Ddim => "ddim",
            SchedulerKind::Dpm2m => "dpm2m",
            SchedulerKind::Euler => "euler",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SchedulerKind::Ddim),
            "dpm2m" => Ok(SchedulerKind::Dpm2m),
            "euler" => Ok(SchedulerKind::Euler),
            other => Err(Error::InvalidArgument(format!("unknown scheduler {other:?}"))),
        }
    }
}

fn same_shape(z: &Tensor, eps: &Tensor, op: &'static str) -> Result<()> {
    if z.shape() != eps.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", z.shape(), eps.shape())));
    }
    Ok(())
}

fn finish(shape: &[usize], data: Vec<f32>, op: &'static str) -> Result<Tensor> {
    let t = Tensor::new(shape.to_vec(), data)?;
    t.check_finite(op)?;
    Ok(t)
}

fn x0_prediction(z: &Tensor, eps: &Tensor, from: NoiseLevel) -> Vec<f32> {
    let (a, s) = (from.alpha as f32, from.sigma as f32);
    z.data().iter().zip(eps.data()).map(|(&zv, &ev)| (zv - s * ev) / a).collect()
}

/// Deterministic (η = 0) DDIM update from step j to the next grid point.
pub fn ddim_step(
    z: &Tensor,
    eps_hat: &Tensor,
    j: usize,
    grid: &StepGrid,
    table: &NoiseScheduleTable,
) -> Result<Tensor> {
    same_shape(z, eps_hat, "ddim_step")?;
    let (from, to) = grid.levels(j, table)?;
    let x0 = x0_prediction(z, eps_hat, from);
    let (a, s) = (to.alpha as f32, to.sigma as f32);
    let out = x0.iter().zip(eps_hat.data()).map(|(&x, &e)| a * x + s * e).collect();
    finish(z.shape(), out, "ddim_step")
}

/// State carried between DPM-Solver++(2M) steps.
#[derive(Clone, Debug, Default)]
pub struct DpmHistory {
    prev: Option<(usize, Vec<f32>, f64)>,
}

impl DpmHistory {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Second-order multistep DPM-Solver++ update in log-SNR space.
///
/// Step 1 and the final step into the clean level are first order; the
/// final step has h = ∞, where the multistep ratio is undefined.
pub fn dpm_solverpp_2m_step(
    z: &Tensor,
    eps_hat: &Tensor,
    history: &mut DpmHistory,
    j: usize,
    grid: &StepGrid,
    table: &NoiseScheduleTable,
) -> Result<Tensor> {
    same_shape(z, eps_hat, "dpm_solverpp_2m_step")?;
    let (from, to) = grid.levels(j, table)?;
    let x0 = x0_prediction(z, eps_hat, from);

    let h = to.lambda() - from.lambda();
    let second_order = if j >= 2 {
        match &history.prev {
            Some((pj, prev, h_prev)) if *pj + 1 == j => Some((prev.clone(), *h_prev)),
            _ => return Err(Error::MissingHistory(j)),
        }
    } else {
        None
    };

    let x0_used: Vec<f32> = match second_order {
        Some((prev, h_prev)) if h.is_finite() => {
            let r = h_prev / h;
            let c_cur = (1.0 + 1.0 / (2.0 * r)) as f32;
            let c_prev = (1.0 / (2.0 * r)) as f32;
            x0.iter().zip(&prev).map(|(&x, &p)| c_cur * x - c_prev * p).collect()
        }
        _ => x0.clone(),
    };

    let out = if to.sigma == 0.0 {
        // exp(−h) − 1 = −1 and sigma_{t'} = 0: the clean-end limit is x0 itself.
        x0_used
    } else {
        let c_z = (to.sigma / from.sigma) as f32;
        let c_x = (-to.alpha * ((-h).exp() - 1.0)) as f32;
        z.data()
            .iter()
            .zip(&x0_used)
            .map(|(&zv, &xv)| c_z * zv + c_x * xv)
            .collect()
    };
    history.prev = Some((j, x0, h));
    finish(z.shape(), out, "dpm_solverpp_2m_step")
}

/// First-order Euler update of the sigma/alpha-rescaled probability-flow ODE.
pub fn euler_step(
    z: &Tensor,
    eps_hat: &Tensor,
    j: usize,
    grid: &StepGrid,
    table: &NoiseScheduleTable,
) -> Result<Tensor> {
    same_shape(z, eps_hat, "euler_step")?;
    let (from, to) = grid.levels(j, table)?;
    let inv_alpha = (1.0 / from.alpha) as f32;
    let d_sig = (to.sigma / to.alpha - from.sigma / from.alpha) as f32;
    let a_to = to.alpha as f32;
    let out = z
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&zv, &ev)| a_to * (zv * inv_alpha + d_sig * ev))
        .collect();
    finish(z.shape(), out, "euler_step")
}

/// A sampler bound to a grid, carrying whatever history it needs.
#[derive(Clone, Debug)]
pub struct Sampler {
    kind: SchedulerKind,
    table: NoiseScheduleTable,
    grid: StepGrid,
    history: DpmHistory,
}

impl Sampler {
    pub fn new(kind: SchedulerKind, steps: usize) -> Result<Self> {
        let table = NoiseScheduleTable::default();
        let grid = StepGrid::build(steps, &table)?;
        Ok(Self {
            kind,
            table,
            grid,
            history: DpmHistory::new(),
        })
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn grid(&self) -> &StepGrid {
        &self.grid
    }

    pub fn table(&self) -> &NoiseScheduleTable {
        &self.table
    }

    pub fn step(&mut self, z: &Tensor, eps_hat: &Tensor, j: usize) -> Result<Tensor> {
        match self.kind {
            SchedulerKind::Ddim => ddim_step(z, eps_hat, j, &self.grid, &self.table),
            SchedulerKind::Dpm2m => {
                dpm_solverpp_2m_step(z, eps_hat, &mut self.history, j, &self.grid, &self.table)
            }
            SchedulerKind::Euler => euler_step(z, eps_hat, j, &self.grid, &self.table),
        }
    }
}
