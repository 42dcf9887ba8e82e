//! Measurements over completed trajectories: consecutive-step
//! cross-attention differences, predicted-noise means, and adjacent-element
//! L2 distances of a sequence.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numkern::Tensor;
use crate::pipeline::{csv_err, TrajectoryLog};

/// Cross-attention maps indexed by (step, block, branch).
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedMaps {
    steps: usize,
    blocks: usize,
    branches: usize,
    maps: Vec<Option<Tensor>>,
}

impl RecordedMaps {
    pub fn new(steps: usize, blocks: usize, branches: usize) -> Self {
        Self {
            steps,
            blocks,
            branches,
            maps: vec![None; steps * blocks * branches],
        }
    }

    fn index(&self, step: usize, block: usize, branch: usize) -> usize {
        assert!(step >= 1 && step <= self.steps && block < self.blocks && branch < self.branches);
        ((step - 1) * self.blocks + block) * self.branches + branch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    /// `step` is 1-based.
    pub fn set(&mut self, step: usize, block: usize, branch: usize, map: Tensor) {
        let i = self.index(step, block, branch);
        self.maps[i] = Some(map);
    }

    pub fn get(&self, step: usize, block: usize, branch: usize) -> Option<&Tensor> {
        self.maps[self.index(step, block, branch)].as_ref()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GroupBy {
    #[default]
    All,
    PerBlock,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BranchFilter {
    #[default]
    Both,
    Conditional,
    Unconditional,
}

impl std::str::FromStr for BranchFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(BranchFilter::Both),
            "cond" => Ok(BranchFilter::Conditional),
            "uncond" => Ok(BranchFilter::Unconditional),
            other => Err(Error::InvalidArgument(format!("unknown branch filter {other:?}"))),
        }
    }
}

/// Difference statistics for the step pair (step, step + 1).
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub block: Option<usize>,
    pub mean: f64,
    pub variance: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Mean and population variance of ‖C^{j+1} − C^j‖₂ over runs, blocks and
/// the selected branches, for every consecutive step pair.
pub fn convergence_curve(
    runs: &[&RecordedMaps],
    group_by: GroupBy,
    branches: BranchFilter,
) -> Result<Vec<CurvePoint>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("convergence curve needs at least one run".into()))?;
    let (steps, blocks) = (first.steps, first.blocks);
    if steps < 2 {
        return Err(Error::InvalidArgument("convergence curve needs at least two steps".into()));
    }
    for r in runs {
        if r.steps != steps || r.blocks != blocks {
            return Err(Error::InvalidArgument(format!(
                "runs disagree on shape: {}x{} vs {}x{}",
                r.steps, r.blocks, steps, blocks
            )));
        }
    }
    let branch_ids = |r: &RecordedMaps| -> Result<Vec<usize>> {
        let ids = match branches {
            BranchFilter::Both => (0..r.branches).collect(),
            BranchFilter::Conditional => vec![0],
            BranchFilter::Unconditional => vec![1],
        };
        if ids.iter().any(|&b| b >= r.branches) {
            return Err(Error::InvalidArgument("run lacks the requested branch".into()));
        }
        Ok(ids)
    };
    let groups: Vec<Option<usize>> = match group_by {
        GroupBy::All => vec![None],
        GroupBy::PerBlock => (0..blocks).map(Some).collect(),
    };

    let mut out = Vec::new();
    for group in groups {
        for step in 1..steps {
            let mut dists = Vec::new();
            for r in runs {
                for block in 0..blocks {
                    if group.is_some_and(|g| g != block) {
                        continue;
                    }
                    for b in branch_ids(r)? {
                        let missing = || {
                            Error::InvalidArgument(format!(
                                "missing cross-attention map at step pair {step}, block {block}, branch {b}"
                            ))
                        };
                        let cur = r.get(step, block, b).ok_or_else(missing)?;
                        let next = r.get(step + 1, block, b).ok_or_else(missing)?;
                        dists.push(next.l2_distance(cur)?);
                    }
                }
            }
            let (mean, variance) = mean_var(&dists);
            out.push(CurvePoint {
                step,
                block: group,
                mean,
                variance,
            });
        }
    }
    Ok(out)
}

/// Convenience wrapper over logs that recorded their maps.
pub fn convergence_from_logs(
    logs: &[TrajectoryLog],
    group_by: GroupBy,
    branches: BranchFilter,
) -> Result<Vec<CurvePoint>> {
    let maps = logs
        .iter()
        .map(|l| {
            l.maps.as_ref().ok_or_else(|| {
                Error::InvalidArgument("trajectory was run without map recording".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    convergence_curve(&maps, group_by, branches)
}

/// Mean of the guided noise prediction at every step.
pub fn noise_mean_curve(log: &TrajectoryLog) -> Vec<f64> {
    log.steps.iter().map(|s| s.eps.mean()).collect()
}

/// ‖frames[i+1] − frames[i]‖₂ for consecutive frames.
pub fn sequence_l2(frames: &[Tensor]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("sequence_l2 needs at least two frames".into()));
    }
    frames.windows(2).map(|w| w[1].l2_distance(&w[0])).collect()
}

/// CSV: step_pair, mean, variance[, block].
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let per_block = points.iter().any(|p| p.block.is_some());
    let mut header = vec!["step_pair", "mean", "variance"];
    if per_block {
        header.push("block");
    }
    out.write_record(&header).map_err(csv_err)?;
    for p in points {
        let mut rec = vec![p.step.to_string(), p.mean.to_string(), p.variance.to_string()];
        if per_block {
            rec.push(p.block.map(|b| b.to_string()).unwrap_or_default());
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
