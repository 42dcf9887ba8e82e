//! Temporal attention gating.
//!
//! Steps `1..=m` form the semantics-planning phase: both guidance branches
//! run, cross-attention is live, and (optionally) self-attention is
//! recomputed only once every `k` steps after a warm-up and reused in
//! between. At the gate step `m` every cross-attention output of both
//! branches is captured and their anchor (by default the branch average) is
//! stored in a FIFO cache. From step `m+1` on, each cross-attention sublayer
//! is replaced by its cached entry; since the text condition then no longer
//! reaches the network, both guidance branches are identical and a single
//! pass replaces them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{
    AttentionHook, AttentionKind, Denoiser, HookAction, LatentState, TextCondition,
};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceConfig};
use crate::numkern::{MacCounter, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorMode {
    #[default]
    Average,
    Conditional,
    Unconditional,
}

impl AnchorMode {
    pub fn name(&self) -> &'static str {
        match self {
            AnchorMode::Average => "average",
            AnchorMode::Conditional => "cond",
            AnchorMode::Unconditional => "uncond",
        }
    }
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(AnchorMode::Average),
            "cond" | "conditional" => Ok(AnchorMode::Conditional),
            "uncond" | "unconditional" => Ok(AnchorMode::Unconditional),
            other => Err(Error::InvalidArgument(format!("unknown anchor mode {other:?}"))),
        }
    }
}

/// Which phase the self-attention reuse window covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaPhase {
    /// Steps (warmup, m]. This is the gating method itself.
    #[default]
    Semantics,
    /// Steps (m, n]; only used by the self-attention ablation trajectory.
    Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    pub n: usize,
    /// Gate step.
    pub m: usize,
    /// Self-attention interval; 1 recomputes every step.
    pub k: usize,
    pub warmup: usize,
    pub sa_caching: bool,
    pub ca_caching: bool,
    pub anchor: AnchorMode,
    pub collapse_cfg: bool,
    pub sa_phase: SaPhase,
}

impl GateSchedule {
    /// Defaults for an n-step run: m = ⌈3n/5⌉, k = ⌈n/5⌉, warm-up 2.
    pub fn new(n: usize) -> Self {
        let m = (3 * n).div_ceil(5);
        Self {
            n,
            m,
            k: n.div_ceil(5).max(1),
            warmup: 2.min(m),
            sa_caching: true,
            ca_caching: true,
            anchor: AnchorMode::Average,
            collapse_cfg: true,
            sa_phase: SaPhase::Semantics,
        }
    }

    /// A schedule under which the controller changes nothing.
    pub fn disabled(n: usize) -> Self {
        Self {
            m: n,
            k: 1,
            sa_caching: false,
            ca_caching: false,
            ..Self::new(n)
        }
    }

    pub fn with_gate(mut self, m: usize, k: usize) -> Self {
        self.m = m;
        self.k = k;
        self.warmup = self.warmup.min(m);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if self.m > self.n {
            return Err(Error::InvalidArgument(format!(
                "gate step {} exceeds step count {}",
                self.m, self.n
            )));
        }
        if self.k == 0 || self.k > self.n {
            return Err(Error::InvalidArgument(format!(
                "interval k = {} outside 1..={}",
                self.k, self.n
            )));
        }
        if self.warmup > self.m {
            return Err(Error::InvalidArgument(format!(
                "warm-up {} exceeds gate step {}",
                self.warmup, self.m
            )));
        }
        if self.ca_caching && self.m == 0 {
            return Err(Error::InvalidArgument(
                "cross-attention caching needs a gate step of at least 1".into(),
            ));
        }
        Ok(())
    }

    /// True when running under this schedule cannot change any output.
    pub fn is_noop(&self) -> bool {
        let ca_off = !self.ca_caching || self.m == self.n;
        let sa_off = !self.sa_caching || self.k == 1;
        ca_off && sa_off
    }

    /// The (start, end] window in which self-attention may be reused.
    pub fn sa_window(&self) -> (usize, usize) {
        match self.sa_phase {
            SaPhase::Semantics => (self.warmup, self.m),
            SaPhase::Fidelity => (self.m, self.n),
        }
    }

    /// Whether step j runs as a single collapsed pass.
    pub fn collapses(&self, j: usize) -> bool {
        self.ca_caching
            && self.collapse_cfg
            && j > self.m
            && decide(j, 0, AttentionKind::SelfAttn, self) == Action::Compute
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Compute,
    ComputeAndRecord,
    Reuse,
}

/// What sublayer `block` of `kind` does at step j. The rule is the same for
/// every block.
pub fn decide(j: usize, _block: usize, kind: AttentionKind, schedule: &GateSchedule) -> Action {
    match kind {
        AttentionKind::Cross => {
            if !schedule.ca_caching || j < schedule.m {
                Action::Compute
            } else if j == schedule.m {
                Action::ComputeAndRecord
            } else {
                Action::Reuse
            }
        }
        AttentionKind::SelfAttn => {
            let (start, end) = schedule.sa_window();
            if !schedule.sa_caching || j <= start || j > end {
                Action::Compute
            } else if (j - start - 1).is_multiple_of(schedule.k) {
                Action::ComputeAndRecord
            } else {
                Action::Reuse
            }
        }
    }
}

/// Number of self-attention recomputations inside the reuse window.
pub fn window_recomputations(schedule: &GateSchedule) -> usize {
    let (start, end) = schedule.sa_window();
    (end.saturating_sub(start)).div_ceil(schedule.k)
}

/// FIFO of per-sublayer outputs in traversal order.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    kind: AttentionKind,
    entries: Vec<Tensor>,
    read_cursor: usize,
}

impl FeatureCache {
    pub fn new(kind: AttentionKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            read_cursor: 0,
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor] {
        &self.entries
    }

    pub fn write_cursor(&self) -> usize {
        self.entries.len()
    }

    pub fn read_cursor(&self) -> usize {
        self.read_cursor
    }

    /// Drops all entries ahead of a fresh recording pass.
    pub fn begin_write(&mut self) {
        self.entries.clear();
        self.read_cursor = 0;
    }

    pub fn push(&mut self, t: Tensor) {
        self.entries.push(t);
    }

    pub fn begin_read(&mut self) {
        self.read_cursor = 0;
    }

    pub fn next_entry(&mut self) -> Result<Tensor> {
        let t = self.entries.get(self.read_cursor).cloned().ok_or_else(|| {
            Error::CacheNotPopulated(format!(
                "{:?} cache has {} entries, read {}",
                self.kind,
                self.entries.len(),
                self.read_cursor + 1
            ))
        })?;
        self.read_cursor += 1;
        Ok(t)
    }

    /// Combined checksum over all entries.
    pub fn checksum(&self) -> u64 {
        self.entries
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }

    /// Bytes held by the entries.
    pub fn bytes(&self) -> usize {
        self.entries.iter().map(|t| t.len() * 4).sum()
    }
}

/// Builds the cross-attention cache from the gate-step outputs of both
/// guidance branches.
pub fn build_cross_cache(
    maps_cond: &[Tensor],
    maps_uncond: &[Tensor],
    anchor: AnchorMode,
) -> Result<FeatureCache> {
    if maps_cond.len() != maps_uncond.len() {
        return Err(Error::shape(
            "build_cross_cache",
            format!("{} conditional vs {} unconditional maps", maps_cond.len(), maps_uncond.len()),
        ));
    }
    let mut cache = FeatureCache::new(AttentionKind::Cross);
    for (c, u) in maps_cond.iter().zip(maps_uncond) {
        if c.shape() != u.shape() {
            return Err(Error::shape(
                "build_cross_cache",
                format!("{:?} vs {:?}", c.shape(), u.shape()),
            ));
        }
        let entry = match anchor {
            AnchorMode::Average => Tensor::new(
                c.shape().to_vec(),
                u.data().iter().zip(c.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
            )?,
            AnchorMode::Conditional => c.clone(),
            AnchorMode::Unconditional => u.clone(),
        };
        cache.push(entry);
    }
    Ok(cache)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

impl Branch {
    pub fn index(self) -> usize {
        match self {
            Branch::Conditional => 0,
            Branch::Unconditional => 1,
        }
    }
}

/// Everything observable about one denoiser pass.
#[derive(Clone, Debug, Default)]
pub struct PassRecord {
    /// Checksum of the cross-attention output fed to each block.
    pub cross_checksums: Vec<u64>,
    /// Pre-projection cross-attention maps, for blocks that computed them.
    pub cross_maps: Vec<Option<Tensor>>,
    pub sa_computed: usize,
    pub ca_computed: usize,
}

/// Neutral hook that records cross-attention observations.
#[derive(Debug, Default)]
pub struct Recorder {
    pub keep_maps: bool,
    pub record: PassRecord,
}

impl Recorder {
    pub fn new(keep_maps: bool) -> Self {
        Self {
            keep_maps,
            record: PassRecord::default(),
        }
    }
}

impl AttentionHook for Recorder {
    fn after(
        &mut self,
        _block: usize,
        kind: AttentionKind,
        output: &Tensor,
        map: &Tensor,
    ) -> Result<HookAction> {
        match kind {
            AttentionKind::Cross => {
                self.record.ca_computed += 1;
                self.record.cross_checksums.push(output.checksum());
                self.record
                    .cross_maps
                    .push(self.keep_maps.then(|| map.clone()));
            }
            AttentionKind::SelfAttn => self.record.sa_computed += 1,
        }
        Ok(HookAction::UseComputed)
    }
}

struct GateHook<'a> {
    j: usize,
    schedule: &'a GateSchedule,
    cross: Option<&'a mut FeatureCache>,
    self_cache: &'a mut FeatureCache,
    captured_cross: Vec<Tensor>,
    recorder: Recorder,
}

impl AttentionHook for GateHook<'_> {
    fn before(&mut self, block: usize, kind: AttentionKind) -> Result<Option<Tensor>> {
        if decide(self.j, block, kind, self.schedule) != Action::Reuse {
            return Ok(None);
        }
        let t = match kind {
            AttentionKind::Cross => {
                let cache = self.cross.as_deref_mut().ok_or_else(|| {
                    Error::CacheNotPopulated(format!(
                        "cross-attention reuse at step {} before the gate step recorded",
                        self.j
                    ))
                })?;
                let t = cache.next_entry()?;
                self.recorder.record.cross_checksums.push(t.checksum());
                self.recorder.record.cross_maps.push(None);
                t
            }
            AttentionKind::SelfAttn => self.self_cache.next_entry()?,
        };
        Ok(Some(t))
    }

    fn after(
        &mut self,
        block: usize,
        kind: AttentionKind,
        output: &Tensor,
        map: &Tensor,
    ) -> Result<HookAction> {
        if decide(self.j, block, kind, self.schedule) == Action::ComputeAndRecord {
            match kind {
                AttentionKind::Cross => self.captured_cross.push(output.clone()),
                AttentionKind::SelfAttn => self.self_cache.push(output.clone()),
            }
        }
        self.recorder.after(block, kind, output, map)
    }
}

/// Result of one gated step.
#[derive(Clone, Debug)]
pub struct GatedStep {
    pub eps: Tensor,
    /// Denoiser passes executed (1 or 2).
    pub passes: usize,
    /// Per-branch records; a collapsed step has a single record.
    pub records: Vec<PassRecord>,
}

/// Per-trajectory gating state.
#[derive(Clone, Debug)]
pub struct TgateController {
    schedule: GateSchedule,
    cross: Option<FeatureCache>,
    self_caches: [FeatureCache; 2],
    keep_maps: bool,
}

impl TgateController {
    pub fn new(schedule: GateSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            cross: None,
            self_caches: [
                FeatureCache::new(AttentionKind::SelfAttn),
                FeatureCache::new(AttentionKind::SelfAttn),
            ],
            keep_maps: false,
        })
    }

    /// Keep pre-projection cross-attention maps in step records.
    pub fn keep_maps(mut self, keep: bool) -> Self {
        self.keep_maps = keep;
        self
    }

    pub fn schedule(&self) -> &GateSchedule {
        &self.schedule
    }

    pub fn cross_cache(&self) -> Option<&FeatureCache> {
        self.cross.as_ref()
    }

    pub fn self_cache(&self, branch: Branch) -> &FeatureCache {
        &self.self_caches[branch.index()]
    }

    /// Bytes currently held by all caches.
    pub fn cache_bytes(&self) -> usize {
        self.cross.as_ref().map_or(0, FeatureCache::bytes)
            + self.self_caches.iter().map(FeatureCache::bytes).sum::<usize>()
    }

    fn pass(
        &mut self,
        branch: Branch,
        state: &LatentState,
        cond: &TextCondition,
        denoiser: &Denoiser,
        counter: Option<&mut MacCounter>,
    ) -> Result<(Tensor, Vec<Tensor>, PassRecord)> {
        let j = state.step;
        if let Some(c) = self.cross.as_mut() {
            c.begin_read();
        }
        let self_cache = &mut self.self_caches[branch.index()];
        if decide(j, 0, AttentionKind::SelfAttn, &self.schedule) == Action::ComputeAndRecord {
            self_cache.begin_write();
        } else {
            self_cache.begin_read();
        }
        let mut hook = GateHook {
            j,
            schedule: &self.schedule,
            cross: self.cross.as_mut(),
            self_cache,
            captured_cross: Vec::new(),
            recorder: Recorder::new(self.keep_maps),
        };
        let eps = denoiser.predict_noise(state, cond, Some(&mut hook), counter)?;
        Ok((eps, hook.captured_cross, hook.recorder.record))
    }

    /// Runs both guidance branches at the current step without collapsing
    /// and without touching the caches' contents. Returns (ε_c, ε_∅).
    pub fn branch_predictions(
        &mut self,
        state: &LatentState,
        cond: &TextCondition,
        uncond: &TextCondition,
        denoiser: &Denoiser,
    ) -> Result<(Tensor, Tensor)> {
        if decide(state.step, 0, AttentionKind::Cross, &self.schedule) == Action::ComputeAndRecord
            || decide(state.step, 0, AttentionKind::SelfAttn, &self.schedule)
                == Action::ComputeAndRecord
        {
            return Err(Error::InvalidArgument(format!(
                "step {} records into the caches; probe a different step",
                state.step
            )));
        }
        let (c, _, _) = self.pass(Branch::Conditional, state, cond, denoiser, None)?;
        let (u, _, _) = self.pass(Branch::Unconditional, state, uncond, denoiser, None)?;
        Ok((c, u))
    }

    /// Guided noise prediction for `state.step` under the schedule.
    pub fn step(
        &mut self,
        state: &LatentState,
        cond: &TextCondition,
        uncond: &TextCondition,
        denoiser: &Denoiser,
        guidance: &GuidanceConfig,
        mut counter: Option<&mut MacCounter>,
    ) -> Result<GatedStep> {
        let j = state.step;
        if j == 0 || j > self.schedule.n {
            return Err(Error::InvalidArgument(format!(
                "step {j} outside 1..={}",
                self.schedule.n
            )));
        }
        if j > self.schedule.m && self.schedule.ca_caching && self.cross.is_none() {
            return Err(Error::CacheNotPopulated(format!(
                "cross-attention cache empty at step {j}"
            )));
        }

        if self.schedule.collapses(j) {
            let (eps, _, record) = self.pass(Branch::Conditional, state, cond, denoiser, counter)?;
            return Ok(GatedStep {
                eps,
                passes: 1,
                records: vec![record],
            });
        }

        let (eps_c, cap_c, rec_c) =
            self.pass(Branch::Conditional, state, cond, denoiser, counter.as_deref_mut())?;
        let (eps, cap_u, records) = if guidance.enabled {
            let (eps_u, cap_u, rec_u) =
                self.pass(Branch::Unconditional, state, uncond, denoiser, counter)?;
            (
                guidance::combine(&eps_u, &eps_c, guidance.scale)?,
                cap_u,
                vec![rec_c, rec_u],
            )
        } else {
            (eps_c, cap_c.clone(), vec![rec_c])
        };

        if decide(j, 0, AttentionKind::Cross, &self.schedule) == Action::ComputeAndRecord {
            self.cross = Some(build_cross_cache(&cap_c, &cap_u, self.schedule.anchor)?);
        }
        Ok(GatedStep {
            passes: records.len(),
            eps,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(n: usize, m: usize, k: usize, warmup: usize) -> GateSchedule {
        GateSchedule { m, k, warmup, ..GateSchedule::new(n) }
    }

    #[test]
    fn defaults_follow_step_count() {
        let s = GateSchedule::new(25);
        assert_eq!((s.m, s.k, s.warmup), (15, 5, 2));
        assert!(s.sa_caching && s.ca_caching && s.collapse_cfg);
        assert_eq!(s.anchor, AnchorMode::Average);
        let s = GateSchedule::new(10);
        assert_eq!((s.m, s.k), (6, 2));
        assert!(GateSchedule::disabled(25).is_noop());
        assert!(!GateSchedule::new(25).is_noop());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(sched(25, 26, 5, 2).validate().is_err());
        assert!(sched(25, 15, 0, 2).validate().is_err());
        assert!(sched(25, 15, 26, 2).validate().is_err());
        assert!(sched(25, 1, 1, 2).validate().is_err());
        assert!(sched(25, 0, 1, 0).validate().is_err());
        let s = GateSchedule { ca_caching: false, ..sched(25, 0, 1, 0) };
        assert!(s.validate().is_ok());
    }

    #[test]
    fn cross_rule() {
        let s = sched(25, 15, 5, 2);
        for j in 1..15 {
            assert_eq!(decide(j, 0, AttentionKind::Cross, &s), Action::Compute);
        }
        assert_eq!(decide(15, 3, AttentionKind::Cross, &s), Action::ComputeAndRecord);
        for j in 16..=25 {
            assert_eq!(decide(j, 1, AttentionKind::Cross, &s), Action::Reuse);
        }
        let off = GateSchedule { ca_caching: false, ..s };
        assert!((1..=25).all(|j| decide(j, 0, AttentionKind::Cross, &off) == Action::Compute));
    }

    #[test]
    fn self_rule_n25_m15_k5() {
        let s = sched(25, 15, 5, 2);
        let recompute: Vec<usize> = (1..=25)
            .filter(|&j| decide(j, 0, AttentionKind::SelfAttn, &s) == Action::ComputeAndRecord)
            .collect();
        assert_eq!(recompute, vec![3, 8, 13]);
        for j in 3..=15 {
            if ![3, 8, 13].contains(&j) {
                assert_eq!(decide(j, 0, AttentionKind::SelfAttn, &s), Action::Reuse, "j={j}");
            }
        }
        for j in [1, 2, 16, 20, 25] {
            assert_eq!(decide(j, 0, AttentionKind::SelfAttn, &s), Action::Compute);
        }
    }

    #[test]
    fn k1_records_every_window_step() {
        let s = sched(25, 15, 1, 2);
        for j in 3..=15 {
            assert_eq!(decide(j, 0, AttentionKind::SelfAttn, &s), Action::ComputeAndRecord);
        }
    }

    #[test]
    fn fidelity_window() {
        let s = GateSchedule { sa_phase: SaPhase::Fidelity, ca_caching: false, ..sched(25, 10, 5, 2) };
        let rec: Vec<usize> = (1..=25)
            .filter(|&j| decide(j, 0, AttentionKind::SelfAttn, &s) == Action::ComputeAndRecord)
            .collect();
        assert_eq!(rec, vec![11, 16, 21]);
        assert_eq!(window_recomputations(&s), 3);
    }

    #[test]
    fn anchor_modes() {
        let m = Tensor::from_fn(&[2, 3], |i| i as f32 + 0.5);
        let z = Tensor::zeros(&[2, 3]);
        let avg = build_cross_cache(std::slice::from_ref(&m), std::slice::from_ref(&z), AnchorMode::Average).unwrap();
        for (a, b) in avg.entries()[0].data().iter().zip(m.data()) {
            assert_eq!(*a, b / 2.0);
        }
        let c = build_cross_cache(std::slice::from_ref(&m), std::slice::from_ref(&z), AnchorMode::Conditional).unwrap();
        assert!(c.entries()[0].bit_eq(&m));
        let u = build_cross_cache(std::slice::from_ref(&m), std::slice::from_ref(&z), AnchorMode::Unconditional).unwrap();
        assert!(u.entries()[0].bit_eq(&z));

        let four = vec![m.clone(); 4];
        let cache = build_cross_cache(&four, &four, AnchorMode::Average).unwrap();
        assert_eq!(cache.len(), 4);
        assert!(build_cross_cache(&four, &four[..3], AnchorMode::Average).is_err());
        assert!(build_cross_cache(&[m], &[Tensor::zeros(&[3, 2])], AnchorMode::Average).is_err());
    }

    #[test]
    fn fifo_order_and_cursors() {
        let mut c = FeatureCache::new(AttentionKind::Cross);
        for i in 0..3 {
            c.push(Tensor::full(&[1], i as f32));
        }
        c.begin_read();
        for i in 0..3 {
            assert_eq!(c.next_entry().unwrap().data()[0], i as f32);
        }
        assert_eq!(c.read_cursor(), c.write_cursor());
        assert!(matches!(c.next_entry(), Err(Error::CacheNotPopulated(_))));
        c.begin_write();
        assert!(c.is_empty());
    }

    #[test]
    fn anchor_parse() {
        for a in [AnchorMode::Average, AnchorMode::Conditional, AnchorMode::Unconditional] {
            assert_eq!(a.name().parse::<AnchorMode>().unwrap(), a);
        }
        assert!("mean".parse::<AnchorMode>().is_err());
    }
}
