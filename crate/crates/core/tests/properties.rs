mod common;

use common::{toy, PROMPT};
use proptest::prelude::*;
use tgate::cost::{analytic_step_macs, cache_memory_bytes, trajectory_macs, StepFlags};
use tgate::denoiser::{AttentionKind, DenoiserConfig, LatentState};
use tgate::guidance::GuidanceConfig;
use tgate::pipeline::{initial_latent, Pipeline, PipelineConfig, TrajectoryMode};
use tgate::scheduler::SchedulerKind;
use tgate::tgate::{window_recomputations, GateSchedule, TgateController};

fn configs() -> Vec<DenoiserConfig> {
    vec![
        DenoiserConfig::default(),
        DenoiserConfig {
            latent_side: 4,
            width: 32,
            heads: 2,
            blocks: 2,
            text_len: 4,
            text_dim: 16,
            ..DenoiserConfig::default()
        },
        DenoiserConfig {
            latent_side: 8,
            patch: 2,
            channels: 3,
            width: 48,
            heads: 3,
            blocks: 3,
            mlp_ratio: 2,
            text_len: 5,
            text_dim: 24,
            seed: 3,
        },
    ]
}

#[test]
fn cross_cache_is_immutable_after_gate() {
    let p = toy(25);
    let cfg = p.config().denoiser.clone();
    let schedule = GateSchedule::new(25);
    let mut ctl = TgateController::new(schedule.clone()).unwrap();
    let mut sampler = tgate::scheduler::Sampler::new(SchedulerKind::Dpm2m, 25).unwrap();
    let cond = p.condition(PROMPT);
    let uncond = p.condition("");
    let mut z = initial_latent(&cfg, 7);
    let mut frozen = None;
    for j in 1..=25 {
        let state = LatentState { z, step: j, timestep: sampler.grid().timestep(j) };
        let out = ctl
            .step(&state, &cond, &uncond, p.denoiser(), &GuidanceConfig::default(), None)
            .unwrap();
        let cache = ctl.cross_cache();
        if j < schedule.m {
            assert!(cache.is_none());
        } else {
            let c = cache.unwrap();
            assert_eq!(c.kind(), AttentionKind::Cross);
            assert_eq!(c.len(), cfg.blocks);
            let sum = c.checksum();
            assert_eq!(*frozen.get_or_insert(sum), sum, "step {j}");
        }
        z = sampler.step(&state.z, &out.eps, j).unwrap();
    }
}

#[test]
fn analytic_matches_instrumented_on_grid() {
    for cfg in configs() {
        let p = Pipeline::new(PipelineConfig {
            denoiser: cfg.clone(),
            steps: 10,
            ..PipelineConfig::default()
        })
        .unwrap();
        for s in [
            GateSchedule::disabled(10),
            GateSchedule::new(10),
            GateSchedule::new(10).with_gate(4, 3),
            GateSchedule { collapse_cfg: false, ..GateSchedule::new(10) },
        ] {
            let log = p.run(&TrajectoryMode::Tgate(s.clone()), PROMPT, 1).unwrap();
            let report = trajectory_macs(&s, &cfg, true).attach_instrumented(&log).unwrap();
            assert_eq!(report.instrumented_total(), Some(log.total_macs()));
        }
    }
}

#[test]
fn guidance_off_costs_one_branch() {
    let p = Pipeline::new(PipelineConfig {
        steps: 8,
        guidance: GuidanceConfig { enabled: false, ..GuidanceConfig::default() },
        ..PipelineConfig::default()
    })
    .unwrap();
    let s = GateSchedule::new(8);
    let log = p.run(&TrajectoryMode::Tgate(s.clone()), PROMPT, 1).unwrap();
    let cfg = DenoiserConfig::default();
    trajectory_macs(&s, &cfg, false).attach_instrumented(&log).unwrap();
    assert!(log.steps.iter().all(|st| st.passes == 1));
}

#[test]
fn mismatched_report_is_invariant_violation() {
    let p = toy(6);
    let log = p.run(&TrajectoryMode::Baseline, PROMPT, 1).unwrap();
    let wrong = trajectory_macs(&GateSchedule::new(6), &DenoiserConfig::default(), true);
    assert_eq!(wrong.attach_instrumented(&log).unwrap_err().exit_code(), 4);
}

#[test]
fn per_step_cost_is_constant_after_gate() {
    let cfg = DenoiserConfig::default();
    let s = GateSchedule::new(25);
    let r = trajectory_macs(&s, &cfg, true);
    let tail: Vec<u64> = r.steps[s.m..].iter().map(|c| c.analytic.total()).collect();
    assert!(tail.iter().all(|&t| t == 14_712_832));
    let gated = StepFlags { ca_active: false, ..StepFlags::FULL_SINGLE };
    assert_eq!(tail[0], analytic_step_macs(&cfg, gated));
}

#[test]
fn cache_bytes_match_controller_peak() {
    let p = toy(25);
    for s in [
        GateSchedule::new(25),
        GateSchedule { sa_caching: false, ..GateSchedule::new(25) },
        GateSchedule::disabled(25),
    ] {
        let log = p.run(&TrajectoryMode::Tgate(s.clone()), PROMPT, 7).unwrap();
        let formula = cache_memory_bytes(&s, &DenoiserConfig::default(), true);
        assert_eq!(log.peak_cache_bytes as u64, formula);
    }
}

#[test]
fn runs_are_deterministic() {
    let p = toy(12);
    let mode = TrajectoryMode::Tgate(GateSchedule::new(12));
    let a = p.run(&mode, PROMPT, 3).unwrap();
    let b = p.run(&mode, PROMPT, 3).unwrap();
    assert!(a.final_latent.bit_eq(&b.final_latent));
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert!(x.eps.bit_eq(&y.eps));
        assert_eq!(x.cross_checksums, y.cross_checksums);
    }
}

#[test]
fn every_scheduler_runs_gated() {
    for kind in SchedulerKind::ALL {
        let p = Pipeline::new(PipelineConfig {
            scheduler: kind,
            steps: 10,
            ..PipelineConfig::default()
        })
        .unwrap();
        let log = p.run(&TrajectoryMode::Tgate(GateSchedule::new(10)), PROMPT, 5).unwrap();
        log.final_latent.check_finite("final").unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_macs_monotone(n in 2usize..40, m_frac in 0.0f64..1.0, k in 1usize..8, warmup in 0usize..4) {
        let cfg = DenoiserConfig::default();
        let m = ((n as f64 * m_frac) as usize).max(1);
        let s = GateSchedule { m, k: k.min(n), warmup: warmup.min(m), ..GateSchedule::new(n) };
        prop_assume!(s.validate().is_ok());
        let total = |s: &GateSchedule| trajectory_macs(s, &cfg, true).analytic_total();
        if s.k < n {
            let more = GateSchedule { k: s.k + 1, ..s.clone() };
            prop_assert!(total(&more) <= total(&s));
        }
        if m < n {
            let later = GateSchedule { m: m + 1, ..s.clone() };
            prop_assert!(total(&later) >= total(&s));
        }
    }

    #[test]
    fn recomputation_count(m in 1usize..30, warmup in 0usize..5, k in 1usize..8) {
        prop_assume!(warmup <= m);
        let s = GateSchedule { m, k, warmup, ..GateSchedule::new(30) };
        prop_assume!(s.validate().is_ok());
        prop_assert_eq!(window_recomputations(&s), (m - warmup).div_ceil(k));
    }
}
