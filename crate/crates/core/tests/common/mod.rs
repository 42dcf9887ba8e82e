#![allow(dead_code)]

use tgate::pipeline::{Pipeline, PipelineConfig};

pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn toy(steps: usize) -> Pipeline {
    Pipeline::new(PipelineConfig {
        steps,
        ..PipelineConfig::default()
    })
    .unwrap()
}

pub const PROMPT: &str = "a red cube";
