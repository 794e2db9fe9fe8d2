//! Synthetic inputs shared by the criterion benches.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use wattbench_core::procsample::Sample;
use wattbench_core::runner::{RunMetadata, RunRecord};
use wattbench_core::{ParamValue, TagEvent};

/// Log-uniform ratios in `[0.01, 100]`.
pub fn ratios(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| 10f64.powf(rng.gen_range(-2.0..2.0)))
        .collect()
}

/// A run with `n` samples 50 ms apart and a region covering the middle half.
pub fn run_with_samples(n: usize, seed: u64) -> RunRecord {
    let mut rng = StdRng::seed_from_u64(seed);
    let interval = 50_000_000u64;
    let base = 1_700_000_000_000_000_000u64;
    let samples = (1..=n as u64)
        .map(|i| Sample {
            t_ns: base + i * interval,
            cpu_pct: rng.gen_range(0.0..100.0),
            rss_bytes: rng.gen_range(1 << 20..1 << 30),
            vms_bytes: rng.gen_range(1 << 30..1 << 34),
            swap_bytes: 0,
            energy_delta_uj: Some(rng.gen_range(100_000..2_000_000)),
            energy_cum_j: 0.0,
        })
        .collect();
    let span = n as u64 * interval;
    RunRecord {
        scenario: "bench".into(),
        param_value: ParamValue::Int(1),
        build_id: "a".into(),
        rep_index: 0,
        samples,
        tags: vec![
            TagEvent {
                t_ns: base + span / 4,
                name: "start_r".into(),
            },
            TagEvent {
                t_ns: base + 3 * span / 4,
                name: "finish_r".into(),
            },
        ],
        exit_code: 0,
        started_at_ns: base,
        finished_at_ns: base + span,
        invalid_reason: None,
        metadata: RunMetadata {
            host: "bench".into(),
            n_cores: 12,
            energy_domains: vec!["intel-rapl:0".into()],
            energy_scope: String::new(),
            sample_interval_ms: 50,
            governor: None,
            command: vec![],
            sampler_steps: n,
            sampler_max_step_ns: 0,
            sampler_mean_step_ns: 0.0,
        },
    }
}
