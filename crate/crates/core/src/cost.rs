//! Time and memory model: transfer costs, per-token step time, KV-cache
//! sizing, startup feasibility and aggregate metrics.
//!
//! Startup feasibility checks two budgets:
//!
//! * device: `fixed_overhead + mandatory + slots * per_slot_limit + kv(ctx)`
//! * host: `pinned_expert_bytes * host_transient_factor
//!   + (total_bytes - pinned_expert_bytes) + kv(ctx)`
//!
//! The host term carries a staging copy of the KV cache alongside the
//! duplicated buffers of host-pinned experts during a non-mapped load. Pinning
//! more expert layers relieves the device but raises the host requirement, so a
//! configuration can fail at startup while using less device memory.

use serde::{Deserialize, Serialize};

use crate::residency::{ModelLayout, SubModuleKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParameters {
    pub h2d_bandwidth: f64,
    pub per_transfer_latency: f64,
    pub compute_per_token: f64,
    pub overlap_factor: f64,
}

impl CostParameters {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.h2d_bandwidth.is_finite() && self.h2d_bandwidth > 0.0) {
            return Err(format!(
                "h2d bandwidth must be positive, got {}",
                self.h2d_bandwidth
            ));
        }
        if !(self.per_transfer_latency.is_finite() && self.per_transfer_latency >= 0.0) {
            return Err(format!(
                "per-transfer latency must be non-negative, got {}",
                self.per_transfer_latency
            ));
        }
        if !(self.compute_per_token.is_finite() && self.compute_per_token > 0.0) {
            return Err(format!(
                "compute per token must be positive, got {}",
                self.compute_per_token
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_factor) {
            return Err(format!(
                "overlap factor must lie in [0, 1], got {}",
                self.overlap_factor
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub device_budget: u64,
    pub host_budget: u64,
    pub fixed_overhead: u64,
    pub kv_bytes_per_token: u64,
    pub host_transient_factor: f64,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.device_budget == 0 || self.host_budget == 0 {
            return Err("device and host budgets must be positive".into());
        }
        if !(self.host_transient_factor.is_finite() && self.host_transient_factor >= 1.0) {
            return Err(format!(
                "host transient factor must be >= 1, got {}",
                self.host_transient_factor
            ));
        }
        Ok(())
    }
}

pub fn kv_bytes(context_length: u64, mm: &MemoryModel) -> u64 {
    mm.kv_bytes_per_token * context_length
}

/// Latency plus bandwidth time for one transfer; nothing is issued for 0 bytes.
pub fn transfer_time(bytes: u64, cp: &CostParameters) -> f64 {
    if bytes == 0 {
        0.0
    } else {
        cp.per_transfer_latency + bytes as f64 / cp.h2d_bandwidth
    }
}

/// Compute plus whatever part of the transfer is not hidden under compute.
pub fn step_time(compute: f64, transfer: f64, cp: &CostParameters) -> f64 {
    compute + (transfer - cp.overlap_factor * compute).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetSide {
    Device,
    Host,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetViolation {
    pub side: BudgetSide,
    pub required: u64,
    pub budget: u64,
    pub deficit: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Feasibility {
    Feasible {
        device_required: u64,
        host_required: u64,
    },
    InitializationFailure {
        violations: Vec<BudgetViolation>,
    },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

/// Inputs of the startup check, detached from any trace or policy.
#[derive(Clone, Copy, Debug)]
pub struct StartupInputs<'a> {
    pub layout: &'a ModelLayout,
    pub slot_count: usize,
    pub per_slot_limit: u64,
    pub context_length: u64,
    pub host_pinned_layers: u32,
    pub memory: &'a MemoryModel,
}

/// Bytes of every expert living in the first `pinned` expert-bearing layers.
pub fn pinned_expert_bytes(layout: &ModelLayout, pinned: u32) -> u64 {
    let layers = layout.expert_layers();
    let pinned_layers = &layers[..(pinned as usize).min(layers.len())];
    layout
        .submodules()
        .iter()
        .filter(|sm| sm.kind == SubModuleKind::Expert && pinned_layers.contains(&sm.layer_index))
        .map(|sm| sm.size_bytes)
        .sum()
}

pub fn device_requirement(inp: &StartupInputs) -> u64 {
    inp.memory.fixed_overhead
        + inp.layout.mandatory_bytes()
        + inp.slot_count as u64 * inp.per_slot_limit
        + kv_bytes(inp.context_length, inp.memory)
}

pub fn host_requirement(inp: &StartupInputs) -> u64 {
    let pinned = pinned_expert_bytes(inp.layout, inp.host_pinned_layers);
    let transient = (pinned as f64 * inp.memory.host_transient_factor).ceil() as u64;
    transient + (inp.layout.total_bytes() - pinned) + kv_bytes(inp.context_length, inp.memory)
}

pub fn check_startup(inp: &StartupInputs) -> Feasibility {
    let device_required = device_requirement(inp);
    let host_required = host_requirement(inp);
    let mut violations = Vec::new();
    for (side, required, budget) in [
        (
            BudgetSide::Device,
            device_required,
            inp.memory.device_budget,
        ),
        (BudgetSide::Host, host_required, inp.memory.host_budget),
    ] {
        if required > budget {
            violations.push(BudgetViolation {
                side,
                required,
                budget,
                deficit: required - budget,
            });
        }
    }
    if violations.is_empty() {
        Feasibility::Feasible {
            device_required,
            host_required,
        }
    } else {
        Feasibility::InitializationFailure { violations }
    }
}

/// One simulated token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub decision: Option<crate::controller::RotationDecision>,
    pub prefetch_loads: u64,
    pub prefetch_bytes: u64,
    pub demand_misses: Vec<crate::residency::SubModuleId>,
    pub demand_bytes: u64,
    pub hit_count: u64,
    pub stall_seconds: f64,
    pub step_seconds: f64,
    pub resident_bytes_after: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens: u64,
    pub hits: u64,
    pub misses: u64,
    pub prefetch_loads: u64,
    pub bytes_transferred: u64,
    pub stall_time: f64,
    pub total_time: f64,
    pub throughput: f64,
    pub peak_resident_bytes: u64,
    pub completed: bool,
}

impl Metrics {
    pub fn accesses(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.accesses() == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses() as f64
        }
    }
}

/// Aggregates a timeline. An empty timeline is a completed run of zero tokens.
pub fn summarize(timeline: &[StepRecord]) -> Metrics {
    let mut m = Metrics {
        completed: true,
        ..Metrics::default()
    };
    for r in timeline {
        m.tokens += 1;
        m.hits += r.hit_count;
        m.misses += r.demand_misses.len() as u64;
        m.prefetch_loads += r.prefetch_loads;
        m.bytes_transferred += r.prefetch_bytes + r.demand_bytes;
        m.stall_time += r.stall_seconds;
        m.total_time += r.step_seconds;
        m.peak_resident_bytes = m.peak_resident_bytes.max(r.resident_bytes_after);
    }
    if m.tokens > 0 && m.total_time > 0.0 {
        m.throughput = m.tokens as f64 / m.total_time;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residency::{SubModule, SubModuleId};

    fn cp(overlap: f64) -> CostParameters {
        CostParameters {
            h2d_bandwidth: 10e9,
            per_transfer_latency: 1e-3,
            compute_per_token: 0.01,
            overlap_factor: overlap,
        }
    }

    fn mm(device: u64, host: u64) -> MemoryModel {
        MemoryModel {
            device_budget: device,
            host_budget: host,
            fixed_overhead: 100,
            kv_bytes_per_token: 10,
            host_transient_factor: 1.5,
        }
    }

    fn record(step: u64, secs: f64, misses: usize, hits: u64) -> StepRecord {
        StepRecord {
            step,
            decision: None,
            prefetch_loads: 0,
            prefetch_bytes: 0,
            demand_misses: (0..misses as u32).map(SubModuleId).collect(),
            demand_bytes: 0,
            hit_count: hits,
            stall_seconds: 0.0,
            step_seconds: secs,
            resident_bytes_after: 0,
        }
    }

    fn layout() -> ModelLayout {
        let mut sms = Vec::new();
        for layer in 0..4u32 {
            for e in 0..2u32 {
                sms.push(SubModule::expert(layer * 2 + e, 50, layer, e));
            }
        }
        sms.push(SubModule::shared(100, 200, 0));
        ModelLayout::new(sms, [SubModuleId(100)]).unwrap()
    }

    #[test]
    fn kv_bytes_examples() {
        let m = MemoryModel {
            kv_bytes_per_token: 100,
            ..mm(1, 1)
        };
        assert_eq!(kv_bytes(0, &m), 0);
        assert_eq!(kv_bytes(4096, &m), 409_600);
        assert_eq!(kv_bytes(8192, &m), 2 * kv_bytes(4096, &m));
    }

    #[test]
    fn transfer_time_examples() {
        let c = cp(0.0);
        assert_eq!(transfer_time(0, &c), 0.0);
        assert!((transfer_time(1_000_000_000, &c) - 0.101).abs() < 1e-12);
        let mut last = 0.0;
        for b in [0u64, 1, 10, 1 << 20, 1 << 30] {
            let t = transfer_time(b, &c);
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn step_time_examples() {
        assert!((step_time(0.010, 0.0, &cp(0.3)) - 0.010).abs() < 1e-15);
        assert!((step_time(0.010, 0.004, &cp(1.0)) - 0.010).abs() < 1e-15);
        assert!((step_time(0.010, 0.004, &cp(0.0)) - 0.014).abs() < 1e-15);
    }

    #[test]
    fn summarize_examples() {
        let timeline: Vec<_> = (0..2048).map(|i| record(i, 0.04749, 0, 1)).collect();
        let m = summarize(&timeline);
        assert!((m.total_time - 97.26).abs() < 0.01);
        assert!((m.throughput - 21.06).abs() / 21.06 < 5e-4);

        let empty = summarize(&[]);
        assert_eq!(empty.tokens, 0);
        assert_eq!(empty.throughput, 0.0);
        assert!(empty.completed);

        let timeline: Vec<_> = (0..10)
            .map(|i| record(i, 0.01, usize::from(i < 3), u64::from(i >= 3) + 1))
            .collect();
        let m = summarize(&timeline);
        assert_eq!(m.misses, 3);
        assert_eq!(m.hits, m.accesses() - 3);
    }

    #[test]
    fn feasibility_with_slack() {
        let l = layout();
        let base = mm(u64::MAX, u64::MAX);
        let inp = StartupInputs {
            layout: &l,
            slot_count: 3,
            per_slot_limit: 50,
            context_length: 64,
            host_pinned_layers: 2,
            memory: &base,
        };
        let (d, h) = (device_requirement(&inp), host_requirement(&inp));
        let doubled = mm(2 * d, 2 * h);
        let inp = StartupInputs {
            memory: &doubled,
            ..inp
        };
        assert!(check_startup(&inp).is_feasible());
    }

    #[test]
    fn zero_device_budget_reports_full_requirement() {
        let l = layout();
        let m = mm(0, u64::MAX);
        let inp = StartupInputs {
            layout: &l,
            slot_count: 2,
            per_slot_limit: 50,
            context_length: 10,
            host_pinned_layers: 0,
            memory: &m,
        };
        match check_startup(&inp) {
            Feasibility::InitializationFailure { violations } => {
                assert_eq!(violations.len(), 1);
                assert_eq!(violations[0].side, BudgetSide::Device);
                assert_eq!(violations[0].deficit, device_requirement(&inp));
                // 100 fixed + 200 mandatory + 2 * 50 slots + 10 * 10 kv
                assert_eq!(violations[0].deficit, 500);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn pinned_bytes_take_leading_expert_layers() {
        let l = layout();
        assert_eq!(pinned_expert_bytes(&l, 0), 0);
        assert_eq!(pinned_expert_bytes(&l, 1), 100);
        assert_eq!(pinned_expert_bytes(&l, 9), 400);
        let m = mm(1, 1);
        let inp = StartupInputs {
            layout: &l,
            slot_count: 1,
            per_slot_limit: 1,
            context_length: 0,
            host_pinned_layers: 2,
            memory: &m,
        };
        // 200 pinned * 1.5 + (600 - 200)
        assert_eq!(host_requirement(&inp), 700);
    }
}
