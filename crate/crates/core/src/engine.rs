//! Trace-driven simulation: feasibility gate, then per event prefetch, demand
//! access and cost accounting, producing a [`RunReport`].
//!
//! Sub-modules that are mandatory-resident, or experts of host-pinned layers,
//! are always hits and never occupy slots. Pinned experts are executed from
//! host memory, so they transfer nothing.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{
    check_startup, kv_bytes, step_time, summarize, transfer_time, BudgetViolation, Feasibility,
    Metrics, StepRecord,
};
use crate::policy::{build_policy, PolicyError, PolicyKind};
use crate::residency::{ResidencyError, ResidencyState, SlotGroup, SubModuleId, SubModuleKind};
use crate::scenario::ScenarioConfig;
use crate::workload::Trace;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("residency: {0}")]
    Residency(#[from] ResidencyError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    InitializationFailure { violations: Vec<BudgetViolation> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario_digest: String,
    pub trace_digest: String,
    pub policy: PolicyKind,
    pub outcome: Outcome,
    pub metrics: Metrics,
    pub timeline: Vec<StepRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn scenario_digest(cfg: &ScenarioConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("scenario serializes"))
}

pub fn trace_digest(trace: &Trace) -> String {
    sha256_hex(&trace.to_jsonl())
}

/// Ids served without a slot: mandatory shared modules plus pinned experts.
fn always_resident(cfg: &ScenarioConfig) -> BTreeSet<SubModuleId> {
    let layers = cfg.layout.expert_layers();
    let pinned = &layers[..(cfg.host_pinned_layers as usize).min(layers.len())];
    let mut set = cfg.layout.mandatory_resident().clone();
    set.extend(
        cfg.layout
            .submodules()
            .iter()
            .filter(|sm| sm.kind == SubModuleKind::Expert && pinned.contains(&sm.layer_index))
            .map(|sm| sm.id),
    );
    set
}

fn check_inputs(cfg: &ScenarioConfig, trace: &Trace) -> Result<(), SimError> {
    cfg.validate().map_err(SimError::InvalidScenario)?;
    if let Err(violations) = trace.validate() {
        let msgs: Vec<_> = violations.iter().map(|v| v.to_string()).collect();
        return Err(SimError::InvalidScenario(format!(
            "trace is invalid: {}",
            msgs.join("; ")
        )));
    }
    for id in trace.distinct_ids() {
        let sm = cfg.layout.get(id).ok_or_else(|| {
            SimError::InvalidScenario(format!("trace id {id} is not in the layout"))
        })?;
        if !cfg.layout.is_mandatory(id) && sm.size_bytes > cfg.per_slot_limit {
            return Err(SimError::InvalidScenario(format!(
                "sub-module {id} is {} bytes, over the per-slot limit of {}",
                sm.size_bytes, cfg.per_slot_limit
            )));
        }
    }
    Ok(())
}

/// Runs `trace` under `cfg`. Budget infeasibility is an outcome, not an error.
pub fn run(cfg: &ScenarioConfig, trace: &Trace) -> Result<RunReport, SimError> {
    check_inputs(cfg, trace)?;
    let scenario_digest = scenario_digest(cfg);
    let trace_digest = trace_digest(trace);

    if let Feasibility::InitializationFailure { violations } = check_startup(&cfg.startup_inputs())
    {
        return Ok(RunReport {
            scenario_digest,
            trace_digest,
            policy: cfg.policy,
            outcome: Outcome::InitializationFailure { violations },
            metrics: Metrics::default(),
            timeline: Vec::new(),
        });
    }

    let mm = &cfg.memory;
    let cp = &cfg.cost;
    let outside = mm.fixed_overhead + kv_bytes(cfg.context_length, mm);
    let group = SlotGroup::new(cfg.slot_count, cfg.per_slot_limit)?;
    let mut state = ResidencyState::for_layout(&cfg.layout, group, mm.device_budget - outside)?;
    let mut policy = build_policy(cfg.policy, cfg.slot_count, trace)?;
    let free = always_resident(cfg);

    let mut timeline = Vec::with_capacity(trace.len());
    for event in &trace.events {
        let mut required = event.required.clone();
        required.sort_unstable();
        let managed: Vec<SubModuleId> = required
            .iter()
            .copied()
            .filter(|id| !free.contains(id))
            .collect();
        if managed.len() > cfg.slot_count {
            return Err(PolicyError::InfeasibleTrace {
                step: event.step,
                required: managed.len(),
                capacity: cfg.slot_count,
            }
            .into());
        }

        let plan = policy.plan_prefetch(event, &managed, &state)?;
        if let Some(crate::controller::RotationDecision::Forward(k)) = plan.rotation {
            let swept = state.rotate_forward(k);
            policy.refill_candidates(swept);
        }
        let mut prefetch_bytes = 0;
        let mut prefetch_time = 0.0;
        for &(slot, id) in &plan.prefetch_loads {
            let sm = cfg
                .layout
                .get(id)
                .ok_or_else(|| SimError::InvalidScenario(format!("prefetch of unknown id {id}")))?;
            state.assign(slot, sm)?;
            policy.on_load(slot);
            prefetch_bytes += sm.size_bytes;
            prefetch_time += transfer_time(sm.size_bytes, cp);
        }

        let mut hits = 0;
        let mut misses = Vec::new();
        let mut demand_bytes = 0;
        let mut demand_time = 0.0;
        for &id in &required {
            policy.on_request(id);
            if free.contains(&id) {
                hits += 1;
                continue;
            }
            if let Some(slot) = state.lookup(id) {
                hits += 1;
                policy.on_access(slot);
                continue;
            }
            let sm = cfg.layout.get(id).expect("validated against layout");
            let slot = policy.choose_victim(&mut state, sm);
            state.assign(slot, sm)?;
            policy.on_load(slot);
            misses.push(id);
            demand_bytes += sm.size_bytes;
            demand_time += transfer_time(sm.size_bytes, cp);
        }
        policy.end_step(&managed);
        debug_assert!(state.check_invariants().is_ok());

        let step_seconds = step_time(cp.compute_per_token, prefetch_time, cp) + demand_time;
        timeline.push(StepRecord {
            step: event.step,
            decision: plan.rotation,
            prefetch_loads: plan.prefetch_loads.len() as u64,
            prefetch_bytes,
            demand_misses: misses,
            demand_bytes,
            hit_count: hits,
            stall_seconds: step_seconds - cp.compute_per_token,
            step_seconds,
            resident_bytes_after: state.resident_bytes() + outside,
        });
    }

    Ok(RunReport {
        scenario_digest,
        trace_digest,
        policy: cfg.policy,
        outcome: Outcome::Completed,
        metrics: summarize(&timeline),
        timeline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub misses: u64,
    pub prefetch_loads: u64,
    pub bytes_transferred: u64,
    pub stall_time: f64,
    pub throughput: f64,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub trace_digest: String,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunReport>,
}

/// Runs every policy on the same trace, in parallel, reporting in input order.
pub fn compare(
    cfg_base: &ScenarioConfig,
    policies: &[PolicyKind],
    trace: &Trace,
) -> Result<ComparisonReport, SimError> {
    let runs = policies
        .par_iter()
        .map(|p| run(&cfg_base.with_policy(*p), trace))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = runs
        .iter()
        .map(|r| ComparisonRow {
            policy: r.policy.name().to_string(),
            misses: r.metrics.misses,
            prefetch_loads: r.metrics.prefetch_loads,
            bytes_transferred: r.metrics.bytes_transferred,
            stall_time: r.metrics.stall_time,
            throughput: r.metrics.throughput,
            completed: r.metrics.completed,
        })
        .collect();
    Ok(ComparisonReport {
        trace_digest: trace_digest(trace),
        rows,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BatchStatus {
    Completed,
    InitializationFailure,
    Abnormal { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchItem {
    pub index: usize,
    pub trace_digest: String,
    pub status: BatchStatus,
    pub tokens: u64,
    pub misses: u64,
    pub throughput: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchReport {
    pub total: usize,
    pub completed: usize,
    pub initialization_failures: usize,
    pub abnormal_terminations: usize,
    pub completion_rate: f64,
    pub zero_abnormal: bool,
    pub items: Vec<BatchItem>,
}

fn batch_one(index: usize, cfg: &ScenarioConfig, trace: &Trace) -> BatchItem {
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| run(cfg, trace)));
    let (status, metrics) = match outcome {
        Ok(Ok(report)) => match report.outcome {
            Outcome::Completed => (BatchStatus::Completed, report.metrics),
            Outcome::InitializationFailure { .. } => {
                (BatchStatus::InitializationFailure, report.metrics)
            }
        },
        Ok(Err(e)) => (
            BatchStatus::Abnormal {
                message: e.to_string(),
            },
            Metrics::default(),
        ),
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (
                BatchStatus::Abnormal {
                    message: format!("panic: {message}"),
                },
                Metrics::default(),
            )
        }
    };
    BatchItem {
        index,
        trace_digest: trace_digest(trace),
        status,
        tokens: metrics.tokens,
        misses: metrics.misses,
        throughput: metrics.throughput,
    }
}

/// Runs each (scenario, trace) pair, counting failures instead of raising them.
pub fn batch_items(items: &[(ScenarioConfig, Trace)]) -> BatchReport {
    let items: Vec<BatchItem> = items
        .par_iter()
        .enumerate()
        .map(|(i, (cfg, trace))| batch_one(i, cfg, trace))
        .collect();
    let total = items.len();
    let count = |f: fn(&BatchStatus) -> bool| items.iter().filter(|i| f(&i.status)).count();
    let completed = count(|s| matches!(s, BatchStatus::Completed));
    let initialization_failures = count(|s| matches!(s, BatchStatus::InitializationFailure));
    let abnormal_terminations = count(|s| matches!(s, BatchStatus::Abnormal { .. }));
    BatchReport {
        total,
        completed,
        initialization_failures,
        abnormal_terminations,
        completion_rate: if total == 0 {
            0.0
        } else {
            completed as f64 / total as f64
        },
        zero_abnormal: abnormal_terminations == 0,
        items,
    }
}

pub fn batch(cfg: &ScenarioConfig, traces: &[Trace]) -> BatchReport {
    let items: Vec<_> = traces.iter().map(|t| (cfg.clone(), t.clone())).collect();
    batch_items(&items)
}
