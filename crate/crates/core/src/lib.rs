//! Slot-group residency for mixture-of-experts weights.
//!
//! A fixed ring of `N` accelerator slots holds the currently resident experts.
//! The rotary controller watches routing, rotates the ring's head and restores
//! snapshotted slot assignments when a previously seen context recurs. The
//! crate also ships the usual eviction baselines (LRU, FIFO, random, Belady),
//! a transfer/memory cost model, trace generators, a GGUF layout reader and a
//! deterministic trace-driven simulator.
//!
//! ```
//! use rotary_core::{belady_misses, lru_reference, Trace};
//!
//! let trace = Trace::from_ids(&[1, 2, 3, 1, 2]);
//! assert_eq!(lru_reference(&trace, 2).unwrap(), 5);
//! assert_eq!(belady_misses(&trace, 2).unwrap(), 4);
//! ```

pub mod controller;
pub mod cost;
pub mod engine;
pub mod gguf;
pub mod policy;
pub mod residency;
pub mod scenario;
pub mod workload;

pub use controller::{
    ContextSignature, ControllerError, RotaryController, RotaryParams, RotationDecision, Snapshot,
    SnapshotRing,
};
pub use cost::{
    check_startup, kv_bytes, step_time, summarize, transfer_time, BudgetSide, BudgetViolation,
    CostParameters, Feasibility, MemoryModel, Metrics, StartupInputs, StepRecord,
};
pub use engine::{
    batch, batch_items, compare, run, BatchItem, BatchReport, BatchStatus, ComparisonReport,
    ComparisonRow, Outcome, RunReport, SimError,
};
pub use gguf::{
    build_layout, parse_bytes, parse_header, read_path, tensor_bytes, ExpertClassifier, GgmlType,
    GgufError, GgufFile, GgufHeader, TensorInfo,
};
pub use policy::{
    belady_misses, build_policy, lru_reference, Plan, PolicyError, PolicyKind, ResidencyPolicy,
    VictimRule,
};
pub use residency::{
    LayoutError, LookupTable, ModelLayout, ResidencyError, ResidencyState, SlotGroup, SlotIndex,
    SubModule, SubModuleId, SubModuleKind,
};
pub use scenario::{ScenarioConfig, ScenarioError, ScenarioFile};
pub use workload::{AccessEvent, Trace, TraceError};
