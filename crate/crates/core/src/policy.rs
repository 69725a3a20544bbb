//! Residency policies behind one contract: rotary, LRU, FIFO, seeded random
//! and the offline Belady/MIN oracle.
//!
//! All policies share the empty-slot-first victim rule. Only rotary issues
//! prefetches; the others are demand-only. [`belady_misses`] and
//! [`lru_reference`] are standalone unit-size counters used to cross-check the
//! engine's policies.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    restore_loads, ControllerError, RotaryController, RotaryParams, RotationDecision,
};
use crate::residency::{ResidencyState, SlotIndex, SubModule, SubModuleId};
use crate::workload::{AccessEvent, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("event at step {step} requires {required} sub-modules but capacity is {capacity}")]
    InfeasibleTrace {
        step: u64,
        required: usize,
        capacity: usize,
    },
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("unknown policy {0:?} (expected rotary, lru, fifo, random or belady)")]
    UnknownPolicy(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum PolicyKind {
    Rotary(RotaryParams),
    Lru,
    Fifo,
    Random { seed: u64 },
    Belady,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Rotary(_) => "rotary",
            PolicyKind::Lru => "lru",
            PolicyKind::Fifo => "fifo",
            PolicyKind::Random { .. } => "random",
            PolicyKind::Belady => "belady",
        }
    }

    /// Parses a policy name; `seed` and `rotary` fill in the parameterized kinds.
    pub fn parse(name: &str, seed: u64, rotary: RotaryParams) -> Result<Self, PolicyError> {
        match name.trim() {
            "rotary" => Ok(PolicyKind::Rotary(rotary)),
            "lru" => Ok(PolicyKind::Lru),
            "fifo" => Ok(PolicyKind::Fifo),
            "random" => Ok(PolicyKind::Random { seed }),
            "belady" => Ok(PolicyKind::Belady),
            other => Err(PolicyError::UnknownPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rule used to pick a demand victim when no slot is empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimRule {
    LeastRecentlyUsed,
    OldestLoaded,
    SeededUniform,
    RotaryHead,
    FarthestNextUse,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub prefetch_loads: Vec<(SlotIndex, SubModuleId)>,
    pub demand_slot_chooser: VictimRule,
    pub rotation: Option<RotationDecision>,
}

impl Plan {
    fn demand_only(rule: VictimRule) -> Self {
        Plan {
            prefetch_loads: Vec::new(),
            demand_slot_chooser: rule,
            rotation: None,
        }
    }
}

/// Per-run policy state machine driven by the simulation engine.
///
/// Per event the engine calls, in order: [`plan_prefetch`], then (if the plan
/// rotates forward) [`refill_candidates`], then for each required id
/// [`on_request`] followed by either [`on_access`] (hit) or
/// [`choose_victim`] + [`on_load`] (miss), and finally [`end_step`].
///
/// [`plan_prefetch`]: ResidencyPolicy::plan_prefetch
/// [`refill_candidates`]: ResidencyPolicy::refill_candidates
/// [`on_request`]: ResidencyPolicy::on_request
/// [`on_access`]: ResidencyPolicy::on_access
/// [`choose_victim`]: ResidencyPolicy::choose_victim
/// [`on_load`]: ResidencyPolicy::on_load
/// [`end_step`]: ResidencyPolicy::end_step
pub trait ResidencyPolicy: Send {
    fn kind(&self) -> PolicyKind;

    /// `managed` holds the event's requirements that live in slots.
    fn plan_prefetch(
        &mut self,
        event: &AccessEvent,
        managed: &[SubModuleId],
        state: &ResidencyState,
    ) -> Result<Plan, PolicyError>;

    fn refill_candidates(&mut self, _slots: Vec<SlotIndex>) {}

    fn on_request(&mut self, _id: SubModuleId) {}

    fn on_access(&mut self, _slot: SlotIndex) {}

    fn on_load(&mut self, _slot: SlotIndex) {}

    fn choose_victim(&mut self, state: &mut ResidencyState, incoming: &SubModule) -> SlotIndex;

    fn end_step(&mut self, _managed: &[SubModuleId]) {}
}

fn lowest_empty(state: &ResidencyState) -> Option<SlotIndex> {
    state.slot_group().first_empty_from(0)
}

/// Least-recently-used over per-slot access stamps.
#[derive(Debug)]
pub struct Lru {
    stamps: Vec<u64>,
    clock: u64,
}

impl Lru {
    pub fn new(capacity: usize) -> Self {
        Lru {
            stamps: vec![0; capacity],
            clock: 0,
        }
    }

    fn touch(&mut self, slot: SlotIndex) {
        self.clock += 1;
        self.stamps[slot] = self.clock;
    }
}

impl ResidencyPolicy for Lru {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lru
    }

    fn plan_prefetch(
        &mut self,
        _: &AccessEvent,
        _: &[SubModuleId],
        _: &ResidencyState,
    ) -> Result<Plan, PolicyError> {
        Ok(Plan::demand_only(VictimRule::LeastRecentlyUsed))
    }

    fn on_access(&mut self, slot: SlotIndex) {
        self.touch(slot);
    }

    fn on_load(&mut self, slot: SlotIndex) {
        self.touch(slot);
    }

    fn choose_victim(&mut self, state: &mut ResidencyState, _: &SubModule) -> SlotIndex {
        lowest_empty(state).unwrap_or_else(|| {
            state
                .slot_group()
                .occupants()
                .min_by_key(|(slot, _)| (self.stamps[*slot], *slot))
                .map(|(slot, _)| slot)
                .expect("full group has occupants")
        })
    }
}

/// Evicts the occupant that was loaded first.
#[derive(Debug)]
pub struct Fifo {
    loaded_at: Vec<u64>,
    clock: u64,
}

impl Fifo {
    pub fn new(capacity: usize) -> Self {
        Fifo {
            loaded_at: vec![0; capacity],
            clock: 0,
        }
    }
}

impl ResidencyPolicy for Fifo {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Fifo
    }

    fn plan_prefetch(
        &mut self,
        _: &AccessEvent,
        _: &[SubModuleId],
        _: &ResidencyState,
    ) -> Result<Plan, PolicyError> {
        Ok(Plan::demand_only(VictimRule::OldestLoaded))
    }

    fn on_load(&mut self, slot: SlotIndex) {
        self.clock += 1;
        self.loaded_at[slot] = self.clock;
    }

    fn choose_victim(&mut self, state: &mut ResidencyState, _: &SubModule) -> SlotIndex {
        lowest_empty(state).unwrap_or_else(|| {
            state
                .slot_group()
                .occupants()
                .min_by_key(|(slot, _)| (self.loaded_at[*slot], *slot))
                .map(|(slot, _)| slot)
                .expect("full group has occupants")
        })
    }
}

#[derive(Debug)]
pub struct RandomEviction {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomEviction {
    pub fn new(seed: u64) -> Self {
        RandomEviction {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ResidencyPolicy for RandomEviction {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Random { seed: self.seed }
    }

    fn plan_prefetch(
        &mut self,
        _: &AccessEvent,
        _: &[SubModuleId],
        _: &ResidencyState,
    ) -> Result<Plan, PolicyError> {
        Ok(Plan::demand_only(VictimRule::SeededUniform))
    }

    fn choose_victim(&mut self, state: &mut ResidencyState, _: &SubModule) -> SlotIndex {
        lowest_empty(state).unwrap_or_else(|| self.rng.gen_range(0..state.capacity()))
    }
}

/// Clairvoyant MIN: evicts the occupant whose next request is farthest away.
#[derive(Debug)]
pub struct Belady {
    positions: HashMap<SubModuleId, Vec<usize>>,
    cursor: Option<usize>,
}

impl Belady {
    /// Only constructible with the full trace it will replay.
    pub fn new(trace: &Trace) -> Self {
        let mut positions: HashMap<SubModuleId, Vec<usize>> = HashMap::new();
        for (i, id) in trace.flattened().into_iter().enumerate() {
            positions.entry(id).or_default().push(i);
        }
        Belady {
            positions,
            cursor: None,
        }
    }

    fn next_use(&self, id: SubModuleId) -> usize {
        let now = self.cursor.unwrap_or(0);
        self.positions
            .get(&id)
            .and_then(|p| p.get(p.partition_point(|&x| x <= now)).copied())
            .unwrap_or(usize::MAX)
    }
}

impl ResidencyPolicy for Belady {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Belady
    }

    fn plan_prefetch(
        &mut self,
        _: &AccessEvent,
        _: &[SubModuleId],
        _: &ResidencyState,
    ) -> Result<Plan, PolicyError> {
        Ok(Plan::demand_only(VictimRule::FarthestNextUse))
    }

    fn on_request(&mut self, _id: SubModuleId) {
        self.cursor = Some(self.cursor.map_or(0, |c| c + 1));
    }

    fn choose_victim(&mut self, state: &mut ResidencyState, _: &SubModule) -> SlotIndex {
        lowest_empty(state).unwrap_or_else(|| {
            // Farthest next use wins; among equals the lowest slot.
            state
                .slot_group()
                .occupants()
                .max_by_key(|(slot, occ)| (self.next_use(occ.id), std::cmp::Reverse(*slot)))
                .map(|(slot, _)| slot)
                .expect("full group has occupants")
        })
    }
}

/// Rotation-driven residency: restores recurring slot sets, and otherwise
/// refills at the positions the head sweeps over.
#[derive(Debug)]
pub struct Rotary {
    controller: RotaryController,
    pending: VecDeque<SlotIndex>,
}

impl Rotary {
    pub fn new(
        params: RotaryParams,
        capacity: usize,
        universe: usize,
    ) -> Result<Self, PolicyError> {
        Ok(Rotary {
            controller: RotaryController::new(params, capacity, universe)?,
            pending: VecDeque::new(),
        })
    }

    pub fn controller(&self) -> &RotaryController {
        &self.controller
    }
}

impl ResidencyPolicy for Rotary {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Rotary(*self.controller.params())
    }

    fn plan_prefetch(
        &mut self,
        event: &AccessEvent,
        managed: &[SubModuleId],
        state: &ResidencyState,
    ) -> Result<Plan, PolicyError> {
        let decision = self
            .controller
            .observe(event.step, &event.routing, managed, state)?;
        let prefetch_loads = match decision {
            RotationDecision::Restore(id) => {
                let snap = self
                    .controller
                    .ring()
                    .get(id)
                    .expect("decision names a live snapshot");
                restore_loads(snap, state)
            }
            _ => Vec::new(),
        };
        Ok(Plan {
            prefetch_loads,
            demand_slot_chooser: VictimRule::RotaryHead,
            rotation: Some(decision),
        })
    }

    fn refill_candidates(&mut self, slots: Vec<SlotIndex>) {
        self.pending = slots.into();
    }

    fn choose_victim(&mut self, state: &mut ResidencyState, _: &SubModule) -> SlotIndex {
        let head = state.slot_group().head();
        let cursor = self.pending.front().copied().unwrap_or(head);
        if let Some(empty) = state.slot_group().first_empty_from(cursor) {
            self.pending.retain(|&s| s != empty);
            if empty == head {
                state.slot_group_mut().advance_head_past(empty);
            }
            return empty;
        }
        if let Some(slot) = self.pending.pop_front() {
            return slot;
        }
        state.slot_group_mut().advance_head_past(head);
        head
    }

    fn end_step(&mut self, managed: &[SubModuleId]) {
        self.pending.clear();
        self.controller.finish_step(managed);
    }
}

/// Instantiates the policy state machine for one run over `trace`.
pub fn build_policy(
    kind: PolicyKind,
    capacity: usize,
    trace: &Trace,
) -> Result<Box<dyn ResidencyPolicy>, PolicyError> {
    if capacity == 0 {
        return Err(PolicyError::ZeroCapacity);
    }
    Ok(match kind {
        PolicyKind::Rotary(params) => {
            Box::new(Rotary::new(params, capacity, trace.universe as usize)?)
        }
        PolicyKind::Lru => Box::new(Lru::new(capacity)),
        PolicyKind::Fifo => Box::new(Fifo::new(capacity)),
        PolicyKind::Random { seed } => Box::new(RandomEviction::new(seed)),
        PolicyKind::Belady => Box::new(Belady::new(trace)),
    })
}

fn check_capacity(trace: &Trace, capacity: usize) -> Result<(), PolicyError> {
    if capacity == 0 {
        return Err(PolicyError::ZeroCapacity);
    }
    for e in &trace.events {
        let distinct: BTreeSet<_> = e.required.iter().collect();
        if distinct.len() > capacity {
            return Err(PolicyError::InfeasibleTrace {
                step: e.step,
                required: distinct.len(),
                capacity,
            });
        }
    }
    Ok(())
}

/// Miss count of clairvoyant demand-only MIN with unit-size entries.
pub fn belady_misses(trace: &Trace, capacity: usize) -> Result<u64, PolicyError> {
    check_capacity(trace, capacity)?;
    let seq = trace.flattened();
    let mut cache: Vec<SubModuleId> = Vec::with_capacity(capacity);
    let mut misses = 0;
    for (i, id) in seq.iter().enumerate() {
        if cache.contains(id) {
            continue;
        }
        misses += 1;
        if cache.len() < capacity {
            cache.push(*id);
            continue;
        }
        let victim = cache
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| {
                seq[i + 1..]
                    .iter()
                    .position(|x| x == *c)
                    .unwrap_or(usize::MAX)
            })
            .map(|(pos, _)| pos)
            .expect("cache is full");
        cache[victim] = *id;
    }
    Ok(misses)
}

/// Miss count of a plain recency-list LRU; a test oracle for the engine.
pub fn lru_reference(trace: &Trace, capacity: usize) -> Result<u64, PolicyError> {
    check_capacity(trace, capacity)?;
    let mut list: Vec<SubModuleId> = Vec::new();
    let mut misses = 0;
    for id in trace.flattened() {
        if let Some(pos) = list.iter().position(|x| *x == id) {
            list.remove(pos);
        } else {
            misses += 1;
            if list.len() == capacity {
                list.remove(0);
            }
        }
        list.push(id);
    }
    Ok(misses)
}
