//! Rotation controller: turns routing signals into forward, hold or restore
//! decisions.
//!
//! The controller keeps an exponentially weighted, L2-normalized signature of
//! recent routing vectors. Execution is cut into *segments*; a segment ends when
//! the signature jumps (cosine to the previous signature below
//! `tau_boundary`) and the segment's working set would no longer fit in the
//! slot group. At that point a snapshot pairs the signature that *opened* the
//! segment with the slot assignment the segment built. When a later signature
//! matches a stored one at cosine `>= tau`, the snapshot's slot set is
//! restored before the token's experts run (reverse rotation). Otherwise a
//! non-resident requirement advances the head (forward rotation).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::residency::{ResidencyState, SlotIndex, SubModuleId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryParams {
    pub lambda: f64,
    pub tau: f64,
    pub k_step: usize,
    pub history: usize,
    pub snapshot_period: u64,
    pub tau_boundary: f64,
}

impl Default for RotaryParams {
    fn default() -> Self {
        RotaryParams {
            lambda: 1.0,
            tau: 0.9,
            k_step: 1,
            history: 8,
            snapshot_period: 16,
            tau_boundary: 0.5,
        }
    }
}

impl RotaryParams {
    /// Checks the parameters against a slot group of `capacity` slots.
    pub fn validate(&self, capacity: usize) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidArgument(m));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [-1, 1], got {}", self.tau));
        }
        if !(-1.0..=1.0).contains(&self.tau_boundary) {
            return bad(format!(
                "tau_boundary must lie in [-1, 1], got {}",
                self.tau_boundary
            ));
        }
        // A single-slot group has no proper rotation; k = 1 is its full cycle.
        let k_ok = if capacity <= 1 {
            self.k_step == 1
        } else {
            (1..capacity).contains(&self.k_step)
        };
        if !k_ok {
            return bad(format!(
                "k_step must lie in [1, {capacity}), got {}",
                self.k_step
            ));
        }
        if self.history == 0 {
            return bad("history must be at least 1".into());
        }
        if self.snapshot_period == 0 {
            return bad("snapshot_period must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContextSignature {
    weights: Vec<f64>,
    decay: f64,
}

impl ContextSignature {
    /// Zero signature over `universe` routable ids.
    pub fn new(universe: usize, decay: f64) -> Result<Self, ControllerError> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(ControllerError::InvalidArgument(format!(
                "decay must lie in (0, 1], got {decay}"
            )));
        }
        Ok(ContextSignature {
            weights: vec![0.0; universe],
            decay,
        })
    }

    pub fn from_weights(weights: Vec<f64>, decay: f64) -> Self {
        let mut sig = ContextSignature { weights, decay };
        sig.normalize();
        sig
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.weights.iter_mut().for_each(|w| *w /= n);
        }
    }

    /// `normalize(decay * routing + (1 - decay) * self)`.
    pub fn update(&self, routing: &[(SubModuleId, f64)]) -> Result<Self, ControllerError> {
        let mut incoming = vec![0.0; self.weights.len()];
        for &(id, w) in routing {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ControllerError::InvalidArgument(format!(
                    "routing weight {w} for id {id} is negative or not finite"
                )));
            }
            let slot = incoming.get_mut(id.index()).ok_or_else(|| {
                ControllerError::InvalidArgument(format!(
                    "routing id {id} outside signature universe {}",
                    self.weights.len()
                ))
            })?;
            *slot += w;
        }
        if incoming.iter().all(|&w| w == 0.0) {
            return Err(ControllerError::InvalidArgument(
                "routing vector is all zero".into(),
            ));
        }
        let keep = 1.0 - self.decay;
        let weights = incoming
            .iter()
            .zip(&self.weights)
            .map(|(r, s)| self.decay * r + keep * s)
            .collect();
        Ok(ContextSignature::from_weights(weights, self.decay))
    }

    /// Cosine similarity; zero when either side is the zero vector.
    pub fn cosine(&self, other: &ContextSignature) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a * b)
            .sum();
        dot / (na * nb)
    }
}

pub fn update_signature(
    sig: &ContextSignature,
    routing: &[(SubModuleId, f64)],
) -> Result<ContextSignature, ControllerError> {
    sig.update(routing)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub id: u64,
    pub signature: ContextSignature,
    pub assignment: BTreeMap<SlotIndex, SubModuleId>,
    pub step_taken: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotRing {
    capacity: usize,
    entries: VecDeque<Snapshot>,
    next_id: u64,
}

impl SnapshotRing {
    pub fn new(capacity: usize) -> Result<Self, ControllerError> {
        if capacity == 0 {
            return Err(ControllerError::InvalidArgument(
                "snapshot ring capacity must be at least 1".into(),
            ));
        }
        Ok(SnapshotRing {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            next_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Snapshot> {
        self.entries.iter()
    }

    pub fn get(&self, id: u64) -> Option<&Snapshot> {
        self.entries.iter().find(|s| s.id == id)
    }

    /// Appends a snapshot under a fresh id, dropping the oldest when full.
    pub fn take_snapshot(
        &mut self,
        assignment: BTreeMap<SlotIndex, SubModuleId>,
        signature: &ContextSignature,
        step: u64,
    ) -> u64 {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push_back(Snapshot {
            id,
            signature: signature.clone(),
            assignment,
            step_taken: step,
        });
        id
    }

    /// Best cosine match at or above `tau`; ties go to the most recent.
    pub fn match_snapshot(&self, sig: &ContextSignature, tau: f64) -> Option<&Snapshot> {
        let mut best: Option<(&Snapshot, f64)> = None;
        for snap in &self.entries {
            let c = sig.cosine(&snap.signature);
            if c < tau {
                continue;
            }
            match best {
                Some((_, b)) if c < b => {}
                _ => best = Some((snap, c)),
            }
        }
        best.map(|(s, _)| s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "lowercase")]
pub enum RotationDecision {
    Hold,
    Forward(usize),
    Restore(u64),
}

impl std::fmt::Display for RotationDecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RotationDecision::Hold => f.write_str("hold"),
            RotationDecision::Forward(k) => write!(f, "forward({k})"),
            RotationDecision::Restore(id) => write!(f, "restore({id})"),
        }
    }
}

/// True when some member of the snapshot is not currently in a slot.
pub fn snapshot_differs(snapshot: &Snapshot, state: &ResidencyState) -> bool {
    snapshot
        .assignment
        .values()
        .any(|id| state.lookup(*id).is_none())
}

/// Pure decision rule: restore a matching snapshot that would change
/// residency, else advance on a non-resident requirement, else hold.
pub fn decide(
    sig: &ContextSignature,
    ring: &SnapshotRing,
    state: &ResidencyState,
    required: &[SubModuleId],
    params: &RotaryParams,
) -> Result<RotationDecision, ControllerError> {
    params.validate(state.capacity())?;
    if let Some(snap) = ring.match_snapshot(sig, params.tau) {
        if snapshot_differs(snap, state) {
            return Ok(RotationDecision::Restore(snap.id));
        }
    }
    if required.iter().any(|id| !state.is_resident(*id)) {
        return Ok(RotationDecision::Forward(params.k_step));
    }
    Ok(RotationDecision::Hold)
}

/// Prefetch loads that bring a snapshot's slot set back.
///
/// Each missing member goes to its recorded slot unless that slot currently
/// holds another member of the same snapshot; such members are redirected to
/// the first empty slot, or failing that the first slot whose occupant is not
/// a member, scanning cyclically from the head.
pub fn restore_loads(snapshot: &Snapshot, state: &ResidencyState) -> Vec<(SlotIndex, SubModuleId)> {
    let members: BTreeSet<SubModuleId> = snapshot.assignment.values().copied().collect();
    let group = state.slot_group();
    let n = group.capacity();
    let mut taken: BTreeSet<SlotIndex> = BTreeSet::new();
    let mut loads = Vec::new();
    let mut deferred = Vec::new();
    for (&slot, &id) in &snapshot.assignment {
        if state.lookup(id).is_some() {
            continue;
        }
        let blocked = slot >= n
            || group
                .occupant(slot)
                .is_some_and(|occ| members.contains(&occ.id));
        if blocked {
            deferred.push(id);
        } else {
            taken.insert(slot);
            loads.push((slot, id));
        }
    }
    for id in deferred {
        let order: Vec<SlotIndex> = (0..n).map(|i| (group.head() + i) % n).collect();
        let empty = order
            .iter()
            .copied()
            .find(|s| !taken.contains(s) && group.occupant(*s).is_none());
        let free = empty.or_else(|| {
            order.iter().copied().find(|s| {
                !taken.contains(s)
                    && !group
                        .occupant(*s)
                        .is_some_and(|occ| members.contains(&occ.id))
            })
        });
        if let Some(slot) = free {
            taken.insert(slot);
            loads.push((slot, id));
        }
    }
    loads
}

/// Stateful driver around the pure operations above.
#[derive(Clone, Debug)]
pub struct RotaryController {
    params: RotaryParams,
    capacity: usize,
    signature: ContextSignature,
    previous: Option<ContextSignature>,
    ring: SnapshotRing,
    segment_entry: Option<ContextSignature>,
    segment_ids: BTreeSet<SubModuleId>,
    observed: u64,
}

impl RotaryController {
    pub fn new(
        params: RotaryParams,
        capacity: usize,
        universe: usize,
    ) -> Result<Self, ControllerError> {
        params.validate(capacity)?;
        Ok(RotaryController {
            params,
            capacity,
            signature: ContextSignature::new(universe, params.lambda)?,
            previous: None,
            ring: SnapshotRing::new(params.history)?,
            segment_entry: None,
            segment_ids: BTreeSet::new(),
            observed: 0,
        })
    }

    pub fn params(&self) -> &RotaryParams {
        &self.params
    }

    pub fn signature(&self) -> &ContextSignature {
        &self.signature
    }

    pub fn ring(&self) -> &SnapshotRing {
        &self.ring
    }

    /// Observes one token's routing and returns the decision for it.
    ///
    /// `required` lists only the slot-managed requirements of the event.
    pub fn observe(
        &mut self,
        step: u64,
        routing: &[(SubModuleId, f64)],
        required: &[SubModuleId],
        state: &ResidencyState,
    ) -> Result<RotationDecision, ControllerError> {
        let next = self.signature.update(routing)?;
        self.previous = Some(std::mem::replace(&mut self.signature, next));

        let mut snapshotted = false;
        if self.is_boundary(required) {
            snapshotted = self.snapshot_segment(state, step);
            self.segment_entry = None;
            self.segment_ids.clear();
        } else if self.observed > 0 && self.observed.is_multiple_of(self.params.snapshot_period) {
            snapshotted = self.snapshot_segment(state, step);
        }
        log::trace!("step {step}: boundary snapshot taken = {snapshotted}");
        if self.segment_entry.is_none() {
            self.segment_entry = Some(self.signature.clone());
        }
        self.observed += 1;
        decide(&self.signature, &self.ring, state, required, &self.params)
    }

    /// Records the event's slot-managed requirements in the open segment.
    pub fn finish_step(&mut self, required: &[SubModuleId]) {
        self.segment_ids.extend(required.iter().copied());
    }

    fn is_boundary(&self, required: &[SubModuleId]) -> bool {
        let Some(prev) = &self.previous else {
            return false;
        };
        if self.segment_ids.is_empty() || prev.norm() == 0.0 {
            return false;
        }
        if self.signature.cosine(prev) >= self.params.tau_boundary {
            return false;
        }
        let mut union = self.segment_ids.clone();
        union.extend(required.iter().copied());
        union.len() > self.capacity
    }

    fn snapshot_segment(&mut self, state: &ResidencyState, step: u64) -> bool {
        let assignment = state.lut().assignment().clone();
        match &self.segment_entry {
            Some(entry) if !assignment.is_empty() => {
                self.ring.take_snapshot(assignment, &entry.clone(), step);
                true
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residency::{SlotGroup, SubModule};

    fn e(universe: usize, i: u32, decay: f64) -> ContextSignature {
        ContextSignature::new(universe, decay)
            .unwrap()
            .update(&[(SubModuleId(i), 1.0)])
            .unwrap()
    }

    fn empty_state(n: usize) -> ResidencyState {
        ResidencyState::new(SlotGroup::new(n, 100).unwrap(), BTreeSet::new(), 0, 10_000).unwrap()
    }

    #[test]
    fn lambda_one_replaces() {
        let sig = e(10, 2, 1.0).update(&[(SubModuleId(5), 3.0)]).unwrap();
        let mut expected = [0.0; 10];
        expected[5] = 1.0;
        assert_eq!(sig.weights(), &expected[..]);
    }

    #[test]
    fn half_decay_closed_form() {
        let sig = e(10, 5, 0.5).update(&[(SubModuleId(7), 1.0)]).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((sig.weights()[5] - r).abs() < 1e-12);
        assert!((sig.weights()[7] - r).abs() < 1e-12);
        assert!((sig.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_routing_converges_monotonically() {
        let routing = [(SubModuleId(1), 0.3), (SubModuleId(4), 0.7)];
        let target = ContextSignature::from_weights(
            (0..6)
                .map(|i| match i {
                    1 => 0.3,
                    4 => 0.7,
                    _ => 0.0,
                })
                .collect(),
            0.2,
        );
        let mut sig = ContextSignature::new(6, 0.2)
            .unwrap()
            .update(&[(SubModuleId(0), 1.0)])
            .unwrap();
        let mut last = sig.cosine(&target);
        for _ in 0..100 {
            sig = sig.update(&routing).unwrap();
            let c = sig.cosine(&target);
            assert!(c >= last - 1e-12, "cosine decreased: {last} -> {c}");
            last = c;
        }
        assert!(last > 1.0 - 1e-9);
    }

    #[test]
    fn all_zero_routing_rejected() {
        let sig = ContextSignature::new(4, 1.0).unwrap();
        assert!(sig.update(&[(SubModuleId(1), 0.0)]).is_err());
        assert!(sig.update(&[]).is_err());
        assert!(sig.update(&[(SubModuleId(9), 1.0)]).is_err());
    }

    #[test]
    fn snapshot_ring_fifo_bound_and_fresh_ids() {
        let mut ring = SnapshotRing::new(4).unwrap();
        let sig = e(4, 0, 1.0);
        assert_eq!(ring.len(), 0);
        ring.take_snapshot(BTreeMap::new(), &sig, 0);
        assert_eq!(ring.len(), 1);
        for step in 1..5 {
            ring.take_snapshot(BTreeMap::new(), &sig, step);
        }
        let ids: Vec<u64> = ring.entries().map(|s| s.id).collect();
        assert_eq!(ids, vec![1, 2, 3, 4]);

        let a: BTreeMap<_, _> = [(0, SubModuleId(1))].into_iter().collect();
        let x = ring.take_snapshot(a.clone(), &sig, 9);
        let y = ring.take_snapshot(a, &sig, 9);
        assert_ne!(x, y);
    }

    #[test]
    fn match_snapshot_cases() {
        let mut ring = SnapshotRing::new(4).unwrap();
        assert!(ring.match_snapshot(&e(3, 0, 1.0), 0.0).is_none());

        let s1 = ring.take_snapshot(BTreeMap::new(), &e(3, 1, 1.0), 0);
        let s2 = ring.take_snapshot(BTreeMap::new(), &e(3, 2, 1.0), 1);
        assert_eq!(ring.match_snapshot(&e(3, 2, 1.0), 0.9).unwrap().id, s2);

        let probe = ContextSignature::from_weights(vec![0.0, 0.9, 0.1], 1.0);
        // Hand oracle: 0.9 / sqrt(0.81 + 0.01).
        let expected_cos = 0.9 / (0.82f64).sqrt();
        assert!((expected_cos - 0.99388).abs() < 1e-5);
        let m = ring.match_snapshot(&probe, 0.8).unwrap();
        assert_eq!(m.id, s1);
        assert!((probe.cosine(&m.signature) - expected_cos).abs() < 1e-12);
        assert!(ring.match_snapshot(&probe, 0.995).is_none());
    }

    #[test]
    fn match_ties_prefer_most_recent() {
        let mut ring = SnapshotRing::new(4).unwrap();
        let sig = e(3, 0, 1.0);
        ring.take_snapshot(BTreeMap::new(), &sig, 0);
        let newer = ring.take_snapshot(BTreeMap::new(), &sig, 1);
        assert_eq!(ring.match_snapshot(&sig, 0.5).unwrap().id, newer);
    }

    #[test]
    fn decide_rules() {
        let params = RotaryParams::default();
        let mut state = empty_state(4);
        state.assign(0, &SubModule::expert(0, 10, 0, 0)).unwrap();
        let ring = SnapshotRing::new(2).unwrap();
        let sig = e(4, 0, 1.0);
        assert_eq!(
            decide(&sig, &ring, &state, &[SubModuleId(0)], &params).unwrap(),
            RotationDecision::Hold
        );
        assert_eq!(
            decide(&sig, &ring, &state, &[SubModuleId(1)], &params).unwrap(),
            RotationDecision::Forward(1)
        );

        let mut ring = SnapshotRing::new(2).unwrap();
        let other: BTreeMap<_, _> = [(1, SubModuleId(3))].into_iter().collect();
        let id = ring.take_snapshot(other, &sig, 0);
        assert_eq!(
            decide(&sig, &ring, &state, &[SubModuleId(0)], &params).unwrap(),
            RotationDecision::Restore(id)
        );

        let bad = RotaryParams {
            k_step: 4,
            ..params
        };
        assert!(decide(&sig, &ring, &state, &[], &bad).is_err());
        let bad = RotaryParams { tau: 1.5, ..params };
        assert!(decide(&sig, &ring, &state, &[], &bad).is_err());
    }

    #[test]
    fn restore_loads_are_set_difference() {
        let mut state = empty_state(4);
        state.assign(0, &SubModule::expert(10, 1, 0, 0)).unwrap();
        let snap = Snapshot {
            id: 0,
            signature: e(2, 0, 1.0),
            assignment: [(0, SubModuleId(10)), (1, SubModuleId(11))]
                .into_iter()
                .collect(),
            step_taken: 0,
        };
        assert_eq!(restore_loads(&snap, &state), vec![(1, SubModuleId(11))]);
    }

    #[test]
    fn restore_redirects_around_misplaced_members() {
        let mut state = empty_state(3);
        // Member 11 sits in slot 0, where the snapshot wants member 10.
        state.assign(0, &SubModule::expert(11, 1, 0, 0)).unwrap();
        state.assign(1, &SubModule::expert(99, 1, 0, 1)).unwrap();
        let snap = Snapshot {
            id: 0,
            signature: e(2, 0, 1.0),
            assignment: [(0, SubModuleId(10)), (1, SubModuleId(11))]
                .into_iter()
                .collect(),
            step_taken: 0,
        };
        let loads = restore_loads(&snap, &state);
        assert_eq!(loads, vec![(2, SubModuleId(10))]);
    }
}
