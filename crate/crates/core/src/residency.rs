//! Slot group, lookup table and byte-accurate residency accounting.
//!
//! A [`ResidencyState`] owns `N` cyclically ordered slots, each holding at most
//! one sub-module, plus a bidirectional lookup table between sub-module ids and
//! slot positions. Mandatory (always-on-device) sub-modules are carried as a
//! constant byte term and never occupy a slot.
//!
//! Rotation only moves the head; the occupant set changes exclusively through
//! [`ResidencyState::assign`] and [`ResidencyState::evict`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a loadable unit of weights, unique within a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubModuleId(pub u32);

impl SubModuleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SubModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for SubModuleId {
    fn from(v: u32) -> Self {
        SubModuleId(v)
    }
}

/// Position inside a slot group.
pub type SlotIndex = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubModuleKind {
    Expert,
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModule {
    pub id: SubModuleId,
    pub size_bytes: u64,
    pub kind: SubModuleKind,
    pub layer_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_index: Option<u32>,
}

impl SubModule {
    pub fn expert(id: u32, size_bytes: u64, layer_index: u32, expert_index: u32) -> Self {
        SubModule {
            id: SubModuleId(id),
            size_bytes,
            kind: SubModuleKind::Expert,
            layer_index,
            expert_index: Some(expert_index),
        }
    }

    pub fn shared(id: u32, size_bytes: u64, layer_index: u32) -> Self {
        SubModule {
            id: SubModuleId(id),
            size_bytes,
            kind: SubModuleKind::Shared,
            layer_index,
            expert_index: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResidencyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("assigning sub-module {id} would raise resident bytes to {would_be}, over the budget of {budget}")]
    BudgetExceeded {
        id: SubModuleId,
        would_be: u64,
        budget: u64,
    },
    #[error("sub-module {0} is already resident")]
    DuplicateResident(SubModuleId),
    #[error("sub-module {id} is {size} bytes, larger than the per-slot limit of {limit}")]
    SlotLimitExceeded {
        id: SubModuleId,
        size: u64,
        limit: u64,
    },
    #[error("sub-module {0} is mandatory-resident and cannot occupy a slot")]
    MandatoryNotSlottable(SubModuleId),
    #[error("slot {slot} out of range for a group of {capacity}")]
    SlotOutOfRange { slot: SlotIndex, capacity: usize },
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("duplicate sub-module id {0}")]
    DuplicateId(SubModuleId),
    #[error("sub-module {0} has zero size")]
    ZeroSize(SubModuleId),
    #[error("sub-module {0}: expert_index must be present iff kind is expert")]
    ExpertIndexMismatch(SubModuleId),
    #[error("mandatory id {0} is not in the layout")]
    UnknownMandatory(SubModuleId),
    #[error("mandatory id {0} is not a shared sub-module")]
    MandatoryNotShared(SubModuleId),
    #[error("layout io: {0}")]
    Io(#[from] std::io::Error),
    #[error("layout json: {0}")]
    Json(#[from] serde_json::Error),
}

/// The full host-side model: every sub-module and the always-resident subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelLayout {
    submodules: Vec<SubModule>,
    mandatory_resident: BTreeSet<SubModuleId>,
    #[serde(skip)]
    total_bytes: u64,
    #[serde(skip)]
    by_id: HashMap<SubModuleId, usize>,
}

#[derive(Deserialize)]
struct LayoutFile {
    submodules: Vec<SubModule>,
    #[serde(default)]
    mandatory_resident: Vec<SubModuleId>,
}

impl ModelLayout {
    pub fn new(
        submodules: Vec<SubModule>,
        mandatory_resident: impl IntoIterator<Item = SubModuleId>,
    ) -> Result<Self, LayoutError> {
        let mut by_id = HashMap::with_capacity(submodules.len());
        let mut total_bytes = 0u64;
        for (i, sm) in submodules.iter().enumerate() {
            if sm.size_bytes == 0 {
                return Err(LayoutError::ZeroSize(sm.id));
            }
            if (sm.kind == SubModuleKind::Expert) != sm.expert_index.is_some() {
                return Err(LayoutError::ExpertIndexMismatch(sm.id));
            }
            if by_id.insert(sm.id, i).is_some() {
                return Err(LayoutError::DuplicateId(sm.id));
            }
            total_bytes += sm.size_bytes;
        }
        let mandatory_resident: BTreeSet<_> = mandatory_resident.into_iter().collect();
        for id in &mandatory_resident {
            let idx = *by_id.get(id).ok_or(LayoutError::UnknownMandatory(*id))?;
            if submodules[idx].kind != SubModuleKind::Shared {
                return Err(LayoutError::MandatoryNotShared(*id));
            }
        }
        Ok(ModelLayout {
            submodules,
            mandatory_resident,
            total_bytes,
            by_id,
        })
    }

    pub fn from_json(s: &str) -> Result<Self, LayoutError> {
        let f: LayoutFile = serde_json::from_str(s)?;
        Self::new(f.submodules, f.mandatory_resident)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LayoutError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LayoutError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn submodules(&self) -> &[SubModule] {
        &self.submodules
    }

    pub fn mandatory_resident(&self) -> &BTreeSet<SubModuleId> {
        &self.mandatory_resident
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn get(&self, id: SubModuleId) -> Option<&SubModule> {
        self.by_id.get(&id).map(|&i| &self.submodules[i])
    }

    pub fn is_mandatory(&self, id: SubModuleId) -> bool {
        self.mandatory_resident.contains(&id)
    }

    pub fn mandatory_bytes(&self) -> u64 {
        self.mandatory_resident
            .iter()
            .filter_map(|id| self.get(*id))
            .map(|sm| sm.size_bytes)
            .sum()
    }

    /// Distinct layer indices that carry at least one expert, ascending.
    pub fn expert_layers(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .submodules
            .iter()
            .filter(|sm| sm.kind == SubModuleKind::Expert)
            .map(|sm| sm.layer_index)
            .collect();
        set.into_iter().collect()
    }
}

/// `N` cyclically ordered accelerator slots with a rotating head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SlotGroup {
    head: SlotIndex,
    per_slot_limit: u64,
    occupants: Vec<Option<Occupant>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Occupant {
    pub id: SubModuleId,
    pub size_bytes: u64,
}

impl SlotGroup {
    pub fn new(capacity: usize, per_slot_limit: u64) -> Result<Self, ResidencyError> {
        if capacity == 0 {
            return Err(ResidencyError::InvalidArgument(
                "slot group capacity must be at least 1".into(),
            ));
        }
        if per_slot_limit == 0 {
            return Err(ResidencyError::InvalidArgument(
                "per-slot limit must be positive".into(),
            ));
        }
        Ok(SlotGroup {
            head: 0,
            per_slot_limit,
            occupants: vec![None; capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.occupants.len()
    }

    pub fn head(&self) -> SlotIndex {
        self.head
    }

    pub fn per_slot_limit(&self) -> u64 {
        self.per_slot_limit
    }

    pub fn occupant(&self, slot: SlotIndex) -> Option<Occupant> {
        self.occupants.get(slot).copied().flatten()
    }

    pub fn occupants(&self) -> impl Iterator<Item = (SlotIndex, Occupant)> + '_ {
        self.occupants
            .iter()
            .enumerate()
            .filter_map(|(s, o)| o.map(|o| (s, o)))
    }

    pub fn first_empty_from(&self, start: SlotIndex) -> Option<SlotIndex> {
        let n = self.capacity();
        (0..n)
            .map(|i| (start + i) % n)
            .find(|&s| self.occupants[s].is_none())
    }

    /// Advances the head by `k` and returns the traversed slots in order.
    pub fn rotate_forward(&mut self, k: usize) -> Vec<SlotIndex> {
        let n = self.capacity();
        let traversed = (0..k).map(|i| (self.head + i) % n).collect();
        self.head = (self.head + k % n) % n;
        traversed
    }

    pub fn rotate_reverse(&mut self, k: usize) {
        let n = self.capacity();
        self.head = (self.head + n - k % n) % n;
    }

    pub(crate) fn advance_head_past(&mut self, slot: SlotIndex) {
        self.head = (slot + 1) % self.capacity();
    }
}

/// Bijection between resident sub-module ids and slot positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LookupTable {
    forward: BTreeMap<SubModuleId, SlotIndex>,
    reverse: BTreeMap<SlotIndex, SubModuleId>,
}

impl LookupTable {
    pub fn lookup(&self, id: SubModuleId) -> Option<SlotIndex> {
        self.forward.get(&id).copied()
    }

    pub fn at(&self, slot: SlotIndex) -> Option<SubModuleId> {
        self.reverse.get(&slot).copied()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Current assignment as slot -> id.
    pub fn assignment(&self) -> &BTreeMap<SlotIndex, SubModuleId> {
        &self.reverse
    }

    fn insert(&mut self, id: SubModuleId, slot: SlotIndex) {
        self.forward.insert(id, slot);
        self.reverse.insert(slot, id);
    }

    fn remove_slot(&mut self, slot: SlotIndex) {
        if let Some(id) = self.reverse.remove(&slot) {
            self.forward.remove(&id);
        }
    }
}

/// Outcome of a successful [`ResidencyState::assign`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assigned {
    pub slot: SlotIndex,
    pub evicted: Option<Occupant>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResidencyState {
    slot_group: SlotGroup,
    lut: LookupTable,
    mandatory: BTreeSet<SubModuleId>,
    mandatory_bytes: u64,
    resident_bytes: u64,
    device_budget: u64,
}

impl ResidencyState {
    /// Empty slot group over a fixed mandatory byte term.
    pub fn new(
        slot_group: SlotGroup,
        mandatory: BTreeSet<SubModuleId>,
        mandatory_bytes: u64,
        device_budget: u64,
    ) -> Result<Self, ResidencyError> {
        if mandatory_bytes > device_budget {
            return Err(ResidencyError::InvalidArgument(format!(
                "mandatory bytes {mandatory_bytes} exceed the device budget {device_budget}"
            )));
        }
        let mut state = ResidencyState {
            slot_group,
            lut: LookupTable::default(),
            mandatory,
            mandatory_bytes,
            resident_bytes: mandatory_bytes,
            device_budget,
        };
        // Any pre-filled occupants are folded into the LUT and byte count.
        for (slot, occ) in state.slot_group.occupants().collect::<Vec<_>>() {
            state.lut.insert(occ.id, slot);
            state.resident_bytes += occ.size_bytes;
        }
        if state.resident_bytes > device_budget {
            return Err(ResidencyError::InvalidArgument(
                "initial occupants exceed the device budget".into(),
            ));
        }
        Ok(state)
    }

    pub fn for_layout(
        layout: &ModelLayout,
        slot_group: SlotGroup,
        device_budget: u64,
    ) -> Result<Self, ResidencyError> {
        Self::new(
            slot_group,
            layout.mandatory_resident().clone(),
            layout.mandatory_bytes(),
            device_budget,
        )
    }

    pub fn slot_group(&self) -> &SlotGroup {
        &self.slot_group
    }

    pub fn lut(&self) -> &LookupTable {
        &self.lut
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn device_budget(&self) -> u64 {
        self.device_budget
    }

    pub fn capacity(&self) -> usize {
        self.slot_group.capacity()
    }

    pub fn lookup(&self, id: SubModuleId) -> Option<SlotIndex> {
        self.lut.lookup(id)
    }

    /// Resident in a slot or mandatory.
    pub fn is_resident(&self, id: SubModuleId) -> bool {
        self.mandatory.contains(&id) || self.lut.lookup(id).is_some()
    }

    pub fn rotate_forward(&mut self, k: usize) -> Vec<SlotIndex> {
        self.slot_group.rotate_forward(k)
    }

    pub fn rotate_reverse(&mut self, k: usize) {
        self.slot_group.rotate_reverse(k)
    }

    pub(crate) fn slot_group_mut(&mut self) -> &mut SlotGroup {
        &mut self.slot_group
    }

    /// Places `sm` in `slot`, evicting the previous occupant first.
    ///
    /// On error the state is left untouched.
    pub fn assign(&mut self, slot: SlotIndex, sm: &SubModule) -> Result<Assigned, ResidencyError> {
        let capacity = self.capacity();
        if slot >= capacity {
            return Err(ResidencyError::SlotOutOfRange { slot, capacity });
        }
        if self.mandatory.contains(&sm.id) {
            return Err(ResidencyError::MandatoryNotSlottable(sm.id));
        }
        if sm.size_bytes > self.slot_group.per_slot_limit {
            return Err(ResidencyError::SlotLimitExceeded {
                id: sm.id,
                size: sm.size_bytes,
                limit: self.slot_group.per_slot_limit,
            });
        }
        if self.lut.lookup(sm.id).is_some() {
            return Err(ResidencyError::DuplicateResident(sm.id));
        }
        let previous = self.slot_group.occupants[slot];
        let freed = previous.map_or(0, |o| o.size_bytes);
        let would_be = self.resident_bytes - freed + sm.size_bytes;
        if would_be > self.device_budget {
            return Err(ResidencyError::BudgetExceeded {
                id: sm.id,
                would_be,
                budget: self.device_budget,
            });
        }
        self.lut.remove_slot(slot);
        self.slot_group.occupants[slot] = Some(Occupant {
            id: sm.id,
            size_bytes: sm.size_bytes,
        });
        self.lut.insert(sm.id, slot);
        self.resident_bytes = would_be;
        Ok(Assigned {
            slot,
            evicted: previous,
        })
    }

    /// Empties `slot`. Evicting an empty or out-of-range slot is a no-op.
    pub fn evict(&mut self, slot: SlotIndex) -> Option<Occupant> {
        let occ = self.slot_group.occupants.get_mut(slot)?.take()?;
        self.lut.remove_slot(slot);
        self.resident_bytes -= occ.size_bytes;
        Some(occ)
    }

    /// Re-derives every invariant from scratch; used by tests and debug checks.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut sum = self.mandatory_bytes;
        let mut seen = BTreeSet::new();
        for (slot, occ) in self.slot_group.occupants() {
            if occ.size_bytes > self.slot_group.per_slot_limit {
                return Err(format!("slot {slot} occupant over the per-slot limit"));
            }
            if !seen.insert(occ.id) {
                return Err(format!("{} occupies two slots", occ.id));
            }
            if self.mandatory.contains(&occ.id) {
                return Err(format!("mandatory {} occupies slot {slot}", occ.id));
            }
            if self.lut.lookup(occ.id) != Some(slot) || self.lut.at(slot) != Some(occ.id) {
                return Err(format!("lookup table disagrees at slot {slot}"));
            }
            sum += occ.size_bytes;
        }
        if self.lut.forward.len() != seen.len() || self.lut.reverse.len() != seen.len() {
            return Err("lookup table has stale entries".into());
        }
        if sum != self.resident_bytes {
            return Err(format!(
                "resident bytes drifted: tracked {} vs recomputed {sum}",
                self.resident_bytes
            ));
        }
        if self.resident_bytes > self.device_budget {
            return Err("resident bytes over budget".into());
        }
        if self.slot_group.head >= self.capacity() {
            return Err("head out of range".into());
        }
        Ok(())
    }
}
