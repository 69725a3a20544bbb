//! Access traces: the per-token routing stream the simulator replays.
//!
//! On disk a trace is JSON Lines, one event per line:
//!
//! ```text
//! {"step": 0, "required": [3, 9], "routing": [[3, 0.5], [9, 0.5]]}
//! ```
//!
//! Writers prepend a single header object `{"universe": U, "provenance": "..."}`
//! so that a written trace reads back structurally equal. Readers accept files
//! without it and then derive the universe from the largest id seen.
//!
//! Multi-layer routing is flattened to one id space: layer `l`, expert `e` of a
//! model with `E` experts per layer maps to id `l * E + e`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::residency::SubModuleId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub step: u64,
    pub required: Vec<SubModuleId>,
    pub routing: Vec<(SubModuleId, f64)>,
}

impl AccessEvent {
    /// Event whose routing puts `1/len` on each required id.
    pub fn uniform(step: u64, mut required: Vec<SubModuleId>) -> Self {
        required.sort_unstable();
        let w = 1.0 / required.len().max(1) as f64;
        let routing = required.iter().map(|&id| (id, w)).collect();
        AccessEvent {
            step,
            required,
            routing,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub events: Vec<AccessEvent>,
    pub universe: u32,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    universe: u32,
    #[serde(default)]
    provenance: String,
}

/// One broken invariant, tied to a 1-based line number (event index + header offset).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("trace validation failed:\n{}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

impl Trace {
    pub fn new(events: Vec<AccessEvent>, universe: u32, provenance: impl Into<String>) -> Self {
        Trace {
            events,
            universe,
            provenance: provenance.into(),
        }
    }

    /// Builds a trace of singleton required sets, routing weight 1 on each.
    pub fn from_ids(ids: &[u32]) -> Self {
        let events = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| AccessEvent::uniform(i as u64, vec![SubModuleId(id)]))
            .collect();
        let universe = ids.iter().max().map_or(0, |m| m + 1);
        Trace::new(events, universe, "inline")
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Every required access in replay order (events in order, ids ascending).
    pub fn flattened(&self) -> Vec<SubModuleId> {
        self.events
            .iter()
            .flat_map(|e| {
                let mut r = e.required.clone();
                r.sort_unstable();
                r
            })
            .collect()
    }

    pub fn distinct_ids(&self) -> BTreeSet<SubModuleId> {
        self.events
            .iter()
            .flat_map(|e| e.required.iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        // Header occupies line 1 of written files; report event lines after it.
        validate_events(&self.events, self.universe, 2)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            universe: self.universe,
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("write to Vec");
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file), path.display().to_string())
    }

    /// Parses and validates JSON Lines; blank lines are skipped.
    pub fn read_jsonl(r: impl BufRead, provenance: String) -> Result<Self, TraceError> {
        let mut header: Option<Header> = None;
        let mut events = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if events.is_empty() && header.is_none() {
                if let Ok(h) = serde_json::from_str::<Header>(text) {
                    header = Some(h);
                    continue;
                }
            }
            let ev: AccessEvent = serde_json::from_str(text).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            events.push(ev);
            lines.push(line_no);
        }
        let (universe, provenance) = match header {
            Some(h) => (
                h.universe,
                if h.provenance.is_empty() {
                    provenance
                } else {
                    h.provenance
                },
            ),
            None => {
                let max = events
                    .iter()
                    .flat_map(|e| {
                        e.required
                            .iter()
                            .chain(e.routing.iter().map(|(id, _)| id))
                            .map(|id| id.0)
                    })
                    .max();
                (max.map_or(0, |m| m + 1), provenance)
            }
        };
        let mut violations = Vec::new();
        check_events(&events, universe, |i| lines[i], &mut violations);
        if !violations.is_empty() {
            return Err(TraceError::Validation(violations));
        }
        Ok(Trace {
            events,
            universe,
            provenance,
        })
    }
}

fn validate_events(
    events: &[AccessEvent],
    universe: u32,
    first_line: usize,
) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    check_events(events, universe, |i| i + first_line, &mut violations);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn check_events(
    events: &[AccessEvent],
    universe: u32,
    line_of: impl Fn(usize) -> usize,
    out: &mut Vec<Violation>,
) {
    let mut prev_step: Option<u64> = None;
    for (i, e) in events.iter().enumerate() {
        let line = line_of(i);
        let mut push = |message: String| out.push(Violation { line, message });
        if let Some(p) = prev_step {
            if e.step <= p {
                if e.step == p {
                    push(format!("duplicated step index {}", e.step));
                } else {
                    push(format!("step {} does not increase (previous {p})", e.step));
                }
            }
        }
        prev_step = Some(e.step);
        if e.required.is_empty() {
            push("required set is empty".into());
        }
        let mut seen = BTreeSet::new();
        for id in &e.required {
            if !seen.insert(*id) {
                push(format!("required id {id} listed twice"));
            }
        }
        let routed: BTreeSet<SubModuleId> = e.routing.iter().map(|(id, _)| *id).collect();
        for id in &e.required {
            if !routed.contains(id) {
                push(format!("required id {id} missing from routing"));
            }
        }
        for (id, w) in &e.routing {
            if !w.is_finite() || *w < 0.0 {
                push(format!(
                    "routing weight {w} for id {id} is not a finite non-negative number"
                ));
            }
        }
        for id in seen.union(&routed) {
            if id.0 >= universe {
                push(format!("id {id} outside universe {universe}"));
            }
        }
    }
}

fn check_top_k(universe: u32, top_k: u32) -> Result<(), TraceError> {
    if top_k == 0 {
        return Err(TraceError::InvalidArgument(
            "top_k must be at least 1".into(),
        ));
    }
    if top_k > universe {
        return Err(TraceError::InvalidArgument(format!(
            "top_k {top_k} exceeds universe {universe}"
        )));
    }
    Ok(())
}

/// Each step draws `top_k` distinct ids uniformly.
pub fn gen_uniform(steps: u64, universe: u32, top_k: u32, seed: u64) -> Result<Trace, TraceError> {
    check_top_k(universe, top_k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..steps)
        .map(|step| {
            let ids = index::sample(&mut rng, universe as usize, top_k as usize)
                .into_iter()
                .map(|i| SubModuleId(i as u32))
                .collect();
            AccessEvent::uniform(step, ids)
        })
        .collect();
    Ok(Trace::new(
        events,
        universe,
        format!("gen_uniform(steps={steps}, universe={universe}, top_k={top_k}, seed={seed})"),
    ))
}

/// Each step draws `top_k` distinct ids without replacement from Zipf(`s`).
pub fn gen_zipf(
    steps: u64,
    universe: u32,
    top_k: u32,
    s: f64,
    seed: u64,
) -> Result<Trace, TraceError> {
    check_top_k(universe, top_k)?;
    if !(s.is_finite() && s >= 0.0) {
        return Err(TraceError::InvalidArgument(format!(
            "zipf exponent must be finite and non-negative, got {s}"
        )));
    }
    let weights: Vec<f64> = (0..universe).map(|i| ((i + 1) as f64).powf(-s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let picked =
            index::sample_weighted(&mut rng, universe as usize, |i| weights[i], top_k as usize)
                .map_err(|e| TraceError::InvalidArgument(e.to_string()))?;
        let ids = picked.into_iter().map(|i| SubModuleId(i as u32)).collect();
        events.push(AccessEvent::uniform(step, ids));
    }
    Ok(Trace::new(
        events,
        universe,
        format!("gen_zipf(steps={steps}, universe={universe}, top_k={top_k}, s={s}, seed={seed})"),
    ))
}

/// Round-robin phases, each emitting `phase_len` singleton events that cycle
/// through the phase's ids in ascending order. The whole rotation of phases is
/// emitted `repeats` times.
pub fn gen_phased(
    phase_sets: &[BTreeSet<u32>],
    phase_len: u64,
    repeats: u32,
    seed: u64,
) -> Result<Trace, TraceError> {
    if phase_sets.is_empty() {
        return Err(TraceError::InvalidArgument("phase list is empty".into()));
    }
    for (i, set) in phase_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(TraceError::InvalidArgument(format!("phase {i} is empty")));
        }
        if phase_len < set.len() as u64 {
            return Err(TraceError::InvalidArgument(format!(
                "phase_len {phase_len} shorter than phase {i} ({} ids)",
                set.len()
            )));
        }
    }
    let universe = phase_sets
        .iter()
        .flat_map(|s| s.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let mut events = Vec::new();
    let mut step = 0u64;
    for _ in 0..repeats {
        for set in phase_sets {
            let ids: Vec<u32> = set.iter().copied().collect();
            for i in 0..phase_len {
                let id = ids[(i % ids.len() as u64) as usize];
                events.push(AccessEvent::uniform(step, vec![SubModuleId(id)]));
                step += 1;
            }
        }
    }
    let phases = phase_sets
        .iter()
        .map(|s| {
            s.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join(";");
    Ok(Trace::new(
        events,
        universe,
        format!(
            "gen_phased(phases={phases}, phase_len={phase_len}, repeats={repeats}, seed={seed})"
        ),
    ))
}

/// Parses `0-3;4-7` or `0,1,2;5` into phase id sets.
pub fn parse_phases(spec: &str) -> Result<Vec<BTreeSet<u32>>, TraceError> {
    let bad = |m: String| TraceError::InvalidArgument(m);
    spec.split(';')
        .map(|phase| {
            let mut set = BTreeSet::new();
            for part in phase.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                if let Some((a, b)) = part.split_once('-') {
                    let a: u32 = a
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad range {part:?}")))?;
                    let b: u32 = b
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad range {part:?}")))?;
                    if a > b {
                        return Err(bad(format!("descending range {part:?}")));
                    }
                    set.extend(a..=b);
                } else {
                    set.insert(part.parse().map_err(|_| bad(format!("bad id {part:?}")))?);
                }
            }
            Ok(set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(t: &Trace) -> Vec<u32> {
        t.flattened().into_iter().map(|i| i.0).collect()
    }

    #[test]
    fn uniform_examples() {
        assert!(gen_uniform(0, 5, 2, 1).unwrap().is_empty());
        let t = gen_uniform(20, 1, 1, 9).unwrap();
        assert!(t.events.iter().all(|e| e.required == vec![SubModuleId(0)]));
        assert_eq!(
            gen_uniform(50, 10, 3, 4).unwrap(),
            gen_uniform(50, 10, 3, 4).unwrap()
        );
        assert!(matches!(
            gen_uniform(1, 3, 4, 0),
            Err(TraceError::InvalidArgument(_))
        ));
        let t = gen_uniform(100, 10, 3, 4).unwrap();
        t.validate().unwrap();
        assert!(t.events.iter().all(|e| e.required.len() == 3));
    }

    #[test]
    fn zipf_zero_is_uniform_chi_square() {
        let universe = 10u32;
        let t = gen_zipf(10_000, universe, 1, 0.0, 7).unwrap();
        let mut counts = vec![0f64; universe as usize];
        for id in t.flattened() {
            counts[id.index()] += 1.0;
        }
        let expected = 10_000.0 / universe as f64;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 27.88, "chi-square {chi2}");
    }

    #[test]
    fn zipf_skew_and_determinism() {
        let t = gen_zipf(10_000, 100, 1, 2.0, 3).unwrap();
        let count = |k: u32| t.flattened().iter().filter(|i| i.0 == k).count();
        assert!(count(0) > count(50));
        assert_eq!(t, gen_zipf(10_000, 100, 1, 2.0, 3).unwrap());
        let multi = gen_zipf(200, 20, 4, 1.2, 5).unwrap();
        multi.validate().unwrap();
        assert!(matches!(
            gen_zipf(1, 4, 2, -1.0, 0),
            Err(TraceError::InvalidArgument(_))
        ));
    }

    #[test]
    fn phased_construction() {
        let phases = parse_phases("0-3;4-7").unwrap();
        let t = gen_phased(&phases, 8, 2, 0).unwrap();
        assert_eq!(t.len(), 32);
        assert_eq!(t.universe, 8);
        let flat = ids(&t);
        assert_eq!(&flat[..8], &[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(&flat[8..12], &[4, 5, 6, 7]);
        assert_eq!(flat[16], 0);
        assert_eq!(&flat[16..32], &flat[..16]);
        assert!(matches!(
            gen_phased(&[], 8, 2, 0),
            Err(TraceError::InvalidArgument(_))
        ));
        assert!(gen_phased(&phases, 3, 1, 0).is_err());
    }

    #[test]
    fn parse_phases_forms() {
        let p = parse_phases("0,2,5; 7-8").unwrap();
        assert_eq!(p[0], [0, 2, 5].into_iter().collect());
        assert_eq!(p[1], [7, 8].into_iter().collect());
        assert!(parse_phases("3-1").is_err());
        assert!(parse_phases("x").is_err());
    }

    #[test]
    fn read_three_lines_without_header() {
        let text = r#"{"step": 0, "required": [1], "routing": [[1, 1.0]]}
{"step": 1, "required": [2], "routing": [[2, 0.5], [3, 0.5]]}
{"step": 5, "required": [0, 3], "routing": [[0, 1.0], [3, 1.0]]}
"#;
        let t = Trace::read_jsonl(text.as_bytes(), "mem".into()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.universe, 4);
        assert_eq!(t.provenance, "mem");
    }

    #[test]
    fn duplicated_step_names_the_line() {
        let text = r#"{"step": 0, "required": [1], "routing": [[1, 1.0]]}
{"step": 0, "required": [2], "routing": [[2, 1.0]]}
"#;
        match Trace::read_jsonl(text.as_bytes(), "mem".into()) {
            Err(TraceError::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].line, 2);
                assert!(v[0].message.contains("duplicated step"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn required_outside_routing_is_rejected() {
        let text = r#"{"step": 0, "required": [1], "routing": [[2, 1.0]]}"#;
        match Trace::read_jsonl(text.as_bytes(), "mem".into()) {
            Err(TraceError::Validation(v)) => {
                assert!(v[0].message.contains("missing from routing"))
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text =
            "{\"step\": 0, \"required\": [1], \"routing\": [[1, 1.0]]}\n{\"step\": 1, oops\n";
        match Trace::read_jsonl(text.as_bytes(), "mem".into()) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn validate_flags_universe_and_weights() {
        let mut t = Trace::from_ids(&[0, 1]);
        t.universe = 1;
        t.events[0].routing[0].1 = -1.0;
        let v = t.validate().unwrap_err();
        assert_eq!(v.len(), 2);
        assert!(v.iter().any(|v| v.message.contains("outside universe")));
        assert!(v.iter().any(|v| v.message.contains("weight")));
    }

    #[test]
    fn round_trip_with_header() {
        let t = gen_zipf(30, 12, 2, 1.0, 11).unwrap();
        let bytes = t.to_jsonl();
        let back = Trace::read_jsonl(&bytes[..], "ignored".into()).unwrap();
        assert_eq!(back, t);
    }
}
